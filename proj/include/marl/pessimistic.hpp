#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "marl/error.hpp"
#include "marl/game.hpp"
#include "marl/mappo.hpp"
#include "marl/oracle.hpp"
#include "marl/policy.hpp"
#include "marl/rng.hpp"

namespace marl {

// Throughout this file m is a prefix length in 1..N: the value class for
// agent m lives on (s, a^{1:m}) and shares agent (m-1)'s policy features.

/// mu = mu_s x mu_a over states and joint actions.
struct DataDistribution {
    Eigen::VectorXd state;
    Eigen::VectorXd joint;

    static DataDistribution uniform(const Game& g) {
        return {Eigen::VectorXd::Constant(g.num_states, 1.0 / g.num_states),
                Eigen::VectorXd::Constant(g.num_joint(), 1.0 / static_cast<double>(g.num_joint()))};
    }

    /// Product of per-agent action laws.
    static DataDistribution product(const Game& g, Eigen::VectorXd state, const std::vector<Eigen::VectorXd>& per_agent) {
        if (static_cast<int>(per_agent.size()) != g.num_agents()) throw ConfigError("need one action law per agent");
        Eigen::VectorXd joint(g.num_joint());
        for (Index j = 0; j < g.num_joint(); ++j) {
            const auto acts = g.actions.decode(j, g.num_agents());
            double p = 1.0;
            for (int i = 0; i < g.num_agents(); ++i) p *= per_agent[i][acts[i]];
            joint[j] = p;
        }
        return {std::move(state), std::move(joint)};
    }

    void validate(const Game& g) const {
        if (state.size() != g.num_states || joint.size() != g.num_joint())
            throw ConfigError("data distribution has wrong shape");
        if (state.minCoeff() < 0.0 || std::abs(state.sum() - 1.0) > 1e-12) throw ConfigError("mu_s is not a distribution");
        if (joint.minCoeff() < 0.0 || std::abs(joint.sum() - 1.0) > 1e-12) throw ConfigError("mu_a is not a distribution");
    }

    bool full_state_support() const { return state.minCoeff() > 0.0; }
    bool full_action_support() const { return joint.minCoeff() > 0.0; }
};

struct OracleDraw {
    int s = 0;
    double r = 0.0;
    int s_next = 0;
};

/// Reset to s ~ mu_s, play `joint`, observe (r, s').
inline OracleDraw sampling_oracle_draw(const Game& g, const DataDistribution& mu, Index joint, Rng& rng) {
    OracleDraw d;
    d.s = static_cast<int>(sample_categorical(rng, mu.state));
    d.r = g.reward(d.s, joint);
    d.s_next = static_cast<int>(sample_categorical(rng, g.transition.row(g.row(d.s, joint))));
    return d;
}

struct Transition {
    int s = 0;
    Index prefix = 0;
    double r = 0.0;
    int s_next = 0;
};

struct TransitionDataset {
    int m = 0;
    std::vector<Transition> records;
    std::uint64_t seed = 0;
    std::string source;

    std::size_t size() const { return records.size(); }
};

/// n records of the reset protocol for prefix length m: s ~ mu_s, a ~ mu_a,
/// complement a^{m+1:N} ~ pi given (s, a^{1:m}); only (s, a^{1:m}, r, s') is kept.
inline TransitionDataset build_dataset(const Game& g, const FactorizedPolicy& pi, int m, const DataDistribution& mu,
                                       Index n, std::uint64_t seed, std::string source = {}) {
    if (m < 1 || m > g.num_agents()) throw ConfigError("prefix length must lie in 1..N");
    if (n < 1) throw ConfigError("dataset size must be >= 1");
    Rng rng = make_rng(seed);
    TransitionDataset data;
    data.m = m;
    data.seed = seed;
    data.source = std::move(source);
    data.records.reserve(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
        const int s = static_cast<int>(sample_categorical(rng, mu.state));
        const Index a = sample_categorical(rng, mu.joint);
        const Index prefix = g.actions.truncate(a, m);
        const Index joint = sample_completion(pi, s, prefix, m, rng);
        Transition t;
        t.s = s;
        t.prefix = prefix;
        t.r = g.reward(s, joint);
        t.s_next = static_cast<int>(sample_categorical(rng, g.transition.row(g.row(s, joint))));
        data.records.push_back(t);
    }
    return data;
}

inline std::string dataset_to_jsonl(const TransitionDataset& d, const ActionIndexer& acts) {
    std::string out;
    for (const auto& t : d.records) {
        nlohmann::json j = {{"s", t.s}, {"a_prefix", acts.decode(t.prefix, d.m)}, {"r", t.r}, {"s_next", t.s_next}};
        out += j.dump();
        out += '\n';
    }
    return out;
}

inline TransitionDataset dataset_from_jsonl(const std::string& text, const Game& g, int m) {
    TransitionDataset d;
    d.m = m;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const std::string where = "line " + std::to_string(lineno);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError(std::string("malformed JSON: ") + e.what(), where);
        }
        try {
            Transition t;
            t.s = j.at("s").get<int>();
            t.prefix = g.actions.encode(j.at("a_prefix").get<std::vector<int>>());
            if (static_cast<int>(j.at("a_prefix").size()) != m) throw ParseError("prefix length mismatch", where);
            t.r = j.at("r").get<double>();
            t.s_next = j.at("s_next").get<int>();
            if (t.s < 0 || t.s >= g.num_states || t.s_next < 0 || t.s_next >= g.num_states)
                throw ParseError("state index out of range", where);
            d.records.push_back(t);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(e.what(), where);
        } catch (const std::out_of_range& e) {
            throw ParseError(e.what(), where);
        }
    }
    return d;
}

// ---------------------------------------------------------------------------
// Next-state values f(s', pi^{1:m})
// ---------------------------------------------------------------------------

inline constexpr Index kExactPrefixCap = 4096;
inline constexpr int kPrefixMcDraws = 256;

/// Row averages of `table` (|S| x (P_m * cols)) over the prefix chain at
/// each state: out.row(s) = sum_p pi^{1:m}(p|s) table.block(s, p). Exact below
/// kExactPrefixCap prefixes; otherwise the mean of kPrefixMcDraws sampled
/// prefixes, and `sampled` is set.
inline RowMatrix prefix_average(const FactorizedPolicy& pi, int m, const RowMatrix& table, Index cols,
                                bool* sampled = nullptr, std::uint64_t seed = 0) {
    const auto& acts = pi.actions();
    const Index P = acts.prefix_count(m);
    const Index S = table.rows();
    RowMatrix out = RowMatrix::Zero(S, cols);
    if (P <= kExactPrefixCap) {
        const RowMatrix marg = pi.prefix_marginal(m);
        for (Index s = 0; s < S; ++s)
            for (Index p = 0; p < P; ++p) {
                const double w = marg(s, p);
                if (w != 0.0) out.row(s) += w * table.block(s, p * cols, 1, cols);
            }
        if (sampled) *sampled = false;
        return out;
    }
    Rng rng = make_rng(seed);
    for (Index s = 0; s < S; ++s) {
        for (int k = 0; k < kPrefixMcDraws; ++k) {
            Index p = 0;
            for (int i = 0; i < m; ++i)
                p = acts.extend(p, i, static_cast<int>(sample_categorical(rng, pi.conditional(i, static_cast<int>(s), p))));
            out.row(s) += table.block(s, p * cols, 1, cols);
        }
        out.row(s) /= kPrefixMcDraws;
    }
    if (sampled) *sampled = true;
    return out;
}

inline Eigen::VectorXd next_values(const FactorizedPolicy& pi, int m, const RowMatrix& f, bool* sampled = nullptr) {
    return prefix_average(pi, m, f, 1, sampled).col(0);
}

// ---------------------------------------------------------------------------
// Squared Bellman loss and Bellman error
// ---------------------------------------------------------------------------

/// Per-(input, s') sufficient statistics of a dataset: counts and first and
/// second moments of r. Input x = s * P_m + prefix.
struct DatasetStats {
    int m = 0;
    double n = 0.0;
    RowMatrix count;
    RowMatrix sum_r;
    RowMatrix sum_r2;

    static DatasetStats from(const TransitionDataset& d, const Game& g) {
        DatasetStats st;
        st.m = d.m;
        st.n = static_cast<double>(d.size());
        const Index X = g.num_states * g.actions.prefix_count(d.m);
        st.count = RowMatrix::Zero(X, g.num_states);
        st.sum_r = RowMatrix::Zero(X, g.num_states);
        st.sum_r2 = RowMatrix::Zero(X, g.num_states);
        const Index P = g.actions.prefix_count(d.m);
        for (const auto& t : d.records) {
            const Index x = t.s * P + t.prefix;
            st.count(x, t.s_next) += 1.0;
            st.sum_r(x, t.s_next) += t.r;
            st.sum_r2(x, t.s_next) += t.r * t.r;
        }
        return st;
    }
};

/// Flattened (s, a^{1:m}) -> value vector of an |S| x P_m table.
inline Eigen::VectorXd flatten(const RowMatrix& f) {
    return Eigen::Map<const Eigen::VectorXd>(f.data(), f.size());
}

inline RowMatrix unflatten(const Eigen::VectorXd& v, Index S) {
    return Eigen::Map<const RowMatrix>(v.data(), S, v.size() / S);
}

/// L(f', f) from sufficient statistics, given f' flattened and f(s', pi) per s'.
inline double bellman_loss_from_stats(const DatasetStats& st, const Eigen::VectorXd& fprime, const Eigen::VectorXd& next,
                                      double gamma) {
    double acc = 0.0;
    for (Index x = 0; x < st.count.rows(); ++x)
        for (Index t = 0; t < st.count.cols(); ++t) {
            const double c = st.count(x, t);
            if (c == 0.0) continue;
            const double base = fprime[x] - gamma * next[t];
            acc += c * base * base - 2.0 * base * st.sum_r(x, t) + st.sum_r2(x, t);
        }
    return std::max(acc, 0.0) / st.n;
}

/// L^{1:m}(f', f, pi) = mean over records of (f'(s, a^{1:m}) - r - gamma f(s', pi^{1:m}))^2.
inline double squared_bellman_loss(const RowMatrix& fprime, const RowMatrix& f, const FactorizedPolicy& pi,
                                   const TransitionDataset& data, double gamma, bool* sampled = nullptr) {
    const Eigen::VectorXd next = next_values(pi, data.m, f, sampled);
    if (data.records.empty()) return 0.0;
    double acc = 0.0;
    for (const auto& t : data.records) {
        const double resid = fprime(t.s, t.prefix) - t.r - gamma * next[t.s_next];
        acc += resid * resid;
    }
    return acc / static_cast<double>(data.size());
}

/// Linear value class {phi^T omega : ||omega|| <= L} read out clipped to [0, B].
struct LinearValueClass {
    FeatureMap features;
    double radius = 1.0;
    double bound = 1.0;

    RowMatrix table(const Eigen::VectorXd& omega, Index S) const { return unflatten(features.scores(omega), S); }
    RowMatrix clipped_table(const Eigen::VectorXd& omega, Index S) const {
        return table(omega, S).cwiseMax(0.0).cwiseMin(bound);
    }
};

inline constexpr double kBellmanRidge = 1e-10;

/// n * E(omega) = omega^T H omega + 2 b^T omega + c for the linear class, where
/// the inner minimum over f' is the ridge regression fit (unconstrained).
struct BellmanQuadratic {
    Eigen::MatrixXd H;
    Eigen::VectorXd b;
    double c = 0.0;
    double n = 1.0;
    /// Empirical feature Gram matrix singular beyond the ridge.
    bool rank_deficient = false;
    /// Ingredients kept for the direct path.
    Eigen::MatrixXd gram;
    Eigen::MatrixXd cross;  // X^T Z
    Eigen::VectorXd xr;     // X^T r
    RowMatrix Phi;          // inputs x d
    RowMatrix Psi;          // |S| x d, psi(s') = E_{p ~ pi^{1:m}(.|s')} phi(s', p)
    double gamma = 0.0;

    double error(const Eigen::VectorXd& w) const { return (w.dot(H * w) + 2.0 * b.dot(w) + c) / n; }
    Eigen::VectorXd gradient(const Eigen::VectorXd& w) const { return 2.0 * (H * w + b) / n; }

    /// Unconstrained inner minimizer of L(f', f_w).
    Eigen::VectorXd inner_argmin(const Eigen::VectorXd& w) const {
        const Eigen::MatrixXd G = gram + kBellmanRidge * Eigen::MatrixXd::Identity(gram.rows(), gram.cols());
        return G.ldlt().solve(xr + gamma * cross * w);
    }
};

inline BellmanQuadratic bellman_quadratic(const Game& g, const FactorizedPolicy& pi, const DatasetStats& st,
                                          const FeatureMap& fm) {
    BellmanQuadratic q;
    q.n = st.n;
    q.gamma = g.gamma;
    const Index d = fm.dim();
    q.Phi = fm.dense();
    const Index S = g.num_states;
    const Index P = g.actions.prefix_count(st.m);
    // Row s of `blocks` lays out phi(s, p) for every prefix p side by side.
    RowMatrix blocks(S, P * d);
    for (Index s = 0; s < S; ++s)
        for (Index p = 0; p < P; ++p) blocks.block(s, p * d, 1, d) = q.Phi.row(s * P + p);
    q.Psi = prefix_average(pi, st.m, blocks, d);

    const Eigen::VectorXd cx = st.count.rowwise().sum();
    const Eigen::VectorXd rx = st.sum_r.rowwise().sum();
    q.gram = q.Phi.transpose() * cx.asDiagonal() * q.Phi;
    q.cross = q.Phi.transpose() * st.count * q.Psi;
    q.xr = q.Phi.transpose() * rx;

    const Eigen::MatrixXd G = q.gram + kBellmanRidge * Eigen::MatrixXd::Identity(d, d);
    Eigen::LDLT<Eigen::MatrixXd> ldlt(G);
    const Eigen::MatrixXd Ginv = ldlt.solve(Eigen::MatrixXd::Identity(d, d));
    const Eigen::MatrixXd Nm = 2.0 * Ginv - Ginv * q.gram * Ginv;
    const Eigen::MatrixXd U = g.gamma * q.cross;
    // With y = r + gamma Z w and v = X^T y = u0 + U w:
    // n L(f_w, f_w) = w^T X^T X w - 2 w^T v + y^T y
    // n L(f*, f_w)  = y^T y - v^T N v
    // and the difference is the quadratic below.
    q.H = q.gram - U - U.transpose() + U.transpose() * Nm * U;
    q.H = 0.5 * (q.H + q.H.transpose());
    q.b = U.transpose() * Nm * q.xr - q.xr;
    q.c = q.xr.dot(Nm * q.xr);

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(q.gram);
    const double top = std::max(es.eigenvalues().maxCoeff(), 1.0);
    q.rank_deficient = es.eigenvalues().minCoeff() <= kBellmanRidge * top;
    return q;
}

struct BellmanErrorResult {
    double value = 0.0;
    double loss_ff = 0.0;
    double inner_min = 0.0;
    bool rank_deficient = false;
    /// The unconstrained inner fit left the L-ball (the class minimum may then be larger).
    bool inner_outside_ball = false;
};

/// E(f_w, pi) for the linear class by the direct path: L(f, f) minus the
/// loss of the ridge-regression inner fit.
inline BellmanErrorResult bellman_error_linear(const BellmanQuadratic& q, const DatasetStats& st,
                                               const Eigen::VectorXd& w, const LinearValueClass& cls) {
    BellmanErrorResult r;
    const Eigen::VectorXd f = q.Phi * w;
    const Eigen::VectorXd next = q.Psi * w;
    const Eigen::VectorXd wstar = q.inner_argmin(w);
    r.loss_ff = bellman_loss_from_stats(st, f, next, q.gamma);
    r.inner_min = bellman_loss_from_stats(st, q.Phi * wstar, next, q.gamma);
    r.value = r.loss_ff - r.inner_min;
    r.rank_deficient = q.rank_deficient;
    r.inner_outside_ball = wstar.norm() > cls.radius;
    return r;
}

/// E(f, pi) for a finite class: L(f, f) minus the best candidate's loss.
inline double bellman_error_finite(const RowMatrix& f, const std::vector<RowMatrix>& candidates,
                                   const FactorizedPolicy& pi, const DatasetStats& st, double gamma) {
    const Eigen::VectorXd next = next_values(pi, st.m, f);
    double best = bellman_loss_from_stats(st, flatten(f), next, gamma);
    const double own = best;
    for (const auto& c : candidates) best = std::min(best, bellman_loss_from_stats(st, flatten(c), next, gamma));
    return own - best;
}

// ---------------------------------------------------------------------------
// Pessimistic evaluation
// ---------------------------------------------------------------------------

struct TrustRegionResult {
    Eigen::VectorXd x;
    double objective = 0.0;
    bool boundary = false;
};

/// Global minimizer of 0.5 x^T A x + g^T x over ||x|| <= radius (A symmetric),
/// via eigendecomposition and bisection on the secular equation.
inline TrustRegionResult trust_region_solve(const Eigen::MatrixXd& A, const Eigen::VectorXd& g, double radius) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(A);
    const Eigen::VectorXd lam = es.eigenvalues();
    const Eigen::MatrixXd& V = es.eigenvectors();
    const Eigen::VectorXd gt = V.transpose() * g;
    const Index d = lam.size();
    const double scale = std::max({lam.cwiseAbs().maxCoeff(), g.norm(), 1e-300});
    const double zero_tol = 1e-12 * scale;

    auto x_of = [&](double mu) {
        Eigen::VectorXd y(d);
        for (Index i = 0; i < d; ++i) {
            const double den = lam[i] + mu;
            y[i] = std::abs(den) > 0.0 ? -gt[i] / den : 0.0;
        }
        return y;
    };
    auto finish = [&](const Eigen::VectorXd& y, bool boundary) {
        TrustRegionResult r;
        r.x = V * y;
        r.objective = 0.5 * r.x.dot(A * r.x) + g.dot(r.x);
        r.boundary = boundary;
        return r;
    };

    const double lmin = lam.minCoeff();
    if (lmin > zero_tol) {
        const Eigen::VectorXd y = x_of(0.0);
        if (y.norm() <= radius) return finish(y, false);
    } else if (lmin >= -zero_tol) {
        // PSD and singular: interior minimizers exist only if g has no
        // component along the null space.
        bool consistent = true;
        Eigen::VectorXd y = Eigen::VectorXd::Zero(d);
        for (Index i = 0; i < d; ++i) {
            if (lam[i] > zero_tol) y[i] = -gt[i] / lam[i];
            else if (std::abs(gt[i]) > zero_tol) consistent = false;
        }
        if (consistent && y.norm() <= radius) return finish(y, false);
    }

    // Boundary solution: mu > max(0, -lmin) with ||x(mu)|| = radius.
    const double lo0 = std::max(0.0, -lmin);
    double lo = lo0, hi = lo0 + g.norm() / radius + scale;
    // Hard case: even the limit mu -> lo0 stays inside the ball.
    double gap_norm2 = 0.0;
    bool hard = true;
    for (Index i = 0; i < d; ++i) {
        if (lam[i] + lo0 <= zero_tol) {
            if (std::abs(gt[i]) > zero_tol) hard = false;
        } else {
            gap_norm2 += std::pow(gt[i] / (lam[i] + lo0), 2);
        }
    }
    if (hard && std::sqrt(gap_norm2) <= radius) {
        Eigen::VectorXd y(d);
        for (Index i = 0; i < d; ++i) y[i] = lam[i] + lo0 <= zero_tol ? 0.0 : -gt[i] / (lam[i] + lo0);
        Index imin = 0;
        lam.minCoeff(&imin);
        y[imin] = std::sqrt(std::max(0.0, radius * radius - y.squaredNorm()));
        return finish(y, true);
    }
    while (x_of(hi).norm() > radius) hi *= 2.0;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (mid <= lo || mid >= hi) break;
        if (x_of(mid).norm() > radius) lo = mid;
        else hi = mid;
    }
    Eigen::VectorXd y = x_of(hi);
    const double n = y.norm();
    if (n > 0.0) y *= std::min(1.0, radius / n);
    return finish(y, true);
}

struct PessimisticEval {
    Eigen::VectorXd omega;
    /// f_k read out with clipping to [0, B].
    RowMatrix f;
    /// f(s0, pi^{1:m}) of the clipped readout.
    double f_s0 = 0.0;
    /// psi0^T omega + lambda E(omega), the minimized objective.
    double objective = 0.0;
    double bellman_err = 0.0;
    double clip_violation_mass = 0.0;
    bool converged = true;
    long iterations = 0;
    double grad_norm = 0.0;
    bool rank_deficient = false;
};

/// psi0 = E_{p ~ pi^{1:m}(.|s0)} phi(s0, p).
inline Eigen::VectorXd start_feature(const FactorizedPolicy& pi, int m, int s0, const FeatureMap& fm) {
    const Index P = pi.actions().prefix_count(m);
    const RowMatrix marg = pi.prefix_marginal(m);
    Eigen::VectorXd psi = Eigen::VectorXd::Zero(fm.dim());
    for (Index p = 0; p < P; ++p)
        if (marg(s0, p) != 0.0) fm.add_to(s0 * P + p, marg(s0, p), psi);
    return psi;
}

namespace detail {

inline void fill_readout(PessimisticEval& out, const LinearValueClass& cls, const FactorizedPolicy& pi, int m, int s0,
                         const TransitionDataset& data, const BellmanQuadratic& q, Index S) {
    const RowMatrix raw = cls.table(out.omega, S);
    out.f = raw.cwiseMax(0.0).cwiseMin(cls.bound);
    const RowMatrix marg = pi.prefix_marginal(m);
    out.f_s0 = marg.row(s0).dot(out.f.row(s0));
    out.bellman_err = q.error(out.omega);
    out.rank_deficient = q.rank_deficient;
    double outside = 0.0;
    for (const auto& t : data.records) {
        const double v = raw(t.s, t.prefix);
        if (v < 0.0 || v > cls.bound) outside += 1.0;
    }
    out.clip_violation_mass = data.records.empty() ? 0.0 : outside / static_cast<double>(data.size());
}

} // namespace detail

/// argmin over ||omega|| <= L of psi0^T omega + lambda E(omega), solved
/// exactly as a trust-region subproblem.
inline PessimisticEval pessimistic_eval(const Game& g, const FactorizedPolicy& pi, int m, const TransitionDataset& data,
                                        const LinearValueClass& cls, double lambda, int s0,
                                        const DatasetStats* stats = nullptr) {
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
    const DatasetStats st = stats ? *stats : DatasetStats::from(data, g);
    const BellmanQuadratic q = bellman_quadratic(g, pi, st, cls.features);
    const Eigen::VectorXd psi0 = start_feature(pi, m, s0, cls.features);
    const Eigen::MatrixXd A = (2.0 * lambda / q.n) * q.H;
    const Eigen::VectorXd lin = psi0 + (2.0 * lambda / q.n) * q.b;
    const auto tr = trust_region_solve(A, lin, cls.radius);
    PessimisticEval out;
    out.omega = tr.x;
    out.objective = psi0.dot(tr.x) + lambda * q.error(tr.x);
    const Eigen::VectorXd grad = A * tr.x + lin;
    // Projected-gradient stationarity measure.
    const Eigen::VectorXd step = project_theta(tr.x - grad, cls.radius) - tr.x;
    out.grad_norm = step.norm();
    detail::fill_readout(out, cls, pi, m, s0, data, q, g.num_states);
    return out;
}

/// Projected gradient descent on the same objective with step 1/Lip
/// (Lip from power iteration). Kept as a cross-check of the exact solver.
inline PessimisticEval pessimistic_eval_pgd(const Game& g, const FactorizedPolicy& pi, int m,
                                            const TransitionDataset& data, const LinearValueClass& cls, double lambda,
                                            int s0, double tol = 1e-8, long max_steps = 10'000) {
    const DatasetStats st = DatasetStats::from(data, g);
    const BellmanQuadratic q = bellman_quadratic(g, pi, st, cls.features);
    const Eigen::VectorXd psi0 = start_feature(pi, m, s0, cls.features);
    const Eigen::MatrixXd A = (2.0 * lambda / q.n) * q.H;
    const Eigen::VectorXd lin = psi0 + (2.0 * lambda / q.n) * q.b;

    Eigen::VectorXd v = Eigen::VectorXd::Ones(A.rows()) / std::sqrt(static_cast<double>(A.rows()));
    double lip = 0.0;
    for (int it = 0; it < 200; ++it) {
        Eigen::VectorXd w = A * v;
        const double n = w.norm();
        if (n == 0.0) break;
        lip = n;
        v = w / n;
    }
    const double step = 1.0 / std::max(lip * 1.01, 1e-12);
    Eigen::VectorXd w = Eigen::VectorXd::Zero(A.rows());
    PessimisticEval out;
    out.converged = false;
    for (long t = 0; t < max_steps; ++t) {
        const Eigen::VectorXd grad = A * w + lin;
        const Eigen::VectorXd next = project_theta(w - step * grad, cls.radius);
        const double move = (next - w).norm();
        w = next;
        out.iterations = t + 1;
        if (move <= tol * step) {
            out.converged = true;
            break;
        }
    }
    out.omega = w;
    out.objective = psi0.dot(w) + lambda * q.error(w);
    out.grad_norm = ((project_theta(w - (A * w + lin), cls.radius)) - w).norm();
    detail::fill_readout(out, cls, pi, m, s0, data, q, g.num_states);
    return out;
}

struct FiniteEval {
    std::size_t index = 0;
    double objective = 0.0;
    double f_s0 = 0.0;
    double bellman_err = 0.0;
};

/// argmin over candidate tables of f(s0, pi^{1:m}) + lambda E(f, pi).
inline FiniteEval pessimistic_eval_finite(const Game& g, const FactorizedPolicy& pi, int m,
                                          const std::vector<RowMatrix>& candidates, const DatasetStats& st,
                                          double lambda, int s0) {
    if (candidates.empty()) throw ConfigError("finite class is empty");
    const RowMatrix marg = pi.prefix_marginal(m);
    FiniteEval best;
    best.objective = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const double fs0 = marg.row(s0).dot(candidates[i].row(s0));
        const double err = bellman_error_finite(candidates[i], candidates, pi, st, g.gamma);
        const double obj = fs0 + lambda * err;
        if (obj < best.objective) best = {i, obj, fs0, err};
    }
    return best;
}

/// theta + eta * omega: the mirror step pi ~ pi * exp(eta f) under shared features.
inline Eigen::VectorXd improve_linear(const Eigen::VectorXd& theta, const Eigen::VectorXd& omega, double eta) {
    return theta + eta * omega;
}

// ---------------------------------------------------------------------------
// Finite-class diagnostics and concentrability
// ---------------------------------------------------------------------------

struct FiniteClassDiagnostics {
    double zeta = 0.0;
    double zeta_prime = 0.0;
};

/// Realizability defect: max over policies of min over candidates of the
/// worst admissible-distribution residual ||f - T f||^2. With the default
/// point-mass admissible set this is the squared sup-norm residual.
/// Completeness defect: max over policies and f of min over f' of
/// ||f' - T f||^2 weighted by mu over (s, a^{1:m}).
inline FiniteClassDiagnostics finite_class_diagnostics(const Game& g, int m, const std::vector<RowMatrix>& candidates,
                                                       const std::vector<FactorizedPolicy>& policies,
                                                       const DataDistribution& mu,
                                                       const std::vector<RowMatrix>& admissible = {}) {
    if (candidates.empty()) throw ConfigError("finite class is empty");
    const Index P = g.actions.prefix_count(m);
    // mu over (s, a^{1:m}): mu_s times the prefix marginal of mu_a.
    RowMatrix mu_w = RowMatrix::Zero(g.num_states, P);
    for (Index j = 0; j < g.num_joint(); ++j)
        for (Index s = 0; s < g.num_states; ++s) mu_w(s, g.actions.truncate(j, m)) += mu.state[s] * mu.joint[j];

    FiniteClassDiagnostics out;
    for (const auto& pi : policies) {
        double best_real = std::numeric_limits<double>::infinity();
        double worst_complete = 0.0;
        for (const auto& f : candidates) {
            const RowMatrix tf = bellman_apply(g, pi, m, f);
            const RowMatrix resid2 = (f - tf).array().square().matrix();
            double sup = resid2.maxCoeff();
            if (!admissible.empty()) {
                sup = 0.0;
                for (const auto& nu : admissible) sup = std::max(sup, nu.cwiseProduct(resid2).sum());
            }
            best_real = std::min(best_real, sup);
            double inner = std::numeric_limits<double>::infinity();
            for (const auto& fp : candidates)
                inner = std::min(inner, mu_w.cwiseProduct((fp - tf).array().square().matrix()).sum());
            worst_complete = std::max(worst_complete, inner);
        }
        out.zeta = std::max(out.zeta, best_real);
        out.zeta_prime = std::max(out.zeta_prime, worst_complete);
    }
    return out;
}

struct ConcentrabilityCandidate {
    int m = 1;
    RowMatrix f;
    FactorizedPolicy pi;
    const TransitionDataset* data = nullptr;
};

struct ConcentrabilityResult {
    /// Candidate-restricted lower bound on the supremum; +inf when some
    /// candidate has residual under d_{pi*} but none on the data.
    double value = 0.0;
    int evaluated = 0;
    int skipped_zero_residual = 0;
    bool infinite = false;
};

inline ConcentrabilityResult concentrability_C(const Game& g, const FactorizedPolicy& pi_star,
                                               const std::vector<ConcentrabilityCandidate>& candidates) {
    const auto occ = discounted_occupancy(g, pi_star);
    ConcentrabilityResult out;
    for (const auto& c : candidates) {
        if (!c.data) throw ConfigError("concentrability candidate lacks a dataset");
        const RowMatrix resid2 = (c.f - bellman_apply(g, c.pi, c.m, c.f)).array().square().matrix();
        // d_{pi*} over (s, a^{1:m}).
        double num = 0.0;
        for (Index s = 0; s < g.num_states; ++s)
            for (Index j = 0; j < g.num_joint(); ++j) num += occ.state_action(s, j) * resid2(s, g.actions.truncate(j, c.m));
        double den = 0.0;
        for (const auto& t : c.data->records) den += resid2(t.s, t.prefix);
        if (!c.data->records.empty()) den /= static_cast<double>(c.data->size());
        if (num <= 0.0 && den <= 0.0) {
            ++out.skipped_zero_residual;
            continue;
        }
        ++out.evaluated;
        if (den <= 0.0) {
            out.infinite = true;
            out.value = std::numeric_limits<double>::infinity();
            continue;
        }
        out.value = std::max(out.value, std::sqrt(num / den));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pessimistic training loop
// ---------------------------------------------------------------------------

/// eta = (1 - gamma) sqrt(log|A| / (2K)).
inline double default_pessimistic_step(double gamma, int num_actions, int K) {
    return (1.0 - gamma) * std::sqrt(std::log(static_cast<double>(num_actions)) / (2.0 * K));
}

/// lambda = (1 - gamma)^{-1} (d log(n L R / delta) / n)^{-2/3}.
inline double default_pessimism_weight(double gamma, Index d, Index n, double L, double R, double delta) {
    const double inner = static_cast<double>(d) * std::log(static_cast<double>(n) * L * R / delta) / static_cast<double>(n);
    if (!(inner > 0.0)) throw ConfigError("default lambda undefined for these (d, n, L, R, delta)");
    return std::pow(inner, -2.0 / 3.0) / (1.0 - gamma);
}

struct PessimisticConfig {
    int iterations = 100;
    Index n = 1000;
    std::optional<double> lambda;
    std::optional<double> eta;
    double delta = 0.1;
    int s0 = 0;
    std::uint64_t seed = 0;
    FeatureSpec features;
    /// Value-class radius L; empty means sqrt(d) / (1 - gamma), which
    /// contains every Q table under one-hot features.
    std::optional<double> value_radius;
    /// Policy radius R, used only in the lambda default.
    double policy_radius = kDefaultRadius;
    std::optional<DataDistribution> mu;
    bool reuse_dataset = false;
    UpdateScheme scheme = UpdateScheme::IterationStart;
    bool record_wall_time = false;
    /// Finite-class variant: candidate tables for prefix length m given the
    /// evaluation policy. Requires one-hot features.
    std::function<std::vector<RowMatrix>(int, const FactorizedPolicy&)> finite_candidates;
};

struct PessimisticResult {
    LogLinearPolicy output;
    LogLinearPolicy last;
    RunTrace trace;
    std::vector<double> lambdas;
    std::vector<double> etas;
};

inline PessimisticResult train_pessimistic(const Game& g, const PessimisticConfig& cfg) {
    if (cfg.iterations < 1) throw ConfigError("iterations must be >= 1");
    if (cfg.n < 1) throw ConfigError("n must be >= 1");
    const int N = g.num_agents();
    const int K = cfg.iterations;
    const DataDistribution mu = cfg.mu.value_or(DataDistribution::uniform(g));
    mu.validate(g);
    if (cfg.finite_candidates && cfg.features.kind != FeatureKind::OneHot)
        throw ConfigError("the finite-class variant needs one-hot features");

    const auto start = std::chrono::steady_clock::now();
    Rng output_rng = make_rng(derive_seed(cfg.seed, 1));
    const OptimalPolicy opt = optimal_joint_policy(g, ObjectiveMode::InitialState, cfg.s0);
    LogLinearPolicy pi(g, cfg.features, {cfg.policy_radius});
    std::vector<LogLinearPolicy> iterates{pi};

    PessimisticResult res;
    auto& trace = res.trace;
    trace.J_star = opt.J;
    trace.objective = ObjectiveMode::InitialState;
    trace.seed = cfg.seed;

    std::vector<LinearValueClass> classes;
    for (int i = 0; i < N; ++i) {
        LinearValueClass c;
        c.features = pi.agent(i).features;
        c.bound = g.value_bound();
        c.radius = cfg.value_radius.value_or(std::sqrt(static_cast<double>(c.features.dim())) * g.value_bound());
        if (!(c.radius > 0.0)) throw ConfigError("value radius must be positive");
        if (cfg.n < c.features.dim()) throw ConfigError("n must be at least the feature dimension");
        classes.push_back(std::move(c));
        const double lam = cfg.lambda.value_or(
            default_pessimism_weight(g.gamma, classes.back().features.dim(), cfg.n, classes.back().radius, cfg.policy_radius, cfg.delta));
        const double eta = cfg.eta.value_or(default_pessimistic_step(g.gamma, g.actions.num_actions(i), K));
        if (!(lam >= 0.0) || !(eta > 0.0)) throw ConfigError("lambda must be >= 0 and eta > 0");
        res.lambdas.push_back(lam);
        res.etas.push_back(eta);
    }

    auto record_iterate = [&](const FactorizedPolicy& fp) {
        const double J = opt.objective.evaluate(g, fp);
        trace.iterate_J.push_back(J);
        trace.iterate_gap.push_back(opt.J - J);
    };
    record_iterate(pi.to_factorized());

    std::vector<std::optional<TransitionDataset>> reused(N);
    for (int k = 0; k < K; ++k) {
        FactorizedPolicy eval_policy = pi.to_factorized();
        for (int i = 0; i < N; ++i) {
            const int m = i + 1;
            if (cfg.scheme == UpdateScheme::Refresh && i > 0) eval_policy = pi.to_factorized();
            const std::uint64_t data_seed = derive_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(k) * N + i);
            TransitionDataset fresh;
            const TransitionDataset* data = nullptr;
            if (cfg.reuse_dataset) {
                if (!reused[i]) reused[i] = build_dataset(g, eval_policy, m, mu, cfg.n, data_seed, "reused");
                data = &*reused[i];
            } else {
                fresh = build_dataset(g, eval_policy, m, mu, cfg.n, data_seed, "fresh");
                data = &fresh;
            }
            const DatasetStats st = DatasetStats::from(*data, g);

            TraceRow row;
            row.iter = k;
            row.agent = i;
            row.lambda = res.lambdas[i];
            row.eta = res.etas[i];
            row.beta_k = 1.0 / res.etas[i];

            Eigen::VectorXd omega;
            RowMatrix f_used;
            if (cfg.finite_candidates) {
                const auto cands = cfg.finite_candidates(m, eval_policy);
                const auto fe = pessimistic_eval_finite(g, eval_policy, m, cands, st, row.lambda, cfg.s0);
                f_used = cands[fe.index];
                omega = flatten(f_used);
                row.solver_loss = fe.objective;
                row.bellman_err = fe.bellman_err;
                row.f_s0 = fe.f_s0;
            } else {
                const auto pe = pessimistic_eval(g, eval_policy, m, *data, classes[i], row.lambda, cfg.s0, &st);
                omega = pe.omega;
                f_used = pe.f;
                row.solver_loss = pe.objective;
                row.bellman_err = pe.bellman_err;
                row.f_s0 = pe.f_s0;
                row.clip_violation_mass = pe.clip_violation_mass;
            }
            // Evaluation error of the pessimistic estimate at s0.
            const RowMatrix q_exact = multi_agent_q(g, eval_policy, m).values;
            row.xi = std::abs(row.f_s0 - eval_policy.prefix_marginal(m).row(cfg.s0).dot(q_exact.row(cfg.s0)));

            auto& ap = pi.agent(i);
            ap.theta = improve_linear(ap.theta, omega, row.eta);

            const FactorizedPolicy current = pi.to_factorized();
            row.J = opt.objective.evaluate(g, current);
            row.gap = opt.J - row.J;
            if (cfg.record_wall_time) row.wall_ms = detail::elapsed_ms(start);
            trace.rows.push_back(row);
        }
        iterates.push_back(pi);
        record_iterate(pi.to_factorized());
    }

    trace.output_iter = static_cast<int>(uniform_index(output_rng, static_cast<std::uint64_t>(K)));
    trace.best_iter = static_cast<int>(std::min_element(trace.iterate_gap.begin(), trace.iterate_gap.end()) -
                                       trace.iterate_gap.begin());
    res.output = iterates[trace.output_iter];
    res.last = pi;
    return res;
}

} // namespace marl
