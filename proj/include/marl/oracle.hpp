#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "marl/error.hpp"
#include "marl/game.hpp"
#include "marl/indexing.hpp"
#include "marl/policy.hpp"

namespace marl {

/// r_pi(s) and P_pi(s, s') of the chain induced by a joint policy.
struct InducedChain {
    Eigen::VectorXd reward;
    Eigen::MatrixXd transition;
};

inline InducedChain induced_chain(const Game& g, const FactorizedPolicy& pi) {
    const Index S = g.num_states, J = g.num_joint();
    const RowMatrix joint = pi.joint();
    InducedChain c{Eigen::VectorXd::Zero(S), Eigen::MatrixXd::Zero(S, S)};
    for (Index s = 0; s < S; ++s) {
        for (Index a = 0; a < J; ++a) {
            const double w = joint(s, a);
            if (w == 0.0) continue;
            c.reward[s] += w * g.reward(s, a);
            c.transition.row(s).noalias() += w * g.transition.row(s * J + a);
        }
    }
    return c;
}

/// V_pi by a direct LU solve of (I - gamma P_pi) V = r_pi.
inline Eigen::VectorXd policy_value(const Game& g, const FactorizedPolicy& pi) {
    const auto c = induced_chain(g, pi);
    const Index S = g.num_states;
    Eigen::MatrixXd A = Eigen::MatrixXd::Identity(S, S) - g.gamma * c.transition;
    return A.partialPivLu().solve(c.reward);
}

/// Fixed-point iteration V <- r_pi + gamma P_pi V. Cross-check only.
inline Eigen::VectorXd policy_value_iterative(const Game& g, const FactorizedPolicy& pi, double tol = 1e-13,
                                              long max_iter = 1'000'000) {
    const auto c = induced_chain(g, pi);
    Eigen::VectorXd v = Eigen::VectorXd::Zero(g.num_states);
    for (long it = 0; it < max_iter; ++it) {
        Eigen::VectorXd next = c.reward + g.gamma * c.transition * v;
        const double diff = (next - v).lpNorm<Eigen::Infinity>();
        v = std::move(next);
        if (diff <= tol) break;
    }
    return v;
}

/// Joint Q(s, a) = r(s, a) + gamma sum_s' P(s'|s, a) V(s').
inline RowMatrix joint_q(const Game& g, const Eigen::VectorXd& v) {
    const Index S = g.num_states, J = g.num_joint();
    RowMatrix q(S, J);
    for (Index s = 0; s < S; ++s)
        for (Index a = 0; a < J; ++a) q(s, a) = g.reward(s, a) + g.gamma * g.transition.row(s * J + a).dot(v);
    return q;
}

/// Q^{1:m}_pi over (s, a^{1:m}); `values` is |S| x prefix_count(m).
/// m = 0 holds V_pi in a single column.
struct MultiAgentQ {
    int m = 0;
    RowMatrix values;
    double bound = 0.0;
};

/// Q^{1:m} for every m = 0..N, obtained from the joint Q by marginalizing
/// one trailing agent at a time under its conditional policy.
inline std::vector<MultiAgentQ> all_multi_agent_q(const Game& g, const FactorizedPolicy& pi) {
    const int N = g.num_agents();
    const Index S = g.num_states;
    std::vector<MultiAgentQ> out(N + 1);
    out[N] = {N, joint_q(g, policy_value(g, pi)), g.value_bound()};
    for (int i = N - 1; i >= 0; --i) {
        const Index P = g.actions.prefix_count(i);
        const int A = g.actions.num_actions(i);
        const auto& next = out[i + 1].values;
        RowMatrix cur = RowMatrix::Zero(S, P);
        for (Index s = 0; s < S; ++s)
            for (Index p = 0; p < P; ++p) {
                const auto cond = pi.conditional(i, static_cast<int>(s), p);
                double acc = 0.0;
                for (int a = 0; a < A; ++a) acc += cond[a] * next(s, p * A + a);
                cur(s, p) = acc;
            }
        out[i] = {i, std::move(cur), g.value_bound()};
    }
    return out;
}

inline MultiAgentQ multi_agent_q(const Game& g, const FactorizedPolicy& pi, int m) {
    if (m < 0 || m > g.num_agents()) throw ConfigError("prefix length out of range");
    return std::move(all_multi_agent_q(g, pi)[m]);
}

/// A^m(s, a^{1:m-1}, a^m) = Q^{1:m}(s, a^{1:m}) - Q^{1:m-1}(s, a^{1:m-1}),
/// tabulated over (s, a^{1:m}). Agents are 1-based here, as in the
/// definition: m ranges over 1..N.
inline RowMatrix advantage_table(const std::vector<MultiAgentQ>& qs, const ActionIndexer& acts, int m) {
    const auto& hi = qs.at(m).values;
    const auto& lo = qs.at(m - 1).values;
    const int A = acts.num_actions(m - 1);
    RowMatrix adv(hi.rows(), hi.cols());
    for (Index s = 0; s < hi.rows(); ++s)
        for (Index p = 0; p < hi.cols(); ++p) adv(s, p) = hi(s, p) - lo(s, p / A);
    return adv;
}

inline double multi_agent_advantage(const Game& g, const FactorizedPolicy& pi, int m, int s, Index prefix, int action) {
    if (m < 1 || m > g.num_agents()) throw ConfigError("advantage agent index must lie in 1..N");
    const auto qs = all_multi_agent_q(g, pi);
    const Index full = g.actions.extend(prefix, m - 1, action);
    return qs[m].values(s, full) - qs[m - 1].values(s, prefix);
}

/// Distribution of the completion a^{m+1:N} given (s, a^{1:m}) under pi.
inline Eigen::VectorXd completion_probs(const FactorizedPolicy& pi, int s, int m, Index prefix) {
    const auto& acts = pi.actions();
    // Expand one agent at a time; entry c of `w` is the completion with
    // complement index c, matching ActionIndexer::combine.
    Eigen::VectorXd w = Eigen::VectorXd::Ones(1);
    for (int i = m; i < acts.num_agents(); ++i) {
        const int A = acts.num_actions(i);
        const Index shift = acts.suffix_count(m) / acts.suffix_count(i);
        Eigen::VectorXd next(w.size() * A);
        for (Index c = 0; c < w.size(); ++c) {
            const Index cur = prefix * shift + c;
            const auto cond = pi.conditional(i, s, cur);
            for (int a = 0; a < A; ++a) next[c * A + a] = w[c] * cond[a];
        }
        w = std::move(next);
    }
    return w;
}

/// f(s', pi^{1:m}) for every s': expectation of f under the prefix chain.
inline Eigen::VectorXd prefix_expectation(const FactorizedPolicy& pi, int m, const RowMatrix& f) {
    const RowMatrix marg = pi.prefix_marginal(m);
    return marg.cwiseProduct(f).rowwise().sum();
}

/// Multi-agent Bellman operator T^{1:m}_pi applied to f over (s, a^{1:m}).
inline RowMatrix bellman_apply(const Game& g, const FactorizedPolicy& pi, int m, const RowMatrix& f) {
    const Index S = g.num_states, J = g.num_joint();
    const Index P = g.actions.prefix_count(m);
    if (f.rows() != S || f.cols() != P) throw ConfigError("bellman_apply: table shape mismatch");
    const Eigen::VectorXd next_value = prefix_expectation(pi, m, f);
    RowMatrix out(S, P);
    for (Index s = 0; s < S; ++s)
        for (Index p = 0; p < P; ++p) {
            const Eigen::VectorXd w = completion_probs(pi, static_cast<int>(s), m, p);
            double acc = 0.0;
            for (Index c = 0; c < w.size(); ++c) {
                if (w[c] == 0.0) continue;
                const Index j = g.actions.combine(p, m, c);
                acc += w[c] * (g.reward(s, j) + g.gamma * g.transition.row(s * J + j).dot(next_value));
            }
            out(s, p) = acc;
        }
    return out;
}

// ---------------------------------------------------------------------------
// Occupancy measures
// ---------------------------------------------------------------------------

enum class OccupancyKind { Stationary, Discounted };

struct OccupancyMeasure {
    OccupancyKind kind = OccupancyKind::Stationary;
    Eigen::VectorXd state;
    /// state(s) * pi(a|s) over joint actions.
    RowMatrix state_action;
    long iterations = 0;
};

inline constexpr double kStationaryTol = 1e-12;
inline constexpr long kStationaryMaxIter = 1'000'000;

/// Number of closed communicating classes of the support graph of P.
inline int closed_class_count(const Eigen::MatrixXd& P) {
    const Index S = P.rows();
    // reach(i, j): j reachable from i.
    std::vector<std::vector<char>> reach(S, std::vector<char>(S, 0));
    for (Index i = 0; i < S; ++i) {
        reach[i][i] = 1;
        std::vector<Index> stack{i};
        while (!stack.empty()) {
            const Index u = stack.back();
            stack.pop_back();
            for (Index v = 0; v < S; ++v)
                if (P(u, v) > 0.0 && !reach[i][v]) {
                    reach[i][v] = 1;
                    stack.push_back(v);
                }
        }
    }
    // A state is recurrent iff everything it reaches reaches it back; each
    // closed class is counted once via its smallest member.
    int classes = 0;
    for (Index i = 0; i < S; ++i) {
        bool closed = true, smallest = true;
        for (Index j = 0; j < S && closed; ++j)
            if (reach[i][j] && !reach[j][i]) closed = false;
        if (!closed) continue;
        for (Index j = 0; j < i; ++j)
            if (reach[i][j]) smallest = false;
        if (smallest) ++classes;
    }
    return classes;
}

inline OccupancyMeasure with_actions(OccupancyMeasure occ, const FactorizedPolicy& pi) {
    const RowMatrix joint = pi.joint();
    occ.state_action = joint;
    for (Index s = 0; s < joint.rows(); ++s) occ.state_action.row(s) *= occ.state[s];
    return occ;
}

/// Stationary law nu_pi by power iteration from the uniform distribution.
/// Throws ErgodicityError if the chain has several closed classes or the
/// iteration does not settle (for example a periodic chain).
inline OccupancyMeasure stationary_distribution(const Game& g, const FactorizedPolicy& pi,
                                                double tol = kStationaryTol, long max_iter = kStationaryMaxIter) {
    const auto c = induced_chain(g, pi);
    if (const int k = closed_class_count(c.transition); k != 1)
        throw ErgodicityError("induced chain has " + std::to_string(k) + " closed classes");
    const Index S = g.num_states;
    Eigen::RowVectorXd nu = Eigen::RowVectorXd::Constant(S, 1.0 / static_cast<double>(S));
    long it = 0;
    for (; it < max_iter; ++it) {
        Eigen::RowVectorXd next = nu * c.transition;
        next /= next.sum();
        const double diff = (next - nu).lpNorm<1>();
        nu = std::move(next);
        if (diff <= tol) break;
    }
    if (it == max_iter)
        throw ErgodicityError("power iteration did not converge in " + std::to_string(max_iter) + " steps");
    OccupancyMeasure occ;
    occ.kind = OccupancyKind::Stationary;
    occ.state = nu.transpose();
    occ.iterations = it + 1;
    return with_actions(std::move(occ), pi);
}

/// d_pi = (1 - gamma) rho^T (I - gamma P_pi)^{-1}, composed with pi.
inline OccupancyMeasure discounted_occupancy(const Game& g, const FactorizedPolicy& pi) {
    const auto c = induced_chain(g, pi);
    const Index S = g.num_states;
    Eigen::MatrixXd A = Eigen::MatrixXd::Identity(S, S) - g.gamma * c.transition.transpose();
    OccupancyMeasure occ;
    occ.kind = OccupancyKind::Discounted;
    occ.state = (1.0 - g.gamma) * A.partialPivLu().solve(g.initial_dist);
    return with_actions(std::move(occ), pi);
}

// ---------------------------------------------------------------------------
// Objectives and the joint optimum
// ---------------------------------------------------------------------------

/// J(pi) = w^T V_pi for a fixed state weighting w: either the stationary
/// law of the reference optimum, or a point mass on the initial state.
enum class ObjectiveMode { StationaryOptimal, InitialState };

inline std::string to_string(ObjectiveMode m) {
    return m == ObjectiveMode::StationaryOptimal ? "stationary_optimal" : "initial_state";
}

inline ObjectiveMode objective_mode_from_string(const std::string& s) {
    if (s == "stationary_optimal") return ObjectiveMode::StationaryOptimal;
    if (s == "initial_state") return ObjectiveMode::InitialState;
    throw ConfigError("unknown objective mode '" + s + "'");
}

struct Objective {
    ObjectiveMode mode = ObjectiveMode::StationaryOptimal;
    int s0 = 0;
    Eigen::VectorXd weights;

    double operator()(const Eigen::VectorXd& v) const { return weights.dot(v); }
    double evaluate(const Game& g, const FactorizedPolicy& pi) const { return weights.dot(policy_value(g, pi)); }
};

struct OptimalPolicy {
    FactorizedPolicy policy;
    std::vector<Index> joint_actions;
    Eigen::VectorXd value;
    Objective objective;
    double J = 0.0;
    long iterations = 0;
};

inline constexpr double kValueIterationTol = 1e-10;

inline Objective make_objective(const Game& g, const FactorizedPolicy& reference, ObjectiveMode mode, int s0 = 0) {
    Objective obj;
    obj.mode = mode;
    obj.s0 = s0;
    if (mode == ObjectiveMode::InitialState) {
        if (s0 < 0 || s0 >= g.num_states) throw ConfigError("initial state out of range");
        obj.weights = Eigen::VectorXd::Unit(g.num_states, s0);
    } else {
        obj.weights = stationary_distribution(g, reference).state;
    }
    return obj;
}

/// Value iteration over joint actions, greedy extraction (lowest index on
/// ties), and exact re-evaluation of the greedy policy.
inline OptimalPolicy optimal_joint_policy(const Game& g, ObjectiveMode mode = ObjectiveMode::StationaryOptimal,
                                          int s0 = 0, double tol = kValueIterationTol) {
    const Index S = g.num_states;
    Eigen::VectorXd v = Eigen::VectorXd::Zero(S);
    long it = 0;
    // Stop when the sup-norm change bounds the distance to V* by tol.
    const double stop = g.gamma > 0.0 ? tol * (1.0 - g.gamma) / g.gamma : 0.0;
    while (true) {
        ++it;
        const RowMatrix q = joint_q(g, v);
        Eigen::VectorXd next = q.rowwise().maxCoeff();
        const double diff = (next - v).lpNorm<Eigen::Infinity>();
        v = std::move(next);
        if (diff <= stop || it > 100'000'000) break;
    }
    const RowMatrix q = joint_q(g, v);
    OptimalPolicy out;
    out.joint_actions.resize(S);
    for (Index s = 0; s < S; ++s) {
        Index best = 0;
        for (Index a = 1; a < q.cols(); ++a)
            if (q(s, a) > q(s, best)) best = a;
        out.joint_actions[s] = best;
    }
    out.policy = FactorizedPolicy::deterministic(g, out.joint_actions);
    out.value = policy_value(g, out.policy);
    out.objective = make_objective(g, out.policy, mode, s0);
    out.J = out.objective(out.value);
    out.iterations = it;
    return out;
}

// ---------------------------------------------------------------------------
// Identity checks and diagnostics
// ---------------------------------------------------------------------------

struct PerfDiff {
    double lhs = 0.0;
    double rhs = 0.0;
    double residual = 0.0;
};

/// Both sides of the sequential performance-difference identity with
/// J = E_{nu_ref} V and nu_ref the stationary law of `reference`.
inline PerfDiff perf_diff_check(const Game& g, const FactorizedPolicy& reference, const FactorizedPolicy& pi) {
    const Eigen::VectorXd nu = stationary_distribution(g, reference).state;
    const Eigen::VectorXd v_ref = policy_value(g, reference);
    const auto qs = all_multi_agent_q(g, pi);
    PerfDiff out;
    out.lhs = nu.dot(v_ref - qs[0].values.col(0));

    double total = 0.0;
    for (int m = 1; m <= g.num_agents(); ++m) {
        const int i = m - 1;
        const RowMatrix marg = reference.prefix_marginal(i);
        const int A = g.actions.num_actions(i);
        for (Index s = 0; s < g.num_states; ++s) {
            for (Index p = 0; p < marg.cols(); ++p) {
                const double w = nu[s] * marg(s, p);
                if (w == 0.0) continue;
                double inner = 0.0;
                for (int a = 0; a < A; ++a)
                    inner += qs[m].values(s, p * A + a) *
                             (reference.prob(i, static_cast<int>(s), p, a) - pi.prob(i, static_cast<int>(s), p, a));
                total += w * inner;
            }
        }
    }
    out.rhs = total / (1.0 - g.gamma);
    out.residual = std::abs(out.lhs - out.rhs);
    return out;
}

/// Density-ratio concentrability between (nu_ref, pi_ref^{1:m}) and
/// (nu_k, pi_k^{1:m}), as an L2 norm under the latter. m = 0 uses states only.
inline double concentrability_phi(const Game& g, const FactorizedPolicy& reference, const FactorizedPolicy& pi_k,
                                  int m) {
    if (m < 0 || m > g.num_agents()) throw ConfigError("prefix length out of range");
    const Eigen::VectorXd nu_ref = stationary_distribution(g, reference).state;
    const Eigen::VectorXd nu_k = stationary_distribution(g, pi_k).state;
    const RowMatrix m_ref = reference.prefix_marginal(m);
    const RowMatrix m_k = pi_k.prefix_marginal(m);
    double acc = 0.0;
    for (Index s = 0; s < g.num_states; ++s)
        for (Index p = 0; p < m_ref.cols(); ++p) {
            const double num = nu_ref[s] * m_ref(s, p);
            const double den = nu_k[s] * m_k(s, p);
            if (num == 0.0) continue;
            if (den == 0.0) throw Error("concentrability: sampling distribution has a zero atom under positive target mass");
            acc += num * num / den;
        }
    return std::sqrt(acc);
}

/// Per-(iteration, agent) error terms of the convergence bound.
struct DiagnosticsEntry {
    int iter = 0;
    int agent = 0;
    double eps = 0.0;
    double xi = 0.0;
    double phi = 0.0;
    double phi_prev = 0.0;
    double Delta = 0.0;
    double delta = 0.0;
    double G = 0.0;
};

struct DiagnosticsReport {
    std::vector<DiagnosticsEntry> entries;

    void add(DiagnosticsEntry e, double beta_k) {
        e.Delta = std::sqrt(2.0) * (e.phi + e.phi_prev) * (e.eps + e.xi / beta_k);
        e.delta = 2.0 * e.phi_prev * e.eps;
        entries.push_back(e);
    }

    double error_sum() const {
        double s = 0.0;
        for (const auto& e : entries) s += e.Delta + e.delta;
        return s;
    }
};

} // namespace marl
