#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "marl/error.hpp"
#include "marl/game.hpp"
#include "marl/oracle.hpp"
#include "marl/policy.hpp"
#include "marl/rng.hpp"
#include "marl/stats.hpp"

namespace marl {

enum class EstimatorKind { Exact, MonteCarlo };
/// The textbook projected SGD starts its iterate at zero; Warm starts at theta_k instead.
enum class SgdInit { Warm, Zero };
/// Sgd runs averaged projected SGD on sampled points. Population solves the expected
/// MSE under sigma_k exactly (normal equations) and projects onto the ball.
enum class SolverKind { Sgd, Population };
/// IterationStart evaluates every agent against pi_{theta_k}. Refresh
/// re-evaluates after each agent update (an ablation).
enum class UpdateScheme { IterationStart, Refresh };
enum class SamplerKind { ExactStationary, Simulated };

/// One draw (s, a^{1:m-1}, a^m) from sigma_k. `input` is the feature input
/// index of the triple for the agent's feature map.
struct SigmaSample {
    int s = 0;
    Index prefix = 0;
    int action = 0;
    Index input = 0;
};

/// Draws `count` i.i.d. triples for agent `agent` (0-based): s from the
/// supplied state law, then a^1..a^{agent+1} sequentially from the conditionals.
inline std::vector<SigmaSample> sample_sigma_from(const FactorizedPolicy& pi, const Eigen::VectorXd& nu, int agent,
                                                  Index count, Rng& rng) {
    const auto& acts = pi.actions();
    std::vector<SigmaSample> out;
    out.reserve(static_cast<std::size_t>(count));
    for (Index t = 0; t < count; ++t) {
        SigmaSample x;
        x.s = static_cast<int>(sample_categorical(rng, nu));
        for (int i = 0; i < agent; ++i)
            x.prefix = acts.extend(x.prefix, i, static_cast<int>(sample_categorical(rng, pi.conditional(i, x.s, x.prefix))));
        x.action = static_cast<int>(sample_categorical(rng, pi.conditional(agent, x.s, x.prefix)));
        x.input = (static_cast<Index>(x.s) * acts.prefix_count(agent) + x.prefix) * acts.num_actions(agent) + x.action;
        out.push_back(x);
    }
    return out;
}

/// Smallest t with max_s TV(P^t(s, .), nu) <= 1/4, capped at `cap`.
inline long mixing_time_estimate(const Eigen::MatrixXd& P, const Eigen::VectorXd& nu, long cap = 100'000) {
    Eigen::MatrixXd Pt = P;
    for (long t = 1; t <= cap; ++t) {
        double worst = 0.0;
        for (Index s = 0; s < P.rows(); ++s) worst = std::max(worst, 0.5 * (Pt.row(s).transpose() - nu).lpNorm<1>());
        if (worst <= 0.25) return t;
        Pt = Pt * P;
    }
    return cap;
}

/// sigma_k samples for agent `agent`. The default uses the exactly computed
/// nu_k; the simulated sampler runs the chain from rho with a burn-in of ten
/// mixing-time estimates and thins by one mixing time between draws.
inline std::vector<SigmaSample> sample_sigma_k(const Game& g, const FactorizedPolicy& pi, int agent, Index count,
                                               Rng& rng, SamplerKind kind = SamplerKind::ExactStationary) {
    const auto occ = stationary_distribution(g, pi);
    if (kind == SamplerKind::ExactStationary) return sample_sigma_from(pi, occ.state, agent, count, rng);

    const auto chain = induced_chain(g, pi);
    const long tmix = mixing_time_estimate(chain.transition, occ.state);
    int s = static_cast<int>(sample_categorical(rng, g.initial_dist));
    auto advance = [&](long steps) {
        for (long i = 0; i < steps; ++i) {
            const Index j = sample_completion(pi, s, 0, 0, rng);
            s = static_cast<int>(sample_categorical(rng, g.transition.row(g.row(s, j))));
        }
    };
    advance(10 * tmix);
    std::vector<SigmaSample> out;
    for (Index t = 0; t < count; ++t) {
        Eigen::VectorXd point = Eigen::VectorXd::Unit(g.num_states, s);
        out.push_back(sample_sigma_from(pi, point, agent, 1, rng).front());
        advance(tmix);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Q estimation
// ---------------------------------------------------------------------------

struct McSettings {
    long horizon = 0;
    long repeats = 100;
};

/// Horizon so that the truncation bias gamma^H / (1 - gamma) is at most tol / 10.
inline long default_mc_horizon(double gamma, double tol) {
    if (gamma == 0.0) return 1;
    return static_cast<long>(std::ceil(std::log(10.0 / ((1.0 - gamma) * tol)) / (1.0 - gamma)));
}

struct QEstimate {
    std::vector<double> values;
    double bound = 0.0;
    /// RMSE against the exact oracle over the queried points; 0 for the exact kind.
    double xi = 0.0;
};

/// Discounted return of one truncated rollout from (s, a^{1:m}) where the
/// complement at step 0 and every later joint action follow pi.
inline double rollout_return(const Game& g, const FactorizedPolicy& pi, int s, int m, Index prefix, long horizon,
                             Rng& rng) {
    double ret = 0.0, disc = 1.0;
    Index j = sample_completion(pi, s, prefix, m, rng);
    for (long t = 0; t < horizon; ++t) {
        ret += disc * g.reward(s, j);
        disc *= g.gamma;
        s = static_cast<int>(sample_categorical(rng, g.transition.row(g.row(s, j))));
        if (t + 1 < horizon) j = sample_completion(pi, s, 0, 0, rng);
    }
    return ret;
}

/// Q^{1:m} estimates at sampled triples of agent `agent` (so m = agent + 1).
/// `exact` is the oracle table for that m, used for the exact kind and for xi.
inline QEstimate estimate_q(const Game& g, const FactorizedPolicy& pi, int agent, const std::vector<SigmaSample>& points,
                            EstimatorKind kind, const RowMatrix& exact, const McSettings& mc, Rng& rng) {
    const int m = agent + 1;
    const int A = g.actions.num_actions(agent);
    QEstimate out;
    out.bound = g.value_bound();
    out.values.reserve(points.size());
    double sq = 0.0;
    for (const auto& x : points) {
        const Index full = x.prefix * A + x.action;
        double v = exact(x.s, full);
        if (kind == EstimatorKind::MonteCarlo) {
            double acc = 0.0;
            for (long r = 0; r < mc.repeats; ++r) acc += rollout_return(g, pi, x.s, m, full, mc.horizon, rng);
            const double est = std::clamp(acc / static_cast<double>(mc.repeats), 0.0, out.bound);
            sq += (est - v) * (est - v);
            v = est;
        }
        out.values.push_back(v);
    }
    if (kind == EstimatorKind::MonteCarlo && !points.empty()) out.xi = std::sqrt(sq / static_cast<double>(points.size()));
    return out;
}

// ---------------------------------------------------------------------------
// Sub-problem: MSE regression onto the ideal update
// ---------------------------------------------------------------------------

/// Empirical improvement loss: mean of ((theta - theta_k)^T phi - q / beta_k)^2.
inline double mse_loss(const Eigen::VectorXd& theta, const std::vector<Index>& inputs, const std::vector<double>& q,
                       const Eigen::VectorXd& theta_k, double beta_k, const FeatureMap& fm) {
    if (inputs.size() != q.size()) throw ConfigError("mse_loss: sample and value counts differ");
    if (inputs.empty()) return 0.0;
    const Eigen::VectorXd diff = theta - theta_k;
    double acc = 0.0;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        const double r = fm.dot(inputs[t], diff) - q[t] / beta_k;
        acc += r * r;
    }
    return acc / static_cast<double>(inputs.size());
}

/// Gradient bound of the sub-problem, 2 (R + 1 / ((1 - gamma) beta_k)).
inline double sgd_gradient_bound(double radius, double gamma, double beta_k) {
    return 2.0 * (radius + 1.0 / ((1.0 - gamma) * beta_k));
}

struct SgdResult {
    Eigen::VectorXd theta;
    double eta = 0.0;
    double G = 0.0;
};

/// Projected SGD over the T supplied samples, one sample per step, with
/// eta = R / (G sqrt(T)); returns the average of theta_1..theta_T.
inline SgdResult sgd_improve(const std::vector<Index>& inputs, const std::vector<double>& q,
                             const Eigen::VectorXd& theta_k, double beta_k, double radius, double gamma,
                             const FeatureMap& fm, SgdInit init = SgdInit::Warm) {
    if (inputs.empty()) throw ConfigError("sgd_improve: T must be >= 1");
    if (inputs.size() != q.size()) throw ConfigError("sgd_improve: sample and value counts differ");
    const double T = static_cast<double>(inputs.size());
    SgdResult out;
    out.G = sgd_gradient_bound(radius, gamma, beta_k);
    out.eta = radius / (out.G * std::sqrt(T));
    Eigen::VectorXd theta = init == SgdInit::Warm ? theta_k : Eigen::VectorXd::Zero(theta_k.size());
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(theta_k.size());
    Eigen::VectorXd diff = theta - theta_k;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        const double resid = fm.dot(inputs[t], diff) - q[t] / beta_k;
        fm.add_to(inputs[t], -2.0 * out.eta * resid, theta);
        const double n = theta.norm();
        if (n > radius) theta *= radius / n;
        diff = theta - theta_k;
        sum += theta;
    }
    out.theta = sum / T;
    return out;
}

/// Expected improvement loss under explicit weights over feature inputs.
inline double population_loss(const Eigen::VectorXd& theta, const Eigen::VectorXd& weights, const Eigen::VectorXd& q,
                              const Eigen::VectorXd& theta_k, double beta_k, const FeatureMap& fm) {
    const Eigen::VectorXd scores = fm.scores(theta - theta_k);
    return (weights.array() * (scores - q / beta_k).array().square()).sum();
}

/// Minimizer of the expected loss (ridge 1e-12), projected onto the ball.
inline Eigen::VectorXd population_improve(const Eigen::VectorXd& weights, const Eigen::VectorXd& q,
                                          const Eigen::VectorXd& theta_k, double beta_k, double radius,
                                          const FeatureMap& fm) {
    const RowMatrix Phi = fm.dense();
    const Eigen::MatrixXd Gram = Phi.transpose() * weights.asDiagonal() * Phi +
                                 1e-12 * Eigen::MatrixXd::Identity(Phi.cols(), Phi.cols());
    const Eigen::VectorXd rhs = Phi.transpose() * (weights.array() * q.array() / beta_k).matrix();
    const Eigen::VectorXd step = Gram.ldlt().solve(rhs);
    return project_theta(theta_k + step, radius);
}

// ---------------------------------------------------------------------------
// Sequential training loop
// ---------------------------------------------------------------------------

/// beta = sqrt((N B^2 / 2) / sum_m log|A^m|), the error-free specialization
/// of the rate-optimal choice.
inline double default_beta(const Game& g) {
    double logs = 0.0;
    for (int a : g.actions.actions()) logs += std::log(static_cast<double>(a));
    const double B = g.value_bound();
    if (logs <= 0.0) return B;
    return std::sqrt(g.num_agents() * B * B / 2.0 / logs);
}

struct MappoConfig {
    int iterations = 100;
    long sgd_steps = 1000;
    /// Base penalty; empty means default_beta(game).
    std::optional<double> beta;
    std::vector<double> radii{kDefaultRadius};
    FeatureSpec features;
    EstimatorKind estimator = EstimatorKind::Exact;
    McSettings mc;
    double mc_tolerance = 0.1;
    SolverKind solver = SolverKind::Sgd;
    SgdInit sgd_init = SgdInit::Warm;
    UpdateScheme scheme = UpdateScheme::IterationStart;
    SamplerKind sampler = SamplerKind::ExactStationary;
    ObjectiveMode objective = ObjectiveMode::StationaryOptimal;
    int s0 = 0;
    /// Ablation: random agent order each iteration.
    bool shuffle_agents = false;
    bool diagnostics = true;
    bool record_wall_time = false;
    std::uint64_t seed = 0;
};

struct TraceRow {
    int iter = 0;
    int agent = 0;
    double J = 0.0;
    double gap = 0.0;
    double solver_loss = 0.0;
    double eps = 0.0;
    double xi = 0.0;
    double beta_k = 0.0;
    double wall_ms = 0.0;
    // Pessimistic-only columns.
    double lambda = 0.0;
    double eta = 0.0;
    double bellman_err = 0.0;
    double f_s0 = 0.0;
    double clip_violation_mass = 0.0;
};

struct RunTrace {
    std::vector<TraceRow> rows;
    /// J(pi_{theta_k}) and its gap for k = 0..K.
    std::vector<double> iterate_J;
    std::vector<double> iterate_gap;
    double J_star = 0.0;
    ObjectiveMode objective = ObjectiveMode::StationaryOptimal;
    int output_iter = 0;
    int best_iter = 0;
    double beta = 0.0;
    std::uint64_t seed = 0;
    DiagnosticsReport diagnostics;

    double final_gap() const { return iterate_gap.back(); }
    double output_gap() const { return iterate_gap.at(output_iter); }
    double best_gap() const { return iterate_gap.at(best_iter); }
};

struct MappoResult {
    LogLinearPolicy output;
    LogLinearPolicy last;
    RunTrace trace;
};

namespace detail {

inline double elapsed_ms(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
}

/// Weights sigma_k over the agent's feature inputs and the matching exact
/// Q^{1:m} values, in input order.
inline void sigma_table(const Game& g, const FactorizedPolicy& pi, const Eigen::VectorXd& nu, int agent,
                        const RowMatrix& q_full, Eigen::VectorXd& weights, Eigen::VectorXd& q) {
    const RowMatrix marg = pi.prefix_marginal(agent + 1);
    const Index P = marg.cols();
    weights.resize(g.num_states * P);
    q.resize(g.num_states * P);
    for (Index s = 0; s < g.num_states; ++s)
        for (Index p = 0; p < P; ++p) {
            weights[s * P + p] = nu[s] * marg(s, p);
            q[s * P + p] = q_full(s, p);
        }
}

} // namespace detail

/// Multi-agent PPO with sequential per-agent updates.
inline MappoResult train_mappo(const Game& g, const MappoConfig& cfg) {
    if (cfg.iterations < 1) throw ConfigError("iterations must be >= 1");
    if (cfg.sgd_steps < 1) throw ConfigError("sgd_steps must be >= 1");
    const double beta = cfg.beta.value_or(default_beta(g));
    if (!(beta > 0.0)) throw ConfigError("beta must be positive");
    const int N = g.num_agents();
    const int K = cfg.iterations;
    const double beta_k = beta * std::sqrt(static_cast<double>(K));
    McSettings mc = cfg.mc;
    if (mc.horizon <= 0) mc.horizon = default_mc_horizon(g.gamma, cfg.mc_tolerance);

    const auto start = std::chrono::steady_clock::now();
    Rng rng = make_rng(cfg.seed);
    Rng output_rng = make_rng(derive_seed(cfg.seed, 1));

    const OptimalPolicy opt = optimal_joint_policy(g, cfg.objective, cfg.s0);
    LogLinearPolicy pi(g, cfg.features, cfg.radii);
    std::vector<LogLinearPolicy> iterates{pi};

    MappoResult res;
    auto& trace = res.trace;
    trace.J_star = opt.J;
    trace.objective = cfg.objective;
    trace.beta = beta;
    trace.seed = cfg.seed;
    auto record_iterate = [&](const FactorizedPolicy& fp) {
        const double J = opt.objective.evaluate(g, fp);
        trace.iterate_J.push_back(J);
        trace.iterate_gap.push_back(opt.J - J);
    };
    record_iterate(pi.to_factorized());

    std::vector<int> order(N);
    for (int k = 0; k < K; ++k) {
        std::iota(order.begin(), order.end(), 0);
        if (cfg.shuffle_agents)
            for (int i = N - 1; i > 0; --i) std::swap(order[i], order[uniform_index(rng, static_cast<std::uint64_t>(i + 1))]);

        FactorizedPolicy eval_policy = pi.to_factorized();
        auto qs = all_multi_agent_q(g, eval_policy);
        Eigen::VectorXd nu = stationary_distribution(g, eval_policy).state;

        for (int agent : order) {
            if (cfg.scheme == UpdateScheme::Refresh && agent != order.front()) {
                eval_policy = pi.to_factorized();
                qs = all_multi_agent_q(g, eval_policy);
                nu = stationary_distribution(g, eval_policy).state;
            }
            auto& ap = pi.agent(agent);
            const RowMatrix& q_exact = qs[agent + 1].values;
            const Eigen::VectorXd theta_k = ap.theta;

            TraceRow row;
            row.iter = k;
            row.agent = agent;
            row.beta_k = beta_k;

            Eigen::VectorXd weights, q_table;
            detail::sigma_table(g, eval_policy, nu, agent, q_exact, weights, q_table);
            double G = sgd_gradient_bound(ap.radius, g.gamma, beta_k);

            if (cfg.solver == SolverKind::Sgd) {
                const auto samples = sample_sigma_from(eval_policy, nu, agent, cfg.sgd_steps, rng);
                const auto est = estimate_q(g, eval_policy, agent, samples, cfg.estimator, q_exact, mc, rng);
                std::vector<Index> inputs;
                inputs.reserve(samples.size());
                for (const auto& x : samples) inputs.push_back(x.input);
                const auto sgd = sgd_improve(inputs, est.values, theta_k, beta_k, ap.radius, g.gamma, ap.features,
                                             cfg.sgd_init);
                ap.theta = sgd.theta;
                G = sgd.G;
                row.solver_loss = mse_loss(ap.theta, inputs, est.values, theta_k, beta_k, ap.features);
                row.xi = est.xi;
                row.eps = cfg.estimator == EstimatorKind::Exact
                              ? std::sqrt(population_loss(ap.theta, weights, q_table, theta_k, beta_k, ap.features))
                              : std::sqrt(row.solver_loss);
            } else {
                if (cfg.estimator != EstimatorKind::Exact)
                    throw ConfigError("the population solver requires the exact estimator");
                ap.theta = population_improve(weights, q_table, theta_k, beta_k, ap.radius, ap.features);
                row.solver_loss = population_loss(ap.theta, weights, q_table, theta_k, beta_k, ap.features);
                row.eps = std::sqrt(row.solver_loss);
            }

            const FactorizedPolicy current = pi.to_factorized();
            row.J = opt.objective.evaluate(g, current);
            row.gap = opt.J - row.J;
            if (cfg.record_wall_time) row.wall_ms = detail::elapsed_ms(start);
            trace.rows.push_back(row);

            if (cfg.diagnostics) {
                DiagnosticsEntry d;
                d.iter = k;
                d.agent = agent;
                d.eps = row.eps;
                d.xi = row.xi;
                d.phi = concentrability_phi(g, opt.policy, eval_policy, agent + 1);
                d.phi_prev = concentrability_phi(g, opt.policy, eval_policy, agent);
                d.G = G;
                trace.diagnostics.add(d, beta_k);
            }
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

/// Log-log slope of the upper gap envelope max_{j >= k} gap_j against k,
/// fitted on a geometric grid of k in [1, K] so late iterations do not
/// dominate the regression. Iterations with non-positive envelope are skipped.
inline double gap_envelope_slope(const std::vector<double>& gaps, int grid_points = 50) {
    const int K = static_cast<int>(gaps.size()) - 1;
    if (K < 2) return 0.0;
    std::vector<double> env(gaps.size());
    double run = -std::numeric_limits<double>::infinity();
    for (int k = K; k >= 0; --k) env[k] = run = std::max(run, gaps[k]);
    std::vector<double> xs, ys;
    int last = 0;
    for (int i = 0; i < grid_points; ++i) {
        const int k = static_cast<int>(std::lround(std::pow(static_cast<double>(K), static_cast<double>(i) / (grid_points - 1))));
        if (k <= last || k < 1) continue;
        last = k;
        if (env[k] <= 0.0) continue;
        xs.push_back(std::log(static_cast<double>(k)));
        ys.push_back(std::log(env[k]));
    }
    return linear_fit(xs, ys).slope;
}

} // namespace marl
