#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"
#include "marl/game.hpp"
#include "marl/oracle.hpp"
#include "marl/pessimistic.hpp"
#include "marl/policy.hpp"
#include "marl/rng.hpp"

namespace marl {

/// Deliberate defects for checking that the harness can fail.
enum class InjectedBug { None, NegatedAdvantage };

struct SuiteResult {
    std::string name;
    double worst = 0.0;
    double tolerance = 0.0;
    long cases = 0;
    /// Residual suites pass when worst <= tolerance; margin suites when worst >= -tolerance.
    bool lower_is_better = true;

    bool pass() const { return lower_is_better ? worst <= tolerance : worst >= -tolerance; }
};

/// Random game for the property sweeps: N in {2, 3}, |S| <= 4, |A^i| in {2, 3}.
inline Game property_game(std::uint64_t seed) {
    Rng rng = make_rng(seed);
    GameGenSpec spec;
    spec.seed = seed;
    const int N = 2 + static_cast<int>(uniform_index(rng, 2));
    spec.num_states = 1 + static_cast<int>(uniform_index(rng, 4));
    spec.actions_per_agent.clear();
    for (int i = 0; i < N; ++i) spec.actions_per_agent.push_back(2 + static_cast<int>(uniform_index(rng, 2)));
    spec.gamma = 0.5 + 0.45 * unit_double(rng);
    return random_game(spec);
}

/// max over m, s, prefixes of |sum_{i<=m} A^i - (Q^{1:m} - V)|.
inline double decomposition_residual(const Game& g, const FactorizedPolicy& pi, InjectedBug bug = InjectedBug::None) {
    const auto qs = all_multi_agent_q(g, pi);
    const int N = g.num_agents();
    std::vector<RowMatrix> adv(N + 1);
    for (int m = 1; m <= N; ++m) {
        adv[m] = advantage_table(qs, g.actions, m);
        if (bug == InjectedBug::NegatedAdvantage) adv[m] = -adv[m];
    }
    double worst = 0.0;
    for (int m = 1; m <= N; ++m)
        for (Index s = 0; s < g.num_states; ++s)
            for (Index p = 0; p < g.actions.prefix_count(m); ++p) {
                double sum = 0.0;
                for (int i = 1; i <= m; ++i) sum += adv[i](s, p / (g.actions.prefix_count(m) / g.actions.prefix_count(i)));
                const double joint = qs[m].values(s, p) - qs[0].values(s, 0);
                worst = std::max(worst, std::abs(sum - joint));
            }
    return worst;
}

inline double fixed_point_residual(const Game& g, const FactorizedPolicy& pi) {
    const auto qs = all_multi_agent_q(g, pi);
    double worst = 0.0;
    for (int m = 1; m <= g.num_agents(); ++m)
        worst = std::max(worst, (qs[m].values - bellman_apply(g, pi, m, qs[m].values)).cwiseAbs().maxCoeff());
    return worst;
}

/// Largest ||T f - T f'|| / ||f - f'|| (sup norms) over random table pairs.
inline double contraction_factor(const Game& g, const FactorizedPolicy& pi, Rng& rng, int pairs) {
    double worst = 0.0;
    for (int k = 0; k < pairs; ++k) {
        const int m = 1 + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(g.num_agents())));
        const Index P = g.actions.prefix_count(m);
        RowMatrix f(g.num_states, P), h(g.num_states, P);
        for (Index i = 0; i < f.size(); ++i) {
            f.data()[i] = g.value_bound() * unit_double(rng);
            h.data()[i] = g.value_bound() * unit_double(rng);
        }
        const double den = (f - h).cwiseAbs().maxCoeff();
        if (den == 0.0) continue;
        const double num = (bellman_apply(g, pi, m, f) - bellman_apply(g, pi, m, h)).cwiseAbs().maxCoeff();
        worst = std::max(worst, num / den);
    }
    return worst;
}

/// Smallest margin of the closed-form update over random competitors on the
/// pointwise objective <q, p> - beta KL(p || pi_theta).
inline double ideal_update_margin(Rng& rng, int points, int competitors) {
    double worst = std::numeric_limits<double>::infinity();
    for (int t = 0; t < points; ++t) {
        const int A = 2 + static_cast<int>(uniform_index(rng, 4));
        const FeatureMap fm = FeatureMap::one_hot(A);
        Eigen::VectorXd q(A), theta(A);
        for (int a = 0; a < A; ++a) {
            q[a] = 10.0 * unit_double(rng);
            theta[a] = 2.0 * standard_normal(rng);
        }
        const double beta = 0.05 + 5.0 * unit_double(rng);
        const Eigen::VectorXd ref = policy_probs(theta, fm, 0, A);
        const Eigen::VectorXd best = ideal_update(q, theta, beta, fm, 0);
        const double top = regularized_objective(q, best, ref, beta);
        for (int c = 0; c < competitors; ++c) {
            Eigen::VectorXd p(A);
            for (int a = 0; a < A; ++a) p[a] = standard_exponential(rng);
            p /= p.sum();
            worst = std::min(worst, top - regularized_objective(q, p, ref, beta));
        }
    }
    return worst;
}

/// Minimum of E(f, pi) over random linear weights and random finite classes.
inline double bellman_error_floor(const Game& g, const FactorizedPolicy& pi, Rng& rng, int trials) {
    double worst = std::numeric_limits<double>::infinity();
    for (int t = 0; t < trials; ++t) {
        const int m = 1 + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(g.num_agents())));
        const auto data = build_dataset(g, pi, m, DataDistribution::uniform(g), 64, rng());
        const auto st = DatasetStats::from(data, g);
        LinearValueClass cls;
        const Index inputs = g.num_states * g.actions.prefix_count(m);
        cls.features = FeatureMap::random_projection(inputs, std::min<Index>(inputs, 6), rng());
        cls.radius = g.value_bound() * 3.0;
        cls.bound = g.value_bound();
        const auto q = bellman_quadratic(g, pi, st, cls.features);
        Eigen::VectorXd w(cls.features.dim());
        for (Index k = 0; k < w.size(); ++k) w[k] = g.value_bound() * standard_normal(rng);
        worst = std::min(worst, bellman_error_linear(q, st, w, cls).value);

        std::vector<RowMatrix> cands(3, RowMatrix(g.num_states, g.actions.prefix_count(m)));
        for (auto& c : cands)
            for (Index i = 0; i < c.size(); ++i) c.data()[i] = g.value_bound() * unit_double(rng);
        for (const auto& c : cands) worst = std::min(worst, bellman_error_finite(c, cands, pi, st, g.gamma));
    }
    return worst;
}

struct PropertyReport {
    int n_games = 0;
    std::vector<SuiteResult> suites;
    std::vector<std::string> warnings;

    bool all_pass() const {
        return std::all_of(suites.begin(), suites.end(), [](const SuiteResult& s) { return s.pass(); });
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["n_games"] = n_games;
        j["pass"] = all_pass();
        j["warnings"] = warnings;
        j["suites"] = nlohmann::json::array();
        for (const auto& s : suites)
            j["suites"].push_back({{"name", s.name}, {"worst", s.worst}, {"tolerance", s.tolerance},
                                   {"cases", s.cases}, {"pass", s.pass()}});
        return j;
    }
};

/// Every property suite over `n_games` seeded random games.
inline PropertyReport check_properties(int n_games, std::uint64_t seed = 0, InjectedBug bug = InjectedBug::None) {
    if (n_games < 0) throw ConfigError("n_games must be >= 0");
    PropertyReport rep;
    rep.n_games = n_games;
    if (n_games == 0) rep.warnings.push_back("n_games = 0: every suite passes vacuously");
    SuiteResult decomp{"advantage_decomposition", 0.0, 1e-10};
    SuiteResult perfdiff{"performance_difference", 0.0, 1e-8};
    SuiteResult fixed{"bellman_fixed_point", 0.0, 1e-10};
    SuiteResult contract{"bellman_contraction_excess", 0.0, 1e-9};
    const double inf = std::numeric_limits<double>::infinity();
    SuiteResult prop1{"ideal_update_optimality", n_games > 0 ? inf : 0.0, 1e-9, 0, false};
    SuiteResult nonneg{"bellman_error_nonnegative", n_games > 0 ? inf : 0.0, 1e-10, 0, false};
    for (int k = 0; k < n_games; ++k) {
        const std::uint64_t gs = derive_seed(seed, static_cast<std::uint64_t>(k));
        const Game g = property_game(gs);
        Rng rng = make_rng(derive_seed(gs, 1));
        const FactorizedPolicy pi = FactorizedPolicy::random(g, rng);

        decomp.worst = std::max(decomp.worst, decomposition_residual(g, pi, bug));
        ++decomp.cases;
        const auto opt = optimal_joint_policy(g);
        perfdiff.worst = std::max(perfdiff.worst, perf_diff_check(g, opt.policy, pi).residual);
        ++perfdiff.cases;
        fixed.worst = std::max(fixed.worst, fixed_point_residual(g, pi));
        ++fixed.cases;
        contract.worst = std::max(contract.worst, contraction_factor(g, pi, rng, 5) - g.gamma);
        contract.cases += 5;
        prop1.worst = std::min(prop1.worst, ideal_update_margin(rng, 1, 100));
        ++prop1.cases;
        nonneg.worst = std::min(nonneg.worst, bellman_error_floor(g, pi, rng, 2));
        nonneg.cases += 2;
    }
    rep.suites = {decomp, perfdiff, fixed, contract, prop1, nonneg};
    return rep;
}

} // namespace marl
