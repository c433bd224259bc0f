#pragma once

// Independent reference computations used only by the tests. They work from
// explicit per-agent action vectors rather than the library's table
// bookkeeping, so an indexing mistake in one does not hide in the other.

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "marl/game.hpp"
#include "marl/policy.hpp"
#include "marl/rng.hpp"

namespace oracle {

using marl::Game;
using marl::FactorizedPolicy;
using marl::Index;

/// Product of per-agent conditionals for the actions in `acts`, agents first..last-1.
inline double chain_prob(const FactorizedPolicy& pi, int s, const std::vector<int>& acts, int first, int last) {
    const auto& idx = pi.actions();
    double p = 1.0;
    for (int i = first; i < last; ++i) {
        const std::vector<int> head(acts.begin(), acts.begin() + i);
        p *= pi.prob(i, s, idx.encode(head), acts[i]);
    }
    return p;
}

/// V by plain successive approximation over explicit joint actions.
inline Eigen::VectorXd value(const Game& g, const FactorizedPolicy& pi, int sweeps = 4000) {
    const int S = g.num_states, N = g.num_agents();
    Eigen::VectorXd v = Eigen::VectorXd::Zero(S);
    for (int it = 0; it < sweeps; ++it) {
        Eigen::VectorXd next = Eigen::VectorXd::Zero(S);
        for (int s = 0; s < S; ++s)
            for (Index j = 0; j < g.num_joint(); ++j) {
                const auto acts = g.actions.decode(j, N);
                const double w = chain_prob(pi, s, acts, 0, N);
                double cont = 0.0;
                for (int t = 0; t < S; ++t) cont += g.transition(g.row(s, j), t) * v[t];
                next[s] += w * (g.reward(s, j) + g.gamma * cont);
            }
        v = next;
    }
    return v;
}

/// Q^{1:m}(s, prefix) as the explicit expectation over completions.
inline double q_prefix(const Game& g, const FactorizedPolicy& pi, const Eigen::VectorXd& v, int s,
                       const std::vector<int>& prefix) {
    const int N = g.num_agents();
    const int m = static_cast<int>(prefix.size());
    double total = 0.0;
    for (Index j = 0; j < g.num_joint(); ++j) {
        const auto acts = g.actions.decode(j, N);
        if (!std::equal(prefix.begin(), prefix.end(), acts.begin())) continue;
        double q = g.reward(s, j);
        for (int t = 0; t < g.num_states; ++t) q += g.gamma * g.transition(g.row(s, j), t) * v[t];
        total += chain_prob(pi, s, acts, m, N) * q;
    }
    return total;
}

/// Samples one joint action by walking the conditionals.
inline Index sample_joint(const FactorizedPolicy& pi, int s, marl::Rng& rng) {
    const auto& idx = pi.actions();
    Index p = 0;
    for (int i = 0; i < idx.num_agents(); ++i) p = idx.extend(p, i, static_cast<int>(marl::sample_categorical(rng, pi.conditional(i, s, p))));
    return p;
}

inline int step(const Game& g, int s, Index j, marl::Rng& rng) {
    return static_cast<int>(marl::sample_categorical(rng, g.transition.row(g.row(s, j))));
}

inline double total_variation(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    return 0.5 * (a - b).lpNorm<1>();
}

inline FactorizedPolicy random_policy(const Game& g, std::uint64_t seed) {
    marl::Rng rng = marl::make_rng(seed);
    return FactorizedPolicy::random(g, rng);
}

inline Game game(std::uint64_t seed, int states, std::vector<int> actions, double gamma = 0.9) {
    marl::GameGenSpec spec;
    spec.seed = seed;
    spec.num_states = states;
    spec.actions_per_agent = std::move(actions);
    spec.gamma = gamma;
    return marl::random_game(spec);
}

} // namespace oracle
