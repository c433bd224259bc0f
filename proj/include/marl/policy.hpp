#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "marl/error.hpp"
#include "marl/game.hpp"
#include "marl/indexing.hpp"
#include "marl/rng.hpp"

namespace marl {

/// Explicit conditional tables pi^i(a^i | s, a^{1:i-1}) for every agent i.
///
/// Table i has one row per (s, prefix of length i), row index
/// s * prefix_count(i) + prefix, and |A^i| columns.
class FactorizedPolicy {
public:
    FactorizedPolicy() = default;

    FactorizedPolicy(int num_states, ActionIndexer actions) : num_states_(num_states), actions_(std::move(actions)) {
        for (int i = 0; i < actions_.num_agents(); ++i) {
            tables_.emplace_back(RowMatrix::Constant(num_states_ * actions_.prefix_count(i), actions_.num_actions(i),
                                                     1.0 / actions_.num_actions(i)));
        }
    }

    static FactorizedPolicy uniform(const Game& g) { return FactorizedPolicy(g.num_states, g.actions); }

    /// Deterministic policy playing joint action `joint_per_state[s]` in state s.
    /// Off-path prefixes also follow the per-state action of each agent.
    static FactorizedPolicy deterministic(const Game& g, const std::vector<Index>& joint_per_state) {
        FactorizedPolicy pi(g.num_states, g.actions);
        const int N = g.num_agents();
        for (int s = 0; s < g.num_states; ++s) {
            const auto acts = g.actions.decode(joint_per_state.at(s), N);
            for (int i = 0; i < N; ++i) {
                auto& t = pi.tables_[i];
                const Index P = g.actions.prefix_count(i);
                for (Index p = 0; p < P; ++p) {
                    t.row(s * P + p).setZero();
                    t(s * P + p, acts[i]) = 1.0;
                }
            }
        }
        return pi;
    }

    /// Random interior policy: each row is a normalized draw of floor + Exp(1).
    static FactorizedPolicy random(const Game& g, Rng& rng, double floor = 0.0) {
        FactorizedPolicy pi(g.num_states, g.actions);
        for (auto& t : pi.tables_) {
            for (Index r = 0; r < t.rows(); ++r) {
                for (Index c = 0; c < t.cols(); ++c) t(r, c) = floor + standard_exponential(rng);
                t.row(r) /= t.row(r).sum();
            }
        }
        return pi;
    }

    int num_states() const { return num_states_; }
    const ActionIndexer& actions() const { return actions_; }
    int num_agents() const { return actions_.num_agents(); }

    const RowMatrix& table(int agent) const { return tables_.at(agent); }
    RowMatrix& table(int agent) { return tables_.at(agent); }

    Index row(int agent, int s, Index prefix) const { return s * actions_.prefix_count(agent) + prefix; }

    double prob(int agent, int s, Index prefix, int action) const {
        return tables_[agent](row(agent, s, prefix), action);
    }

    auto conditional(int agent, int s, Index prefix) const { return tables_[agent].row(row(agent, s, prefix)); }

    /// pi^{1:m}(prefix | s) as an |S| x prefix_count(m) table.
    RowMatrix prefix_marginal(int m) const {
        RowMatrix out = RowMatrix::Ones(num_states_, 1);
        for (int i = 0; i < m; ++i) {
            const int A = actions_.num_actions(i);
            const Index P = actions_.prefix_count(i);
            RowMatrix next(num_states_, P * A);
            for (int s = 0; s < num_states_; ++s)
                for (Index p = 0; p < P; ++p)
                    for (int a = 0; a < A; ++a) next(s, p * A + a) = out(s, p) * tables_[i](s * P + p, a);
            out = std::move(next);
        }
        return out;
    }

    RowMatrix joint() const { return prefix_marginal(num_agents()); }

    /// Max deviation of any row sum from 1 and min entry.
    std::pair<double, double> normalization_error() const {
        double dev = 0.0, mn = 1.0;
        for (const auto& t : tables_) {
            for (Index r = 0; r < t.rows(); ++r) dev = std::max(dev, std::abs(t.row(r).sum() - 1.0));
            mn = std::min(mn, t.minCoeff());
        }
        return {dev, mn};
    }

private:
    int num_states_ = 0;
    ActionIndexer actions_;
    std::vector<RowMatrix> tables_;
};

/// Samples agents first..N-1 sequentially, conditioning each on the prefix so far.
/// Returns the completed joint index.
inline Index sample_completion(const FactorizedPolicy& pi, int s, Index prefix, int first, Rng& rng) {
    const auto& acts = pi.actions();
    for (int i = first; i < acts.num_agents(); ++i) {
        const int a = static_cast<int>(sample_categorical(rng, pi.conditional(i, s, prefix)));
        prefix = acts.extend(prefix, i, a);
    }
    return prefix;
}

// ---------------------------------------------------------------------------
// Feature maps
// ---------------------------------------------------------------------------

enum class FeatureKind { OneHot, RandomProjection };

inline std::string to_string(FeatureKind k) { return k == FeatureKind::OneHot ? "one_hot" : "random_projection"; }

inline FeatureKind feature_kind_from_string(const std::string& s) {
    if (s == "one_hot") return FeatureKind::OneHot;
    if (s == "random_projection") return FeatureKind::RandomProjection;
    throw ConfigError("unknown feature map kind '" + s + "'");
}

/// Feature map over a flat input set. For agent i the inputs are
/// (s, a^{1:i}, a^{i+1}) flattened as s * prefix_count(i+1) + prefix, which is
/// also the index of (s, a^{1:m}) for value tables with m = i + 1.
///
/// One-hot maps use the standard basis (dim == num_inputs). Random
/// projections draw a seeded Gaussian row per input and scale it to unit norm.
class FeatureMap {
public:
    FeatureMap() = default;

    static FeatureMap one_hot(Index num_inputs) {
        FeatureMap f;
        f.kind_ = FeatureKind::OneHot;
        f.inputs_ = num_inputs;
        f.dim_ = num_inputs;
        return f;
    }

    static FeatureMap random_projection(Index num_inputs, Index dim, std::uint64_t seed) {
        if (dim < 1) throw ConfigError("feature dimension must be >= 1");
        FeatureMap f;
        f.kind_ = FeatureKind::RandomProjection;
        f.inputs_ = num_inputs;
        f.dim_ = dim;
        f.seed_ = seed;
        auto rows = std::make_shared<RowMatrix>(num_inputs, dim);
        Rng rng = make_rng(seed);
        for (Index i = 0; i < num_inputs; ++i) {
            for (Index k = 0; k < dim; ++k) (*rows)(i, k) = standard_normal(rng);
            const double n = rows->row(i).norm();
            rows->row(i) /= (n > 0.0 ? n : 1.0);
        }
        f.rows_ = std::move(rows);
        return f;
    }

    static FeatureMap make(FeatureKind kind, Index num_inputs, Index dim, std::uint64_t seed) {
        return kind == FeatureKind::OneHot ? one_hot(num_inputs) : random_projection(num_inputs, dim, seed);
    }

    FeatureKind kind() const { return kind_; }
    Index dim() const { return dim_; }
    Index num_inputs() const { return inputs_; }
    std::uint64_t seed() const { return seed_; }

    double dot(Index input, const Eigen::VectorXd& w) const {
        if (kind_ == FeatureKind::OneHot) return w[input];
        return rows_->row(input).dot(w);
    }

    /// w += scale * phi(input)
    void add_to(Index input, double scale, Eigen::VectorXd& w) const {
        if (kind_ == FeatureKind::OneHot) {
            w[input] += scale;
        } else {
            w.noalias() += scale * rows_->row(input).transpose();
        }
    }

    Eigen::VectorXd row(Index input) const {
        if (kind_ == FeatureKind::OneHot) return Eigen::VectorXd::Unit(dim_, input);
        return rows_->row(input).transpose();
    }

    /// All feature rows stacked (num_inputs x dim).
    RowMatrix dense() const {
        if (kind_ == FeatureKind::OneHot) return RowMatrix::Identity(inputs_, dim_);
        return *rows_;
    }

    /// Scores phi(input)^T w for every input.
    Eigen::VectorXd scores(const Eigen::VectorXd& w) const {
        if (kind_ == FeatureKind::OneHot) return w;
        return *rows_ * w;
    }

private:
    FeatureKind kind_ = FeatureKind::OneHot;
    Index inputs_ = 0;
    Index dim_ = 0;
    std::uint64_t seed_ = 0;
    std::shared_ptr<const RowMatrix> rows_;
};

// ---------------------------------------------------------------------------
// Softmax helpers
// ---------------------------------------------------------------------------

/// Max-subtracted softmax of a logit vector.
inline Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
    const double mx = logits.maxCoeff();
    Eigen::VectorXd p = (logits.array() - mx).exp().matrix();
    return p / p.sum();
}

/// Log floor for KL terms only; sampling never sees it.
inline constexpr double kLogFloor = 1e-300;

inline double kl_divergence(const Eigen::VectorXd& p, const Eigen::VectorXd& q) {
    double kl = 0.0;
    for (Index i = 0; i < p.size(); ++i) {
        if (p[i] <= 0.0) continue;
        kl += p[i] * (std::log(std::max(p[i], kLogFloor)) - std::log(std::max(q[i], kLogFloor)));
    }
    return kl;
}

/// Pointwise KL-regularized objective <q, pi> - beta * KL(pi || reference).
inline double regularized_objective(const Eigen::VectorXd& q, const Eigen::VectorXd& pi,
                                    const Eigen::VectorXd& reference, double beta) {
    return q.dot(pi) - beta * kl_divergence(pi, reference);
}

/// Logits phi(input)^T theta for the |A| consecutive inputs starting at `first_input`.
inline Eigen::VectorXd logits(const Eigen::VectorXd& theta, const FeatureMap& fm, Index first_input, int num_actions) {
    Eigen::VectorXd l(num_actions);
    for (int a = 0; a < num_actions; ++a) l[a] = fm.dot(first_input + a, theta);
    return l;
}

/// Log-linear conditional distribution over the |A| actions at a conditioning point.
inline Eigen::VectorXd policy_probs(const Eigen::VectorXd& theta, const FeatureMap& fm, Index first_input,
                                   int num_actions) {
    return softmax(logits(theta, fm, first_input, num_actions));
}

/// Closed-form maximizer of the KL-regularized improvement step:
/// proportional to exp(q / beta + phi^T theta).
inline Eigen::VectorXd ideal_update(const Eigen::VectorXd& q, const Eigen::VectorXd& theta, double beta,
                                   const FeatureMap& fm, Index first_input) {
    if (!(beta > 0.0)) throw ConfigError("ideal_update: beta must be positive");
    const int A = static_cast<int>(q.size());
    return softmax(q / beta + logits(theta, fm, first_input, A));
}

/// Euclidean projection onto the ball ||theta|| <= radius.
inline Eigen::VectorXd project_theta(const Eigen::VectorXd& theta, double radius) {
    if (!(radius > 0.0)) throw ConfigError("projection radius must be positive");
    const double n = theta.norm();
    if (n <= radius) return theta;
    return theta * (radius / n);
}

// ---------------------------------------------------------------------------
// Log-linear policies
// ---------------------------------------------------------------------------

struct AgentParams {
    FeatureMap features;
    Eigen::VectorXd theta;
    double radius = 50.0;
};

struct FeatureSpec {
    FeatureKind kind = FeatureKind::OneHot;
    /// Dimension for random projections; ignored for one-hot.
    Index dim = 8;
    std::uint64_t seed = 0;
};

inline constexpr double kDefaultRadius = 50.0;

/// Feature map for agent `agent` of game `g`. Seeds are split per agent.
inline FeatureMap make_agent_features(const Game& g, int agent, const FeatureSpec& spec) {
    const Index inputs = static_cast<Index>(g.num_states) * g.actions.prefix_count(agent + 1);
    return FeatureMap::make(spec.kind, inputs, spec.dim, derive_seed(spec.seed, static_cast<std::uint64_t>(agent)));
}

/// Conditional log-linear policy per agent, pi_theta^i(. | s, a^{1:i-1}).
class LogLinearPolicy {
public:
    LogLinearPolicy() = default;

    /// theta = 0 for every agent (the uniform policy).
    LogLinearPolicy(const Game& g, const FeatureSpec& spec, std::vector<double> radii = {})
        : num_states_(g.num_states), actions_(g.actions) {
        const int N = g.num_agents();
        if (radii.empty()) radii.assign(N, kDefaultRadius);
        if (radii.size() == 1 && N > 1) radii.assign(N, radii.front());
        if (static_cast<int>(radii.size()) != N) throw ConfigError("need one radius per agent");
        for (int i = 0; i < N; ++i) {
            if (!(radii[i] > 0.0)) throw ConfigError("radius must be positive");
            AgentParams ap;
            ap.features = make_agent_features(g, i, spec);
            ap.theta = Eigen::VectorXd::Zero(ap.features.dim());
            ap.radius = radii[i];
            agents_.push_back(std::move(ap));
        }
        feature_spec_ = spec;
    }

    int num_agents() const { return static_cast<int>(agents_.size()); }
    int num_states() const { return num_states_; }
    const ActionIndexer& actions() const { return actions_; }
    const FeatureSpec& feature_spec() const { return feature_spec_; }

    AgentParams& agent(int i) { return agents_.at(i); }
    const AgentParams& agent(int i) const { return agents_.at(i); }

    /// First feature input of conditioning point (s, prefix) for agent i.
    Index first_input(int agent, int s, Index prefix) const {
        return (s * actions_.prefix_count(agent) + prefix) * actions_.num_actions(agent);
    }

    Eigen::VectorXd probs(int agent, int s, Index prefix) const {
        const auto& ap = agents_[agent];
        return policy_probs(ap.theta, ap.features, first_input(agent, s, prefix), actions_.num_actions(agent));
    }

    /// Materializes every conditional table.
    FactorizedPolicy to_factorized() const {
        FactorizedPolicy out(num_states_, actions_);
        for (int i = 0; i < num_agents(); ++i) {
            const auto& ap = agents_[i];
            const int A = actions_.num_actions(i);
            const Eigen::VectorXd scores = ap.features.scores(ap.theta);
            auto& t = out.table(i);
            for (Index r = 0; r < t.rows(); ++r) t.row(r) = softmax(scores.segment(r * A, A)).transpose();
        }
        return out;
    }

private:
    int num_states_ = 0;
    ActionIndexer actions_;
    std::vector<AgentParams> agents_;
    FeatureSpec feature_spec_;
};

inline nlohmann::json policy_checkpoint(const LogLinearPolicy& pi) {
    nlohmann::json agents = nlohmann::json::array();
    for (int i = 0; i < pi.num_agents(); ++i) {
        const auto& ap = pi.agent(i);
        agents.push_back({{"d", ap.features.dim()},
                          {"R", ap.radius},
                          {"theta", std::vector<double>(ap.theta.data(), ap.theta.data() + ap.theta.size())},
                          {"featmap", {{"kind", to_string(ap.features.kind())}, {"seed", pi.feature_spec().seed}}}});
    }
    return {{"agents", agents}};
}

/// Rebuilds a policy saved by policy_checkpoint for the given game.
inline LogLinearPolicy load_policy_checkpoint(const nlohmann::json& j, const Game& g) {
    if (!j.is_object() || !j.contains("agents") || !j["agents"].is_array())
        throw ParseError("checkpoint must contain an 'agents' array", "/agents");
    const auto& arr = j["agents"];
    if (static_cast<int>(arr.size()) != g.num_agents())
        throw ParseError("checkpoint agent count does not match game", "/agents");
    FeatureSpec spec;
    std::vector<double> radii;
    for (std::size_t i = 0; i < arr.size(); ++i) {
        const std::string path = "/agents/" + std::to_string(i);
        try {
            const auto& fm = arr[i].at("featmap");
            spec.kind = feature_kind_from_string(fm.at("kind").get<std::string>());
            spec.seed = fm.at("seed").get<std::uint64_t>();
            spec.dim = arr[i].at("d").get<Index>();
            radii.push_back(arr[i].at("R").get<double>());
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(e.what(), path);
        }
    }
    LogLinearPolicy pi(g, spec, radii);
    for (std::size_t i = 0; i < arr.size(); ++i) {
        const auto theta = arr[i].at("theta").get<std::vector<double>>();
        auto& ap = pi.agent(static_cast<int>(i));
        if (static_cast<Index>(theta.size()) != ap.features.dim())
            throw ParseError("theta length does not match feature dimension", "/agents/" + std::to_string(i) + "/theta");
        ap.theta = Eigen::Map<const Eigen::VectorXd>(theta.data(), static_cast<Index>(theta.size()));
    }
    return pi;
}

} // namespace marl
