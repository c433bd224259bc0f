#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "marl/error.hpp"
#include "marl/indexing.hpp"
#include "marl/rng.hpp"

namespace marl {

/// Default desk-scale guard: |S| * prod |A^i|.
inline constexpr Index kDefaultSizeCap = 1'000'000;
/// Guard on the number of transition entries |S|^2 * prod |A^i|.
inline constexpr Index kTransitionEntryCap = 100'000'000;

/// Finite fully-cooperative Markov game. Immutable once built.
///
/// `reward` is |S| x |A| (joint actions in lexicographic order) and
/// `transition` has one row per (s, joint action), row index s * |A| + a.
struct Game {
    int num_states = 0;
    ActionIndexer actions;
    double gamma = 0.0;
    Eigen::VectorXd initial_dist;
    RowMatrix reward;
    RowMatrix transition;

    int num_agents() const { return actions.num_agents(); }
    Index num_joint() const { return actions.joint_count(); }
    Index row(int s, Index joint) const { return static_cast<Index>(s) * num_joint() + joint; }
    /// Upper bound on any discounted return, 1 / (1 - gamma).
    double value_bound() const { return 1.0 / (1.0 - gamma); }
};

struct ValidationReport {
    bool ok = true;
    std::string message;
    std::vector<Index> where;

    explicit operator bool() const { return ok; }

    static ValidationReport fail(std::string msg, std::vector<Index> at = {}) {
        return {false, std::move(msg), std::move(at)};
    }
    std::string describe() const {
        if (ok) return "pass";
        std::string out = message;
        if (!where.empty()) {
            out += " at (";
            for (std::size_t i = 0; i < where.size(); ++i) out += (i ? ", " : "") + std::to_string(where[i]);
            out += ")";
        }
        return out;
    }
};

inline constexpr double kStochasticTol = 1e-12;

/// Checks every structural and stochastic invariant; reports the first violation.
inline ValidationReport validate_game(const Game& g) {
    if (g.num_states < 1) return ValidationReport::fail("num_states must be >= 1");
    if (g.actions.num_agents() < 1) return ValidationReport::fail("num_agents must be >= 1");
    if (!(g.gamma >= 0.0 && g.gamma < 1.0)) return ValidationReport::fail("discount outside [0, 1)");
    const Index S = g.num_states, J = g.num_joint();
    if (g.initial_dist.size() != S) return ValidationReport::fail("initial_dist has wrong length");
    if (g.reward.rows() != S || g.reward.cols() != J) return ValidationReport::fail("reward has wrong shape");
    if (g.transition.rows() != S * J || g.transition.cols() != S)
        return ValidationReport::fail("transition has wrong shape");

    double rho_sum = 0.0;
    for (Index s = 0; s < S; ++s) {
        if (!(g.initial_dist[s] >= 0.0)) return ValidationReport::fail("initial_dist entry negative", {s});
        rho_sum += g.initial_dist[s];
    }
    if (std::abs(rho_sum - 1.0) > kStochasticTol) return ValidationReport::fail("initial_dist not normalized");

    for (Index s = 0; s < S; ++s) {
        for (Index a = 0; a < J; ++a) {
            const double r = g.reward(s, a);
            if (!(r >= 0.0 && r <= 1.0)) return ValidationReport::fail("reward outside [0, 1]", {s, a});
            double sum = 0.0;
            for (Index t = 0; t < S; ++t) {
                const double p = g.transition(s * J + a, t);
                if (!(p >= 0.0)) return ValidationReport::fail("negative transition probability", {s, a, t});
                sum += p;
            }
            if (std::abs(sum - 1.0) > kStochasticTol) return ValidationReport::fail("row not stochastic", {s, a});
        }
    }
    return {};
}

inline void check_size(int num_states, const ActionIndexer& actions, Index cap = kDefaultSizeCap) {
    const Index sa = static_cast<Index>(num_states) * actions.joint_count();
    if (sa > cap)
        throw SizeError("game size |S|*|A| = " + std::to_string(sa) + " exceeds cap " + std::to_string(cap));
    if (sa * num_states > kTransitionEntryCap)
        throw SizeError("transition table with " + std::to_string(sa * num_states) + " entries exceeds cap");
}

enum class RewardMode { Dense, Sparse };

struct GameGenSpec {
    std::uint64_t seed = 0;
    int num_states = 3;
    std::vector<int> actions_per_agent{2, 2};
    double gamma = 0.9;
    RewardMode reward_mode = RewardMode::Dense;
    /// Uniform component mixed into every transition row.
    double ergodicity_floor = 0.05;
    Index size_cap = kDefaultSizeCap;
};

/// Seeded random game. Rows are Exp(1) weights normalized and mixed with
/// the uniform floor, so every entry is >= kappa / |S|.
inline Game random_game(const GameGenSpec& spec) {
    if (spec.num_states < 1) throw ConfigError("num_states must be >= 1");
    if (!(spec.gamma >= 0.0 && spec.gamma < 1.0)) throw ConfigError("gamma must lie in [0, 1)");
    if (!(spec.ergodicity_floor >= 0.0 && spec.ergodicity_floor < 1.0))
        throw ConfigError("ergodicity_floor must lie in [0, 1)");
    ActionIndexer actions(spec.actions_per_agent);
    check_size(spec.num_states, actions, spec.size_cap);

    Rng rng = make_rng(spec.seed);
    Game g;
    g.num_states = spec.num_states;
    g.actions = actions;
    g.gamma = spec.gamma;
    const Index S = g.num_states, J = g.num_joint();
    g.initial_dist = Eigen::VectorXd::Constant(S, 1.0 / static_cast<double>(S));
    g.reward.resize(S, J);
    g.transition.resize(S * J, S);

    const double kappa = spec.ergodicity_floor;
    const double floor = kappa / static_cast<double>(S);
    Eigen::VectorXd w(S);
    for (Index row = 0; row < S * J; ++row) {
        for (Index t = 0; t < S; ++t) w[t] = standard_exponential(rng);
        w /= w.sum();
        for (Index t = 0; t < S; ++t) g.transition(row, t) = floor + (1.0 - kappa) * w[t];
    }

    bool any_positive = false;
    for (Index s = 0; s < S; ++s) {
        for (Index a = 0; a < J; ++a) {
            double r = unit_double(rng);
            if (spec.reward_mode == RewardMode::Sparse) {
                const double keep = unit_double(rng);
                r = keep < 0.1 ? 0.5 + 0.5 * r : 0.0;
            }
            g.reward(s, a) = r;
            any_positive = any_positive || r > 0.0;
        }
    }
    if (!any_positive) g.reward(static_cast<Index>(uniform_index(rng, S)), static_cast<Index>(uniform_index(rng, J))) = 1.0;
    return g;
}

// ---------------------------------------------------------------------------
// JSON (de)serialization
// ---------------------------------------------------------------------------

inline nlohmann::json game_to_json(const Game& g) {
    using nlohmann::json;
    const Index S = g.num_states, J = g.num_joint();
    json j;
    j["num_agents"] = g.num_agents();
    j["num_states"] = g.num_states;
    j["actions_per_agent"] = g.actions.actions();
    j["gamma"] = g.gamma;
    j["initial_dist"] = std::vector<double>(g.initial_dist.data(), g.initial_dist.data() + S);
    json reward = json::array();
    json transition = json::array();
    for (Index s = 0; s < S; ++s) {
        json rrow = json::array();
        json trow = json::array();
        for (Index a = 0; a < J; ++a) {
            rrow.push_back(g.reward(s, a));
            json dist = json::array();
            for (Index t = 0; t < S; ++t) dist.push_back(g.transition(s * J + a, t));
            trow.push_back(std::move(dist));
        }
        reward.push_back(std::move(rrow));
        transition.push_back(std::move(trow));
    }
    j["reward"] = std::move(reward);
    j["transition"] = std::move(transition);
    return j;
}

inline std::string serialize_game(const Game& g) { return game_to_json(g).dump(); }

namespace detail {

inline const nlohmann::json& require(const nlohmann::json& j, const char* key, const std::string& path) {
    if (!j.is_object()) throw ParseError("expected an object", path.empty() ? "/" : path);
    auto it = j.find(key);
    if (it == j.end()) throw ParseError(std::string("missing field '") + key + "'", path.empty() ? "/" : path);
    return *it;
}

inline double as_number(const nlohmann::json& j, const std::string& path) {
    if (!j.is_number()) throw ParseError("expected a number", path);
    return j.get<double>();
}

inline int as_int(const nlohmann::json& j, const std::string& path) {
    if (!j.is_number_integer()) throw ParseError("expected an integer", path);
    return j.get<int>();
}

inline const nlohmann::json& as_array(const nlohmann::json& j, std::size_t size, const std::string& path) {
    if (!j.is_array()) throw ParseError("expected an array", path);
    if (j.size() != size)
        throw ParseError("expected " + std::to_string(size) + " elements, found " + std::to_string(j.size()), path);
    return j;
}

} // namespace detail

inline Game game_from_json(const nlohmann::json& j) {
    using detail::as_array;
    using detail::as_int;
    using detail::as_number;
    using detail::require;
    static const char* kKeys[] = {"num_agents", "num_states", "actions_per_agent", "gamma",
                                  "initial_dist", "reward", "transition"};
    if (!j.is_object()) throw ParseError("game must be a JSON object", "/");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* k : kKeys) known = known || it.key() == k;
        if (!known) throw ParseError("unknown field '" + it.key() + "'", "/");
    }

    const int n_agents = as_int(require(j, "num_agents", ""), "/num_agents");
    const int n_states = as_int(require(j, "num_states", ""), "/num_states");
    if (n_agents < 1) throw ParseError("num_agents must be >= 1", "/num_agents");
    if (n_states < 1) throw ParseError("num_states must be >= 1", "/num_states");
    const auto& acts = as_array(require(j, "actions_per_agent", ""), static_cast<std::size_t>(n_agents),
                                "/actions_per_agent");
    std::vector<int> counts;
    for (std::size_t i = 0; i < acts.size(); ++i) {
        counts.push_back(as_int(acts[i], "/actions_per_agent/" + std::to_string(i)));
        if (counts.back() < 1) throw ParseError("action count must be >= 1", "/actions_per_agent/" + std::to_string(i));
    }

    Game g;
    g.num_states = n_states;
    g.actions = ActionIndexer(counts);
    check_size(n_states, g.actions);
    g.gamma = as_number(require(j, "gamma", ""), "/gamma");
    const Index S = n_states, J = g.num_joint();

    const auto& rho = as_array(require(j, "initial_dist", ""), static_cast<std::size_t>(S), "/initial_dist");
    g.initial_dist.resize(S);
    for (Index s = 0; s < S; ++s) g.initial_dist[s] = as_number(rho[s], "/initial_dist/" + std::to_string(s));

    const auto& rew = as_array(require(j, "reward", ""), static_cast<std::size_t>(S), "/reward");
    const auto& tr = as_array(require(j, "transition", ""), static_cast<std::size_t>(S), "/transition");
    g.reward.resize(S, J);
    g.transition.resize(S * J, S);
    for (Index s = 0; s < S; ++s) {
        const std::string rp = "/reward/" + std::to_string(s);
        const std::string tp = "/transition/" + std::to_string(s);
        const auto& rrow = as_array(rew[s], static_cast<std::size_t>(J), rp);
        const auto& trow = as_array(tr[s], static_cast<std::size_t>(J), tp);
        for (Index a = 0; a < J; ++a) {
            g.reward(s, a) = as_number(rrow[a], rp + "/" + std::to_string(a));
            const std::string dp = tp + "/" + std::to_string(a);
            const auto& dist = as_array(trow[a], static_cast<std::size_t>(S), dp);
            for (Index t = 0; t < S; ++t) g.transition(s * J + a, t) = as_number(dist[t], dp + "/" + std::to_string(t));
        }
    }
    return g;
}

/// Parses and validates a game file. Throws ParseError on malformed JSON or
/// schema mismatch, and ConfigError if the game violates an invariant.
inline Game deserialize_game(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("malformed JSON: ") + e.what(), "byte " + std::to_string(e.byte));
    }
    Game g = game_from_json(j);
    if (auto report = validate_game(g); !report) throw ConfigError("invalid game: " + report.describe());
    return g;
}

} // namespace marl
