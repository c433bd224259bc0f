#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "marl/error.hpp"

namespace marl {

using Index = Eigen::Index;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Mixed-radix indexing of joint actions and agent prefixes.
///
/// Joint actions are enumerated lexicographically with agent 0 most
/// significant. A prefix of length m (actions of agents 0..m-1) is indexed
/// the same way, so the prefix of joint index j is j / suffix_count(m) and
/// extending prefix p by action a of agent m gives p * |A^m| + a.
class ActionIndexer {
public:
    ActionIndexer() = default;

    explicit ActionIndexer(std::vector<int> actions) : actions_(std::move(actions)) {
        if (actions_.empty()) throw ConfigError("at least one agent is required");
        prefix_.assign(actions_.size() + 1, 1);
        for (std::size_t i = 0; i < actions_.size(); ++i) {
            if (actions_[i] < 1) throw ConfigError("agent " + std::to_string(i) + " has no actions");
            prefix_[i + 1] = prefix_[i] * actions_[i];
            if (prefix_[i + 1] > (Index{1} << 40)) throw SizeError("joint action space too large");
        }
    }

    int num_agents() const { return static_cast<int>(actions_.size()); }
    int num_actions(int agent) const { return actions_.at(agent); }
    const std::vector<int>& actions() const { return actions_; }

    /// Number of distinct prefixes a^{1:m} (1 for m = 0).
    Index prefix_count(int m) const { return prefix_.at(m); }
    Index joint_count() const { return prefix_.back(); }
    /// Number of completions of a length-m prefix.
    Index suffix_count(int m) const { return prefix_.back() / prefix_.at(m); }

    Index extend(Index prefix, int m, int action) const { return prefix * actions_[m] + action; }
    Index truncate(Index joint, int m) const { return joint / suffix_count(m); }
    /// Index of the complement (agents m..N-1) within a joint action.
    Index complement(Index joint, int m) const { return joint % suffix_count(m); }
    Index combine(Index prefix, int m, Index complement) const { return prefix * suffix_count(m) + complement; }

    std::vector<int> decode(Index prefix, int m) const {
        std::vector<int> out(static_cast<std::size_t>(m));
        for (int i = m - 1; i >= 0; --i) {
            out[i] = static_cast<int>(prefix % actions_[i]);
            prefix /= actions_[i];
        }
        return out;
    }

    Index encode(const std::vector<int>& acts) const {
        if (acts.size() > actions_.size()) throw std::out_of_range("prefix longer than agent count");
        Index p = 0;
        for (std::size_t i = 0; i < acts.size(); ++i) {
            if (acts[i] < 0 || acts[i] >= actions_[i])
                throw std::out_of_range("action " + std::to_string(acts[i]) + " invalid for agent " + std::to_string(i));
            p = p * actions_[i] + acts[i];
        }
        return p;
    }

    bool operator==(const ActionIndexer& o) const { return actions_ == o.actions_; }

private:
    std::vector<int> actions_;
    std::vector<Index> prefix_;
};

} // namespace marl
