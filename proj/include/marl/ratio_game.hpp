#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "marl/error.hpp"

namespace marl {

// Two-player ratio game V = x^T R y / x^T S y with softmax policies.
// Coordinates: x and y are the probabilities of each player's FIRST action,
// so pi_x = (x, 1 - x) and pi_y = (y, 1 - y).

struct RatioGame {
    Eigen::Matrix2d R;
    Eigen::Matrix2d S;

    static RatioGame reference() {
        RatioGame g;
        g.R << 1.0, 0.5, -0.5, 1.0;
        g.S << 1.0, 1.0, 0.1, 0.1;
        return g;
    }

    void validate() const {
        if (!R.allFinite() || !S.allFinite()) throw ConfigError("ratio game matrices must be finite");
        if (S.minCoeff() <= 0.0 || S.maxCoeff() > 1.0) throw ConfigError("stopping matrix entries must lie in (0, 1]");
    }
};

inline Eigen::Vector2d softmax2(const Eigen::Vector2d& logits) {
    const double m = logits.maxCoeff();
    Eigen::Vector2d e((logits.array() - m).exp());
    return e / e.sum();
}

/// Logits whose softmax puts probability p on the first action.
inline Eigen::Vector2d logits_for(double p) {
    if (!(p > 0.0 && p < 1.0)) throw ConfigError("probability must lie strictly inside (0, 1)");
    return {std::log(p), std::log1p(-p)};
}

inline double ratio_value(const Eigen::Vector2d& px, const Eigen::Vector2d& py, const RatioGame& g) {
    return px.dot(g.R * py) / px.dot(g.S * py);
}

inline double ratio_value_xy(double x, double y, const RatioGame& g) {
    return ratio_value({x, 1.0 - x}, {y, 1.0 - y}, g);
}

/// (dV/dx, dV/dy) in probability coordinates.
inline Eigen::Vector2d ratio_partials(double x, double y, const RatioGame& g) {
    const Eigen::Vector2d px(x, 1.0 - x), py(y, 1.0 - y), dir(1.0, -1.0);
    const double n = px.dot(g.R * py), d = px.dot(g.S * py);
    const double nx = dir.dot(g.R * py), dx = dir.dot(g.S * py);
    const double ny = px.dot(g.R * dir), dy = px.dot(g.S * dir);
    return {(nx * d - n * dx) / (d * d), (ny * d - n * dy) / (d * d)};
}

struct RatioGradients {
    Eigen::Vector2d x;
    Eigen::Vector2d y;
};

/// Gradients of V with respect to each player's logits.
inline RatioGradients ratio_gradients(const Eigen::Vector2d& lx, const Eigen::Vector2d& ly, const RatioGame& g) {
    const Eigen::Vector2d px = softmax2(lx), py = softmax2(ly);
    const double n = px.dot(g.R * py), d = px.dot(g.S * py);
    const Eigen::Vector2d gpx = (g.R * py * d - g.S * py * n) / (d * d);
    const Eigen::Vector2d gpy = (g.R.transpose() * px * d - g.S.transpose() * px * n) / (d * d);
    auto jac = [](const Eigen::Vector2d& p) -> Eigen::Matrix2d {
        Eigen::Matrix2d J = p.asDiagonal();
        return J - p * p.transpose();
    };
    return {jac(px) * gpx, jac(py) * gpy};
}

struct RatioTraceRow {
    int iter = 0;
    double x = 0.0;
    double y = 0.0;
    double V = 0.0;
    double grad_norm_x = 0.0;
    double grad_norm_y = 0.0;
};

struct RatioRun {
    std::vector<RatioTraceRow> rows;
    Eigen::Vector2d lx;
    Eigen::Vector2d ly;

    double final_value() const { return rows.back().V; }
    /// First iteration whose value is within `tol` of `target`, or -1.
    int iterations_to(double target, double tol) const {
        for (const auto& r : rows)
            if (r.V >= target - tol) return r.iter;
        return -1;
    }
};

inline constexpr double kDefaultRatioStep = 0.05;

namespace detail {

inline RatioTraceRow ratio_row(int iter, const Eigen::Vector2d& lx, const Eigen::Vector2d& ly, const RatioGame& g) {
    const Eigen::Vector2d px = softmax2(lx), py = softmax2(ly);
    const auto gr = ratio_gradients(lx, ly, g);
    return {iter, px[0], py[0], ratio_value(px, py, g), gr.x.norm(), gr.y.norm()};
}

inline RatioRun ratio_ascent(const RatioGame& g, Eigen::Vector2d lx, Eigen::Vector2d ly, double step, int iters,
                             bool sequential) {
    g.validate();
    if (iters < 0) throw ConfigError("iteration count must be >= 0");
    RatioRun run;
    run.rows.reserve(static_cast<std::size_t>(iters) + 1);
    run.rows.push_back(ratio_row(0, lx, ly, g));
    for (int t = 1; t <= iters; ++t) {
        auto gr = ratio_gradients(lx, ly, g);
        lx += step * gr.x;
        // The second player sees the first player's fresh policy.
        if (sequential) gr = ratio_gradients(lx, ly, g);
        ly += step * gr.y;
        run.rows.push_back(ratio_row(t, lx, ly, g));
    }
    run.lx = lx;
    run.ly = ly;
    return run;
}

} // namespace detail

/// Simultaneous gradient ascent: both players step on gradients at the same point.
inline RatioRun independent_pg_run(const RatioGame& g, const Eigen::Vector2d& lx, const Eigen::Vector2d& ly,
                                   double step = kDefaultRatioStep, int iters = 1000) {
    return detail::ratio_ascent(g, lx, ly, step, iters, false);
}

/// Player x steps first, then player y steps against the updated x.
inline RatioRun sequential_run(const RatioGame& g, const Eigen::Vector2d& lx, const Eigen::Vector2d& ly,
                               double step = kDefaultRatioStep, int iters = 1000) {
    return detail::ratio_ascent(g, lx, ly, step, iters, true);
}

struct RatioPoint {
    double x = 0.0;
    double y = 0.0;
    double V = 0.0;
    double grad_norm = 0.0;
};

/// Grid search over [0, 1]^2 followed by a shrinking-step coordinate search.
inline RatioPoint brute_force_optimum(const RatioGame& g, double grid_step = 1e-3) {
    g.validate();
    if (!(grid_step > 0.0) || grid_step > 1.0) throw ConfigError("grid step must lie in (0, 1]");
    const long cells = static_cast<long>(std::ceil(1.0 / grid_step));
    RatioPoint best{0.0, 0.0, ratio_value_xy(0.0, 0.0, g), 0.0};
    for (long i = 0; i <= cells; ++i) {
        const double x = std::min(1.0, i * grid_step);
        for (long j = 0; j <= cells; ++j) {
            const double y = std::min(1.0, j * grid_step);
            const double v = ratio_value_xy(x, y, g);
            if (v > best.V) best = {x, y, v, 0.0};
        }
    }
    for (double h = grid_step; h > 1e-12; h *= 0.5) {
        bool moved = true;
        while (moved) {
            moved = false;
            for (const auto& [dx, dy] : {std::pair{h, 0.0}, {-h, 0.0}, {0.0, h}, {0.0, -h}}) {
                const double x = std::clamp(best.x + dx, 0.0, 1.0), y = std::clamp(best.y + dy, 0.0, 1.0);
                const double v = ratio_value_xy(x, y, g);
                if (v > best.V) {
                    best = {x, y, v, 0.0};
                    moved = true;
                }
            }
        }
    }
    best.grad_norm = ratio_partials(best.x, best.y, g).norm();
    return best;
}

/// Interior point where both partials of V vanish: the grid minimizer of
/// ||grad V||, polished by Newton steps on the gradient.
inline RatioPoint locate_stationary_point(const RatioGame& g, double grid_step = 1e-3) {
    g.validate();
    RatioPoint best;
    best.grad_norm = std::numeric_limits<double>::infinity();
    const long cells = static_cast<long>(std::ceil(1.0 / grid_step));
    for (long i = 1; i < cells; ++i)
        for (long j = 1; j < cells; ++j) {
            const double x = i * grid_step, y = j * grid_step;
            const double n = ratio_partials(x, y, g).norm();
            if (n < best.grad_norm) best = {x, y, 0.0, n};
        }
    Eigen::Vector2d z(best.x, best.y);
    const double h = 1e-6;
    for (int it = 0; it < 50; ++it) {
        const Eigen::Vector2d grad = ratio_partials(z[0], z[1], g);
        if (grad.norm() < 1e-14) break;
        Eigen::Matrix2d H;
        H.col(0) = (ratio_partials(z[0] + h, z[1], g) - ratio_partials(z[0] - h, z[1], g)) / (2 * h);
        H.col(1) = (ratio_partials(z[0], z[1] + h, g) - ratio_partials(z[0], z[1] - h, g)) / (2 * h);
        const Eigen::Vector2d next = z - H.fullPivLu().solve(grad);
        if (!next.allFinite() || next.minCoeff() <= 0.0 || next.maxCoeff() >= 1.0) break;
        z = next;
    }
    best.x = z[0];
    best.y = z[1];
    best.V = ratio_value_xy(z[0], z[1], g);
    best.grad_norm = ratio_partials(z[0], z[1], g).norm();
    return best;
}

} // namespace marl
