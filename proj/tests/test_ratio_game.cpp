#include <gtest/gtest.h>

#include "marl/ratio_game.hpp"
#include "marl/rng.hpp"

using namespace marl;

namespace {

RatioGame symmetric_game() {
    RatioGame g;
    g.R << 0.3, 0.7, 0.9, 0.2;
    g.S = g.R;
    return g;
}

/// V as a function of the four logits, for finite differences.
double value_of(const Eigen::Vector2d& lx, const Eigen::Vector2d& ly, const RatioGame& g) {
    return ratio_value(softmax2(lx), softmax2(ly), g);
}

} // namespace

TEST(RatioValue, ReferenceMatrices) {
    const auto g = RatioGame::reference();
    EXPECT_DOUBLE_EQ(ratio_value({1, 0}, {1, 0}, g), 1.0);
    // 0.5 * 1 + 0.5 * (-0.5) over 0.5 * 1 + 0.5 * 0.1.
    EXPECT_NEAR(ratio_value({0.5, 0.5}, {1, 0}, g), 0.25 / 0.55, 1e-15);
    EXPECT_NEAR(ratio_value({0.5, 0.5}, {1, 0}, g), 0.4545, 1e-4);
}

TEST(RatioValue, InvariantUnderJointScaling) {
    auto g = RatioGame::reference();
    auto h = g;
    h.R *= 0.3;
    h.S *= 0.3;
    Rng rng = make_rng(1);
    for (int k = 0; k < 50; ++k) {
        const double x = unit_double(rng), y = unit_double(rng);
        EXPECT_NEAR(ratio_value_xy(x, y, g), ratio_value_xy(x, y, h), 1e-12);
    }
}

TEST(RatioValue, InvariantUnderConsistentPermutation) {
    const auto g = RatioGame::reference();
    Eigen::Matrix2d P;
    P << 0, 1, 1, 0;
    RatioGame h{P * g.R * P, P * g.S * P};
    Rng rng = make_rng(2);
    for (int k = 0; k < 50; ++k) {
        const double x = unit_double(rng), y = unit_double(rng);
        EXPECT_NEAR(ratio_value_xy(x, y, g), ratio_value_xy(1 - x, 1 - y, h), 1e-12);
    }
    const auto a = brute_force_optimum(g, 1e-2), b = brute_force_optimum(h, 1e-2);
    EXPECT_NEAR(a.x, 1 - b.x, 1e-9);
    EXPECT_NEAR(a.y, 1 - b.y, 1e-9);
}

TEST(RatioGradients, MatchFiniteDifferences) {
    const auto g = RatioGame::reference();
    Rng rng = make_rng(3);
    const double h = 1e-6;
    for (int k = 0; k < 1000; ++k) {
        Eigen::Vector2d lx(2 * standard_normal(rng), 2 * standard_normal(rng));
        Eigen::Vector2d ly(2 * standard_normal(rng), 2 * standard_normal(rng));
        const auto gr = ratio_gradients(lx, ly, g);
        for (int c = 0; c < 2; ++c) {
            const Eigen::Vector2d e = Eigen::Vector2d::Unit(c) * h;
            const double fx = (value_of(lx + e, ly, g) - value_of(lx - e, ly, g)) / (2 * h);
            const double fy = (value_of(lx, ly + e, g) - value_of(lx, ly - e, g)) / (2 * h);
            EXPECT_NEAR(gr.x[c], fx, 1e-6 * std::max(1.0, std::abs(fx)));
            EXPECT_NEAR(gr.y[c], fy, 1e-6 * std::max(1.0, std::abs(fy)));
        }
    }
}

TEST(RatioGradients, VanishAtStationaryPoint) {
    const auto g = RatioGame::reference();
    const auto sp = locate_stationary_point(g);
    const auto gr = ratio_gradients(logits_for(sp.x), logits_for(sp.y), g);
    EXPECT_LE(gr.x.norm(), 1e-8);
    EXPECT_LE(gr.y.norm(), 1e-8);
}

TEST(RatioGradients, SymmetricGameIsFlat) {
    const auto g = symmetric_game();
    Rng rng = make_rng(4);
    for (int k = 0; k < 20; ++k) {
        Eigen::Vector2d lx(standard_normal(rng), standard_normal(rng)), ly(standard_normal(rng), standard_normal(rng));
        EXPECT_NEAR(value_of(lx, ly, g), 1.0, 1e-14);
        const auto gr = ratio_gradients(lx, ly, g);
        EXPECT_LE(gr.x.norm() + gr.y.norm(), 1e-14);
    }
}

TEST(RatioRuns, ZeroGradientIsStationary) {
    const auto g = symmetric_game();
    const Eigen::Vector2d lx(0.3, -0.2), ly(1.0, 0.5);
    for (const auto& run : {independent_pg_run(g, lx, ly, 0.05, 200), sequential_run(g, lx, ly, 0.05, 200)}) {
        EXPECT_EQ(run.lx, lx);
        EXPECT_EQ(run.ly, ly);
        EXPECT_EQ(run.rows.size(), 201u);
    }
}

TEST(RatioRuns, Deterministic) {
    const auto g = RatioGame::reference();
    const auto a = independent_pg_run(g, {0.1, 0.4}, {-0.3, 0.2}, 0.05, 300);
    const auto b = independent_pg_run(g, {0.1, 0.4}, {-0.3, 0.2}, 0.05, 300);
    for (std::size_t i = 0; i < a.rows.size(); ++i) EXPECT_EQ(a.rows[i].V, b.rows[i].V);
}

TEST(RatioRuns, ProbabilitiesStayInterior) {
    const auto g = RatioGame::reference();
    for (const auto& run : {independent_pg_run(g, {0, 0}, {0, 0}, 0.5, 2000), sequential_run(g, {0, 0}, {0, 0}, 0.5, 2000)})
        for (const auto& r : run.rows) {
            EXPECT_GT(r.x, 0.0);
            EXPECT_LT(r.x, 1.0);
            EXPECT_GT(r.y, 0.0);
            EXPECT_LT(r.y, 1.0);
        }
}

TEST(RatioRuns, SequentialStepUsesUpdatedFirstPlayer) {
    const auto g = RatioGame::reference();
    const Eigen::Vector2d lx(0.2, -0.1), ly(0.4, 0.0);
    const auto run = sequential_run(g, lx, ly, 0.1, 1);
    const Eigen::Vector2d lx1 = lx + 0.1 * ratio_gradients(lx, ly, g).x;
    const Eigen::Vector2d ly1 = ly + 0.1 * ratio_gradients(lx1, ly, g).y;
    EXPECT_EQ(run.lx, lx1);
    EXPECT_EQ(run.ly, ly1);
}

TEST(RatioRuns, SequentialReachesOptimumFromUniform) {
    const auto g = RatioGame::reference();
    const auto opt = brute_force_optimum(g, 1e-3);
    const auto run = sequential_run(g, {0, 0}, {0, 0}, kDefaultRatioStep, 5000);
    const int hit = run.iterations_to(opt.V, 1e-2);
    EXPECT_GE(hit, 0);
    EXPECT_LE(hit, 5000);
}

TEST(RatioRuns, IndependentStallsAtStationaryPoint) {
    const auto g = RatioGame::reference();
    const auto sp = locate_stationary_point(g);
    const auto run = independent_pg_run(g, logits_for(sp.x), logits_for(sp.y), kDefaultRatioStep, 1000);
    EXPECT_LT(run.final_value() - run.rows.front().V, 1e-3);
}

TEST(BruteForce, FlatGame) {
    const auto opt = brute_force_optimum(symmetric_game(), 1e-2);
    EXPECT_NEAR(opt.V, 1.0, 1e-14);
}

TEST(BruteForce, ResolutionRefinementAgrees) {
    const auto g = RatioGame::reference();
    EXPECT_NEAR(brute_force_optimum(g, 1e-3).V, brute_force_optimum(g, 1e-4).V, 1e-3);
    RatioGame h;
    h.R << 0.2, 0.9, 0.6, 0.1;
    h.S << 0.5, 0.3, 0.8, 0.9;
    EXPECT_NEAR(brute_force_optimum(h, 1e-3).V, brute_force_optimum(h, 1e-4).V, 1e-3);
}

TEST(BruteForce, ReferenceOptimumIsCorner) {
    // At x = y = 0 both players play their second action: V = 1 / 0.1.
    const auto opt = brute_force_optimum(RatioGame::reference(), 1e-3);
    EXPECT_NEAR(opt.V, 10.0, 1e-12);
    EXPECT_EQ(opt.x, 0.0);
    EXPECT_EQ(opt.y, 0.0);
}

TEST(StationaryPoint, ReferenceSaddle) {
    const auto sp = locate_stationary_point(RatioGame::reference());
    // dV/dy = 0 forces x = 0.75; dV/dx = 0 then gives y = 0.95 / 1.55.
    EXPECT_NEAR(sp.x, 0.75, 1e-10);
    EXPECT_NEAR(sp.y, 0.95 / 1.55, 1e-10);
    EXPECT_NEAR(sp.V, 0.8064516129, 1e-9);
    EXPECT_LE(sp.grad_norm, 1e-12);
}

TEST(RatioGame, RejectsBadStoppingMatrix) {
    auto g = RatioGame::reference();
    g.S(0, 0) = 0.0;
    EXPECT_THROW(g.validate(), ConfigError);
    EXPECT_THROW(logits_for(1.0), ConfigError);
}
