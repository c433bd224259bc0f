#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "marl/mappo.hpp"
#include "oracles.hpp"

using namespace marl;

namespace {

Game fixture_game() {
    std::ifstream in(MARL_FIXTURE_DIR "/two_agent_one_state.json");
    std::stringstream ss;
    ss << in.rdbuf();
    return deserialize_game(ss.str());
}

std::vector<Index> inputs_of(const std::vector<SigmaSample>& xs) {
    std::vector<Index> out;
    for (const auto& x : xs) out.push_back(x.input);
    return out;
}

/// Least-squares fixture: inputs drawn from a fixed law over `d` one-hot
/// coordinates, targets q = mean[input] + noise.
struct LsqFixture {
    Eigen::VectorXd prob, mean, noise_sd;
    std::vector<Index> inputs;
    std::vector<double> q;

    LsqFixture(int d, long T, std::uint64_t seed) : prob(d), mean(d), noise_sd(d) {
        Rng rng = make_rng(seed);
        for (int i = 0; i < d; ++i) {
            prob[i] = 0.2 + unit_double(rng);
            mean[i] = 5.0 * unit_double(rng);
            noise_sd[i] = 0.5 * unit_double(rng);
        }
        prob /= prob.sum();
        for (long t = 0; t < T; ++t) {
            const Index i = sample_categorical(rng, prob);
            inputs.push_back(i);
            q.push_back(std::clamp(mean[i] + noise_sd[i] * standard_normal(rng), 0.0, 10.0));
        }
    }

    /// Population loss with theta_k = 0 and clipped-free Gaussian targets
    /// (clipping never triggers: mean in [0, 5], sd <= 0.5 keeps q inside
    /// [0, 10] with overwhelming probability).
    double loss(const Eigen::VectorXd& theta, double beta) const {
        double acc = 0.0;
        for (Index i = 0; i < prob.size(); ++i) {
            const double bias = theta[i] - mean[i] / beta;
            acc += prob[i] * (bias * bias + std::pow(noise_sd[i] / beta, 2));
        }
        return acc;
    }
    double optimum(double beta) const { return loss(mean / beta, beta); }
};

} // namespace

TEST(SampleSigma, SingleStateSamplesShareState) {
    const Game g = oracle::game(1, 1, {2, 3});
    Rng rng = make_rng(0);
    for (const auto& x : sample_sigma_k(g, FactorizedPolicy::uniform(g), 1, 200, rng)) EXPECT_EQ(x.s, 0);
}

TEST(SampleSigma, UniformPolicyActionFrequenciesWithinBands) {
    const Game g = oracle::game(2, 3, {3, 2});
    Rng rng = make_rng(1);
    const long T = 10'000;
    const auto xs = sample_sigma_k(g, FactorizedPolicy::uniform(g), 1, T, rng);
    std::vector<double> first(3, 0.0), second(2, 0.0);
    for (const auto& x : xs) {
        first[x.prefix] += 1.0;
        second[x.action] += 1.0;
    }
    for (double c : first) EXPECT_LE(std::abs(c - T / 3.0), 3.0 * std::sqrt(T * (1.0 / 3) * (2.0 / 3)));
    for (double c : second) EXPECT_LE(std::abs(c - T / 2.0), 3.0 * std::sqrt(T * 0.25));
}

TEST(SampleSigma, FirstAgentHasNoPrefix) {
    const Game g = oracle::game(3, 3, {2, 2});
    Rng rng = make_rng(2);
    for (const auto& x : sample_sigma_k(g, oracle::random_policy(g, 1), 0, 500, rng)) {
        EXPECT_EQ(x.prefix, 0);
        EXPECT_EQ(x.input, x.s * 2 + x.action);
    }
}

TEST(SampleSigma, StatesFollowStationaryLaw) {
    const Game g = oracle::game(4, 4, {2, 2});
    const auto pi = oracle::random_policy(g, 3);
    const auto nu = stationary_distribution(g, pi).state;
    for (SamplerKind kind : {SamplerKind::ExactStationary, SamplerKind::Simulated}) {
        Rng rng = make_rng(4);
        Eigen::VectorXd freq = Eigen::VectorXd::Zero(4);
        const auto xs = sample_sigma_k(g, pi, 1, 10'000, rng, kind);
        for (const auto& x : xs) freq[x.s] += 1.0 / xs.size();
        EXPECT_LE(oracle::total_variation(freq, nu), 0.03);
    }
}

TEST(EstimateQ, ExactKindMatchesOracle) {
    const Game g = oracle::game(5, 3, {2, 3});
    const auto pi = oracle::random_policy(g, 4);
    const auto qs = all_multi_agent_q(g, pi);
    Rng rng = make_rng(5);
    const auto xs = sample_sigma_k(g, pi, 1, 50, rng);
    const auto est = estimate_q(g, pi, 1, xs, EstimatorKind::Exact, qs[2].values, {}, rng);
    EXPECT_EQ(est.xi, 0.0);
    EXPECT_DOUBLE_EQ(est.bound, 10.0);
    for (std::size_t t = 0; t < xs.size(); ++t) EXPECT_EQ(est.values[t], qs[2].values(xs[t].s, xs[t].prefix * 3 + xs[t].action));
}

TEST(EstimateQ, DeterministicUnitRewardGivesTruncatedGeometricSum) {
    Game g = oracle::game(6, 1, {2, 2});
    g.reward.setOnes();
    const auto pi = FactorizedPolicy::uniform(g);
    Rng rng = make_rng(6);
    const std::vector<SigmaSample> xs{{0, 1, 0, 2}};
    McSettings mc{25, 3};
    const auto est = estimate_q(g, pi, 1, xs, EstimatorKind::MonteCarlo, all_multi_agent_q(g, pi)[2].values, mc, rng);
    EXPECT_NEAR(est.values[0], (1.0 - std::pow(0.9, 25)) / 0.1, 1e-12);
}

TEST(EstimateQ, MonteCarloBiasWithinTruncationBound) {
    const Game g = oracle::game(7, 3, {2, 2}, 0.8);
    const auto pi = oracle::random_policy(g, 5);
    const auto qs = all_multi_agent_q(g, pi);
    const double eps = 0.05;
    McSettings mc{static_cast<long>(std::ceil(std::log(1.0 / eps) / (1.0 - g.gamma))), 2000};
    Rng rng = make_rng(7);
    for (int agent = 0; agent < 2; ++agent) {
        const auto xs = sample_sigma_k(g, pi, agent, 6, rng);
        const auto est = estimate_q(g, pi, agent, xs, EstimatorKind::MonteCarlo, qs[agent + 1].values, mc, rng);
        for (std::size_t t = 0; t < xs.size(); ++t) {
            const double truth = qs[agent + 1].values(xs[t].s, xs[t].prefix * 2 + xs[t].action);
            const double allowance = std::pow(g.gamma, mc.horizon) / (1.0 - g.gamma) + 4.0 * g.value_bound() / std::sqrt(2000.0) / 2.0;
            EXPECT_LE(std::abs(est.values[t] - truth), allowance);
            EXPECT_LE(est.values[t], truth + 4.0 * g.value_bound() / std::sqrt(2000.0) / 2.0);
        }
        EXPECT_GT(est.xi, 0.0);
    }
}

TEST(EstimateQ, DefaultHorizonMeetsTolerance) {
    for (double gamma : {0.5, 0.9, 0.99}) {
        const long H = default_mc_horizon(gamma, 0.1);
        EXPECT_LE(std::pow(gamma, H) / (1.0 - gamma), 0.01 + 1e-12);
    }
}

TEST(MseLoss, ZeroAtThetaKWithZeroQ) {
    const FeatureMap fm = FeatureMap::random_projection(10, 4, 1);
    const Eigen::VectorXd tk = Eigen::VectorXd::Constant(4, 0.3);
    EXPECT_EQ(mse_loss(tk, {1, 5, 7}, {0.0, 0.0, 0.0}, tk, 2.0, fm), 0.0);
}

TEST(MseLoss, MidpointConvexity) {
    const FeatureMap fm = FeatureMap::random_projection(10, 4, 2);
    Rng rng = make_rng(3);
    std::vector<Index> inputs;
    std::vector<double> q;
    for (int t = 0; t < 30; ++t) {
        inputs.push_back(static_cast<Index>(uniform_index(rng, 10)));
        q.push_back(10.0 * unit_double(rng));
    }
    const Eigen::VectorXd tk = Eigen::VectorXd::Zero(4);
    for (int trial = 0; trial < 100; ++trial) {
        Eigen::VectorXd a(4), b(4);
        for (int i = 0; i < 4; ++i) {
            a[i] = 3.0 * standard_normal(rng);
            b[i] = 3.0 * standard_normal(rng);
        }
        const double mid = mse_loss(0.5 * (a + b), inputs, q, tk, 1.5, fm);
        EXPECT_LE(mid, 0.5 * (mse_loss(a, inputs, q, tk, 1.5, fm) + mse_loss(b, inputs, q, tk, 1.5, fm)) + 1e-12);
    }
}

TEST(MseLoss, OneHotMinimizerIsPerIndexMeanAndResidualIsVariance) {
    const int d = 5;
    const double beta = 2.0;
    const FeatureMap fm = FeatureMap::one_hot(d);
    Rng rng = make_rng(9);
    Eigen::VectorXd tk(d);
    for (int i = 0; i < d; ++i) tk[i] = standard_normal(rng);
    std::vector<Index> inputs;
    std::vector<double> q;
    for (int t = 0; t < 400; ++t) {
        inputs.push_back(static_cast<Index>(uniform_index(rng, d)));
        q.push_back(10.0 * unit_double(rng));
    }
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(d), sumsq = Eigen::VectorXd::Zero(d), cnt = Eigen::VectorXd::Zero(d);
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        const double target = q[t] / beta + tk[inputs[t]];
        sum[inputs[t]] += target;
        sumsq[inputs[t]] += target * target;
        cnt[inputs[t]] += 1.0;
    }
    const Eigen::VectorXd theta = sum.cwiseQuotient(cnt);
    double within = 0.0;
    for (int i = 0; i < d; ++i) within += sumsq[i] - cnt[i] * theta[i] * theta[i];
    within /= static_cast<double>(inputs.size());
    EXPECT_NEAR(mse_loss(theta, inputs, q, tk, beta, fm), within, 1e-10);
    // Any perturbation increases the loss.
    for (int i = 0; i < d; ++i) {
        Eigen::VectorXd p = theta;
        p[i] += 1e-3;
        EXPECT_GT(mse_loss(p, inputs, q, tk, beta, fm), mse_loss(theta, inputs, q, tk, beta, fm));
    }
}

TEST(SgdImprove, ZeroTargetsFromWarmStartStayPut) {
    const FeatureMap fm = FeatureMap::random_projection(8, 3, 4);
    Eigen::VectorXd tk(3);
    tk << 1.0, -2.0, 0.5;
    const std::vector<Index> inputs{0, 3, 7, 2, 5};
    const auto r = sgd_improve(inputs, std::vector<double>(5, 0.0), tk, 1.0, 50.0, 0.9, fm, SgdInit::Warm);
    EXPECT_TRUE(r.theta == tk);
}

TEST(SgdImprove, StepSizeAndGradientBound) {
    const FeatureMap fm = FeatureMap::one_hot(3);
    const auto r = sgd_improve({0, 1, 2, 0}, {1.0, 2.0, 3.0, 4.0}, Eigen::VectorXd::Zero(3), 2.0, 5.0, 0.9, fm);
    EXPECT_DOUBLE_EQ(r.G, 2.0 * (5.0 + 1.0 / (0.1 * 2.0)));
    EXPECT_DOUBLE_EQ(r.eta, 5.0 / (r.G * 2.0));
}

TEST(SgdImprove, OneHotRateBoundAtTenThousandSteps) {
    const double beta = 1.0, R = 10.0, gamma = 0.9;
    const FeatureMap fm = FeatureMap::one_hot(6);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        LsqFixture fx(6, 10'000, seed);
        ASSERT_LE((fx.mean / beta).norm(), R);
        const auto r = sgd_improve(fx.inputs, fx.q, Eigen::VectorXd::Zero(6), beta, R, gamma, fm, SgdInit::Zero);
        EXPECT_LE(fx.loss(r.theta, beta) - fx.optimum(beta), r.G * R / std::sqrt(10'000.0));
    }
}

TEST(SgdImprove, QuadruplingStepsAtLeastHalvesGapEnvelope) {
    const double beta = 1.0, R = 10.0, gamma = 0.9;
    const FeatureMap fm = FeatureMap::one_hot(6);
    double env[2] = {0.0, 0.0};
    const long Ts[2] = {10'000, 40'000};
    for (int which = 0; which < 2; ++which)
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            LsqFixture fx(6, Ts[which], 100 + seed);
            const auto r = sgd_improve(fx.inputs, fx.q, Eigen::VectorXd::Zero(6), beta, R, gamma, fm, SgdInit::Zero);
            env[which] = std::max(env[which], fx.loss(r.theta, beta) - fx.optimum(beta));
        }
    EXPECT_LE(env[1], 0.5 * env[0]);
}

TEST(PopulationImprove, OneHotEqualsIdealUpdate) {
    const Game g = oracle::game(8, 3, {2, 2});
    const auto pi = oracle::random_policy(g, 6);
    const auto qs = all_multi_agent_q(g, pi);
    const auto nu = stationary_distribution(g, pi).state;
    Eigen::VectorXd w, q;
    detail::sigma_table(g, pi, nu, 1, qs[2].values, w, q);
    const FeatureMap fm = FeatureMap::one_hot(w.size());
    Eigen::VectorXd tk = Eigen::VectorXd::Zero(w.size());
    const auto theta = population_improve(w, q, tk, 3.0, 1e3, fm);
    for (int s = 0; s < 3; ++s)
        for (int a1 = 0; a1 < 2; ++a1) {
            const Index first = (s * 2 + a1) * 2;
            const auto ideal = ideal_update(q.segment(first, 2), tk, 3.0, fm, first);
            EXPECT_LE((policy_probs(theta, fm, first, 2) - ideal).lpNorm<Eigen::Infinity>(), 1e-10);
        }
}

TEST(TrainMappo, InitialIterateIsUniform) {
    const Game g = oracle::game(9, 3, {2, 2});
    MappoConfig cfg;
    cfg.iterations = 1;
    cfg.sgd_steps = 10;
    const auto r = train_mappo(g, cfg);
    const auto opt = optimal_joint_policy(g);
    EXPECT_NEAR(r.trace.iterate_J[0], opt.objective.evaluate(g, FactorizedPolicy::uniform(g)), 1e-12);
    EXPECT_EQ(r.trace.iterate_J.size(), 2u);
}

TEST(TrainMappo, CoordinationFixtureConverges) {
    const Game g = fixture_game();
    MappoConfig cfg;
    cfg.iterations = 300;
    cfg.solver = SolverKind::Population;
    cfg.beta = 0.1;
    cfg.radii = {1e3};
    const auto r = train_mappo(g, cfg);
    EXPECT_LE(r.trace.final_gap(), 1e-2);
}

TEST(TrainMappo, ThetaStaysInBallAndExactEstimatorHasZeroXi) {
    const Game g = oracle::game(10, 3, {2, 2});
    MappoConfig cfg;
    cfg.iterations = 40;
    cfg.sgd_steps = 200;
    cfg.radii = {2.0};
    cfg.beta = 0.05;
    const auto r = train_mappo(g, cfg);
    for (int i = 0; i < 2; ++i) EXPECT_LE(r.last.agent(i).theta.norm(), 2.0 + 1e-12);
    for (const auto& row : r.trace.rows) EXPECT_EQ(row.xi, 0.0);
    for (const auto& row : r.trace.rows) EXPECT_GE(row.gap, -1e-9);
}

TEST(TrainMappo, DeterministicUnderSeed) {
    const Game g = oracle::game(11, 3, {2, 2});
    MappoConfig cfg;
    cfg.iterations = 20;
    cfg.sgd_steps = 100;
    cfg.seed = 17;
    cfg.estimator = EstimatorKind::MonteCarlo;
    cfg.mc.repeats = 5;
    const auto a = train_mappo(g, cfg);
    const auto b = train_mappo(g, cfg);
    ASSERT_EQ(a.trace.rows.size(), b.trace.rows.size());
    for (std::size_t i = 0; i < a.trace.rows.size(); ++i) {
        EXPECT_EQ(a.trace.rows[i].J, b.trace.rows[i].J);
        EXPECT_EQ(a.trace.rows[i].xi, b.trace.rows[i].xi);
    }
    EXPECT_EQ(a.trace.output_iter, b.trace.output_iter);
    for (const auto& row : a.trace.rows) EXPECT_GT(row.xi, 0.0);
}

TEST(TrainMappo, SingleAgentReducesToMirrorDescent) {
    const Game g = oracle::game(12, 3, {3});
    MappoConfig cfg;
    cfg.iterations = 25;
    cfg.solver = SolverKind::Population;
    cfg.radii = {1e4};
    cfg.beta = 0.5;
    const auto r = train_mappo(g, cfg);
    // Direct tabular mirror descent: pi_{k+1}(a|s) ~ pi_k(a|s) exp(Q_k(s, a) / beta_k).
    const double beta_k = 0.5 * std::sqrt(25.0);
    FactorizedPolicy pi = FactorizedPolicy::uniform(g);
    for (int k = 0; k < 25; ++k) {
        const RowMatrix q = joint_q(g, policy_value(g, pi));
        for (int s = 0; s < 3; ++s) {
            Eigen::VectorXd row = pi.table(0).row(s).transpose();
            for (int a = 0; a < 3; ++a) row[a] *= std::exp(q(s, a) / beta_k);
            pi.table(0).row(s) = (row / row.sum()).transpose();
        }
    }
    EXPECT_LE((r.last.to_factorized().table(0) - pi.table(0)).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(TrainMappo, SoftMonotoneWithExactEstimates) {
    std::vector<double> worst_drop;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const Game g = oracle::game(20 + seed, 3, {2, 2});
        MappoConfig cfg;
        cfg.iterations = 60;
        cfg.solver = SolverKind::Population;
        cfg.seed = seed;
        const auto r = train_mappo(g, cfg);
        std::vector<double> diffs;
        for (std::size_t k = 1; k < r.trace.iterate_J.size(); ++k)
            diffs.push_back(r.trace.iterate_J[k] - r.trace.iterate_J[k - 1]);
        worst_drop.push_back(median(diffs));
    }
    EXPECT_GE(median(worst_drop), -1e-6);
}

TEST(TrainMappo, PopulationSolverRejectsMonteCarlo) {
    const Game g = oracle::game(13, 2, {2});
    MappoConfig cfg;
    cfg.solver = SolverKind::Population;
    cfg.estimator = EstimatorKind::MonteCarlo;
    EXPECT_THROW(train_mappo(g, cfg), ConfigError);
}

TEST(TrainMappo, DiagnosticsAreNonNegative) {
    const Game g = oracle::game(14, 3, {2, 2});
    MappoConfig cfg;
    cfg.iterations = 5;
    cfg.sgd_steps = 100;
    const auto r = train_mappo(g, cfg);
    ASSERT_EQ(r.trace.diagnostics.entries.size(), 10u);
    for (const auto& d : r.trace.diagnostics.entries) {
        EXPECT_GE(d.eps, 0.0);
        EXPECT_GE(d.phi, 0.0);
        EXPECT_GE(d.Delta, 0.0);
        EXPECT_GE(d.delta, 0.0);
        EXPECT_GT(d.G, 0.0);
    }
}

TEST(GapSlope, RecoversPowerLaw) {
    std::vector<double> gaps;
    gaps.push_back(3.0);
    for (int k = 1; k <= 500; ++k) gaps.push_back(3.0 / std::sqrt(static_cast<double>(k)));
    EXPECT_NEAR(gap_envelope_slope(gaps), -0.5, 1e-9);
}

TEST(DefaultBeta, ErrorFreeChoice) {
    const Game g = oracle::game(15, 2, {2, 2});
    EXPECT_NEAR(default_beta(g), 10.0 / std::sqrt(2.0 * std::log(2.0)), 1e-12);
}
