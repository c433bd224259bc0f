#include <gtest/gtest.h>

#include <cstdlib>
#include <sys/wait.h>

#include "marl/experiment.hpp"

using namespace marl;

namespace {

fs::path scratch_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("marl_test_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

int run_cli(const std::string& args, const std::string& env = {}) {
    const std::string cmd = env + " " MARL_CLI_PATH " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string configs_dir() { return MARL_CONFIG_DIR; }

} // namespace

TEST(Sha256, KnownVectors) {
    EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(FormatDouble, RoundTrips) {
    for (double v : {0.1, 1.0 / 3.0, 1e-300, 123456789.125, -2.5, 0.0})
        EXPECT_EQ(std::strtod(format_double(v).c_str(), nullptr), v);
    EXPECT_EQ(format_double(0.5), "0.5");
}

TEST(ParseExperiment, RejectsUnknownKeysWithPath) {
    const auto doc = json::parse(R"({"command": "run-ratio", "algorithm": {"step": 0.1, "stpe": 2}})");
    try {
        parse_experiment(doc);
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("/algorithm/stpe"), std::string::npos);
    }
    EXPECT_THROW(parse_experiment(json::parse(R"({"command": "run-ratio", "colour": 1})")), ConfigError);
}

TEST(ParseExperiment, TypeAndChoiceErrors) {
    EXPECT_THROW(parse_experiment(json::parse(R"({"command": "launch"})")), ConfigError);
    EXPECT_THROW(parse_experiment(json::parse(R"({"seed": 1})")), ConfigError);
    EXPECT_THROW(parse_experiment(json::parse(R"({"command": "run-ratio", "seed": "one"})")), ConfigError);
    EXPECT_THROW(parse_experiment(json::parse(R"({"command": "run-ratio", "seed": -1})")), ConfigError);
    EXPECT_THROW(parse_experiment(json::parse(R"({"command": "run-ratio", "repeats": 0})")), ConfigError);
    EXPECT_THROW(parse_experiment(json::parse(R"({"command": "run-ratio", "algorithm": {"method": "both-ways"}})")), ConfigError);
    EXPECT_THROW(parse_experiment(json::parse(R"({"command": "run-ratio", "algorithm": {"S": [[0, 1], [1, 1]]}})")), ConfigError);
    EXPECT_THROW(parse_experiment(json::parse(R"({"command": "run-mappo"})")), ConfigError);
    EXPECT_THROW(parse_experiment(json::parse(
                     R"({"command": "run-mappo", "game": {"generate": {"num_states": 2, "actions_per_agent": [2]}}, "algorithm": {"solver": "adam"}})")),
                 ConfigError);
    EXPECT_THROW(parse_experiment(json::parse(
                     R"({"command": "run-pessimistic", "game": {"generate": {"num_states": 2, "actions_per_agent": [2]}}, "algorithm": {"mu": {"state": [1, 0], "joint": [0.2, 0.2]}}})")),
                 ConfigError);
}

TEST(ParseExperiment, ReadsAlgorithmBlocks) {
    const auto cfg = parse_experiment(json::parse(R"({
        "command": "run-mappo", "seed": 5, "repeats": 3,
        "game": {"generate": {"seed": 2, "num_states": 2, "actions_per_agent": [2, 3], "gamma": 0.8}},
        "algorithm": {"iterations": 7, "beta": 0.5, "solver": "population", "features": {"kind": "one_hot"},
                      "objective": "initial_state", "s0": 1, "scheme": "refresh"}})"));
    EXPECT_EQ(cfg.command, Command::RunMappo);
    EXPECT_EQ(cfg.seed, 5u);
    EXPECT_EQ(cfg.repeats, 3);
    EXPECT_EQ(cfg.mappo.iterations, 7);
    EXPECT_EQ(*cfg.mappo.beta, 0.5);
    EXPECT_EQ(cfg.mappo.solver, SolverKind::Population);
    EXPECT_EQ(cfg.mappo.objective, ObjectiveMode::InitialState);
    EXPECT_EQ(cfg.mappo.scheme, UpdateScheme::Refresh);
    EXPECT_EQ(cfg.game->num_states, 2);
    EXPECT_EQ(cfg.game->gamma, 0.8);
}

TEST(ParseExperiment, GameFileResolvesAgainstConfigDir) {
    const auto cfg = parse_experiment(json::parse(R"({"command": "run-mappo", "game": {"file": "games/coordination.json"}})"),
                                      configs_dir());
    EXPECT_EQ(cfg.game->num_states, 1);
    EXPECT_THROW(parse_experiment(json::parse(R"({"command": "run-mappo", "game": {"file": "missing.json"}})"), configs_dir()),
                 ConfigError);
}

TEST(RunExperiment, WritesArtifactsWithHashes) {
    const auto dir = scratch_dir("artifacts");
    const auto cfg = parse_experiment(json::parse(R"({
        "command": "run-pessimistic", "repeats": 2,
        "game": {"generate": {"num_states": 2, "actions_per_agent": [2, 2]}},
        "algorithm": {"iterations": 3, "n": 50, "features": {"kind": "one_hot"}}})"));
    const auto res = run_experiment(cfg, dir);
    EXPECT_TRUE(fs::exists(dir / "config.json"));
    EXPECT_TRUE(fs::exists(dir / "summary.json"));
    ASSERT_EQ(res.summary["runs"].size(), 2u);
    for (const auto& run : res.summary["runs"])
        for (const auto& [name, hash] : run["files"].items()) EXPECT_EQ(sha256_hex(read_file(dir / name)), hash.get<std::string>());
    const auto header = read_file(dir / "run_000" / "trace.csv").substr(0, 120);
    EXPECT_EQ(header.rfind("iter,agent,J,gap,solver_loss,eps_k_m,xi_k_m,beta_k,wall_ms,lambda,eta,bellman_err,f_s0,clip_violation_mass\n", 0), 0u);
    fs::remove_all(dir);
}

TEST(RunExperiment, AddingRepeatsKeepsEarlierRuns) {
    const auto a = scratch_dir("rep_a"), b = scratch_dir("rep_b");
    auto cfg = parse_experiment(json::parse(R"({"command": "run-ratio", "algorithm": {"iterations": 50, "random_init": true}})"));
    cfg.repeats = 2;
    const auto ra = run_experiment(cfg, a);
    cfg.repeats = 3;
    const auto rb = run_experiment(cfg, b);
    EXPECT_EQ(ra.summary["runs"][1]["files"], rb.summary["runs"][1]["files"]);
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST(Cli, BundledConfigSucceeds) {
    const auto dir = scratch_dir("cli_ok");
    EXPECT_EQ(run_cli("run " + configs_dir() + "/mappo_fixture.json --out " + dir.string()), 0);
    EXPECT_TRUE(fs::exists(dir / "run_000" / "trace.csv"));
    EXPECT_TRUE(fs::exists(dir / "run_001" / "policy.json"));
    fs::remove_all(dir);
}

TEST(Cli, EnvironmentSuppliesOutputDir) {
    const auto dir = scratch_dir("cli_env");
    EXPECT_EQ(run_cli("run " + configs_dir() + "/ratio.json --repeats 1", "MARL_OUT=" + dir.string()), 0);
    EXPECT_TRUE(fs::exists(dir / "run_000" / "trace_sequential.csv"));
    fs::remove_all(dir);
}

TEST(Cli, ExitCodes) {
    const auto dir = scratch_dir("cli_codes");
    write_file(dir / "unknown.json", R"({"command": "run-ratio", "bogus": true})");
    EXPECT_EQ(run_cli("run " + (dir / "unknown.json").string() + " --out " + (dir / "o").string()), 2);
    write_file(dir / "broken.json", "{\"command\": ");
    EXPECT_EQ(run_cli("run " + (dir / "broken.json").string()), 2);
    EXPECT_EQ(run_cli("run " + (dir / "absent.json").string()), 2);
    // A game with two closed classes cannot define the stationary objective.
    Game g;
    g.num_states = 2;
    g.actions = ActionIndexer({2});
    g.gamma = 0.9;
    g.initial_dist = Eigen::Vector2d(0.5, 0.5);
    g.reward = RowMatrix::Constant(2, 2, 0.5);
    g.transition = RowMatrix::Zero(4, 2);
    g.transition(0, 0) = g.transition(1, 0) = g.transition(2, 1) = g.transition(3, 1) = 1.0;
    write_file(dir / "split.json", serialize_game(g));
    write_file(dir / "split_run.json", R"({"command": "run-mappo", "game": {"file": "split.json"}, "algorithm": {"iterations": 2}})");
    EXPECT_EQ(run_cli("run " + (dir / "split_run.json").string() + " --out " + (dir / "o2").string()), 3);
    EXPECT_EQ(run_cli("check --n-games 3 --inject-bug negated-advantage"), 1);
    EXPECT_EQ(run_cli("check --n-games 0"), 0);
    EXPECT_EQ(run_cli("frobnicate"), 2);
    fs::remove_all(dir);
}

TEST(Cli, RepeatedRunsAreByteIdentical) {
    const auto a = scratch_dir("det_a"), b = scratch_dir("det_b");
    for (const auto& d : {a, b})
        ASSERT_EQ(run_cli("run " + configs_dir() + "/mappo_monte_carlo.json --out " + d.string()), 0);
    EXPECT_EQ(read_file(a / "run_000" / "trace.csv"), read_file(b / "run_000" / "trace.csv"));
    EXPECT_EQ(read_file(a / "summary.json"), read_file(b / "summary.json"));
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST(Cli, GenGameMatchesLibrary) {
    const auto dir = scratch_dir("gen");
    ASSERT_EQ(run_cli("gen-game " + configs_dir() + "/gen_game_spec.json --out " + (dir / "g.json").string()), 0);
    const auto spec = gen_spec_from_json(json::parse(read_file(configs_dir() + "/gen_game_spec.json")));
    EXPECT_EQ(read_file(dir / "g.json"), serialize_game(random_game(spec)) + "\n");
    fs::remove_all(dir);
}
