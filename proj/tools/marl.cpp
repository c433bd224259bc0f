#include <cstdlib>
#include <iostream>

#include "CLI11.hpp"
#include "marl/experiment.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

int run_command(const std::string& config_path, const std::optional<std::string>& out, const std::optional<std::uint64_t>& seed,
                const std::optional<int>& repeats) {
    const marl::fs::path path(config_path);
    auto cfg = marl::parse_experiment(marl::parse_json_text(marl::read_file(path), config_path), path.parent_path());
    if (seed) cfg.seed = *seed;
    if (repeats) {
        if (*repeats < 1) throw marl::ConfigError("--repeats must be >= 1");
        cfg.repeats = *repeats;
    }
    std::string dir = "marl_out";
    if (const char* env = std::getenv("MARL_OUT"); env && *env) dir = env;
    if (cfg.output_dir) dir = *cfg.output_dir;
    if (out) dir = *out;
    const auto res = marl::run_experiment(cfg, dir);
    std::cout << res.summary.dump(2) << "\n";
    return res.ok ? 0 : 1;
}

int check_command(int n_games, std::uint64_t seed, const std::string& bug) {
    marl::InjectedBug b = marl::InjectedBug::None;
    if (bug == "negated-advantage") b = marl::InjectedBug::NegatedAdvantage;
    else if (bug != "none") throw marl::ConfigError("--inject-bug: unknown value \"" + bug + "\"");
    const auto rep = marl::check_properties(n_games, seed, b);
    for (const auto& w : rep.warnings) std::cerr << "warning: " << w << "\n";
    std::cout << rep.to_json().dump(2) << "\n";
    return rep.all_pass() ? 0 : 1;
}

int gen_game_command(const std::string& spec_path, const std::optional<std::string>& out) {
    const auto doc = marl::parse_json_text(marl::read_file(spec_path), spec_path);
    const auto game = marl::random_game(marl::gen_spec_from_json(doc));
    const std::string text = marl::serialize_game(game) + "\n";
    if (out) marl::write_file(*out, text);
    else std::cout << text;
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Sequential multi-agent policy optimization experiments"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::string> out;
    std::optional<std::uint64_t> seed;
    std::optional<int> repeats;
    auto* run = app.add_subcommand("run", "Run an experiment config");
    run->add_option("config", config_path, "Experiment config (JSON)")->required();
    run->add_option("--out", out, "Output directory (default: config output_dir, then $MARL_OUT, then marl_out)");
    run->add_option("--seed", seed, "Master seed override");
    run->add_option("--repeats", repeats, "Number of repeats");

    int n_games = 100;
    std::uint64_t check_seed = 0;
    std::string bug = "none";
    auto* check = app.add_subcommand("check", "Run the property suites on random games");
    check->add_option("--n-games", n_games, "Number of random games")->check(CLI::NonNegativeNumber);
    check->add_option("--seed", check_seed, "Master seed");
    check->add_option("--inject-bug", bug, "Harness self-test: none | negated-advantage");

    std::string spec_path;
    std::optional<std::string> game_out;
    auto* gen = app.add_subcommand("gen-game", "Generate a random game from a spec");
    gen->add_option("spec", spec_path, "Generator spec (JSON)")->required();
    gen->add_option("--out", game_out, "Write the game here instead of stdout");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        if (*run) return run_command(config_path, out, seed, repeats);
        if (*check) return check_command(n_games, check_seed, bug);
        return gen_game_command(spec_path, game_out);
    } catch (const marl::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const marl::ParseError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}
