#pragma once

// Config-driven experiment runner behind the `marl` command line tool.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <openssl/evp.h>

#include "json.hpp"
#include "marl/game.hpp"
#include "marl/mappo.hpp"
#include "marl/pessimistic.hpp"
#include "marl/properties.hpp"
#include "marl/ratio_game.hpp"

namespace marl {

namespace fs = std::filesystem;
using nlohmann::json;

inline std::string sha256_hex(const std::string& bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
        throw Error("SHA-256 digest failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 15];
    }
    return out;
}

/// Shortest decimal that round-trips the double.
inline std::string format_double(double v) {
    char buf[32];
    for (int prec = 15; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

class CsvWriter {
public:
    explicit CsvWriter(const std::vector<std::string>& header) { row_strings(header); }

    template <typename... Ts>
    void row(const Ts&... cells) {
        std::vector<std::string> out;
        (out.push_back(cell(cells)), ...);
        row_strings(out);
    }

    const std::string& str() const { return text_; }

private:
    static std::string cell(double v) { return format_double(v); }
    static std::string cell(int v) { return std::to_string(v); }
    static std::string cell(long v) { return std::to_string(v); }
    static std::string cell(const std::string& v) { return v; }

    void row_strings(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) text_ += ',';
            text_ += cells[i];
        }
        text_ += '\n';
    }

    std::string text_;
};

// ---------------------------------------------------------------------------
// Config reading with unknown-key rejection
// ---------------------------------------------------------------------------

/// Reads one JSON object, remembering which keys were consumed so that
/// finish() can reject anything left over. Errors carry JSON-pointer paths.
class ConfigReader {
public:
    ConfigReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
    }

    bool has(const std::string& key) const { return j_.contains(key); }

    template <typename T>
    T get(const std::string& key, T fallback) {
        if (!j_.contains(key)) return fallback;
        return require<T>(key);
    }

    template <typename T>
    std::optional<T> optional(const std::string& key) {
        if (!j_.contains(key) || j_.at(key).is_null()) {
            seen_.insert(key);
            return std::nullopt;
        }
        return require<T>(key);
    }

    template <typename T>
    T require(const std::string& key) {
        seen_.insert(key);
        if (!j_.contains(key)) throw ConfigError(where(key) + ": missing required key");
        const json& v = j_.at(key);
        try {
            if constexpr (std::is_same_v<T, bool>) {
                if (!v.is_boolean()) throw ConfigError(where(key) + ": expected a boolean");
            } else if constexpr (std::is_integral_v<T>) {
                if (!v.is_number_integer()) throw ConfigError(where(key) + ": expected an integer");
                if constexpr (std::is_unsigned_v<T>)
                    if (v.is_number_integer() && !v.is_number_unsigned()) throw ConfigError(where(key) + ": must be >= 0");
            } else if constexpr (std::is_floating_point_v<T>) {
                if (!v.is_number()) throw ConfigError(where(key) + ": expected a number");
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!v.is_string()) throw ConfigError(where(key) + ": expected a string");
            }
            return v.get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(where(key) + ": " + e.what());
        }
    }

    ConfigReader child(const std::string& key) {
        seen_.insert(key);
        if (!j_.contains(key)) throw ConfigError(where(key) + ": missing required key");
        return ConfigReader(j_.at(key), where(key));
    }

    const json& raw(const std::string& key) {
        seen_.insert(key);
        return j_.at(key);
    }

    template <typename E>
    E choice(const std::string& key, E fallback, const std::vector<std::pair<std::string, E>>& options) {
        if (!j_.contains(key)) return fallback;
        const auto s = require<std::string>(key);
        for (const auto& [name, value] : options)
            if (name == s) return value;
        std::string names;
        for (const auto& o : options) names += (names.empty() ? "" : ", ") + o.first;
        throw ConfigError(where(key) + ": unknown value \"" + s + "\" (expected one of " + names + ")");
    }

    void finish() const {
        for (const auto& [key, value] : j_.items())
            if (!seen_.count(key)) throw ConfigError(where(key) + ": unknown key \"" + key + "\"");
    }

    std::string where(const std::string& key = {}) const {
        if (key.empty()) return path_.empty() ? "/" : path_;
        return path_ + "/" + key;
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

inline GameGenSpec gen_spec_from_json(const json& j, const std::string& path = {}) {
    ConfigReader r(j, path);
    GameGenSpec spec;
    spec.seed = r.get<std::uint64_t>("seed", 0);
    spec.num_states = r.require<int>("num_states");
    spec.actions_per_agent = r.require<std::vector<int>>("actions_per_agent");
    if (r.has("num_agents") && r.require<int>("num_agents") != static_cast<int>(spec.actions_per_agent.size()))
        throw ConfigError(r.where("num_agents") + ": does not match actions_per_agent");
    spec.gamma = r.get<double>("gamma", spec.gamma);
    spec.reward_mode = r.choice<RewardMode>("reward_mode", RewardMode::Dense,
                                            {{"dense", RewardMode::Dense}, {"sparse", RewardMode::Sparse}});
    spec.ergodicity_floor = r.get<double>("ergodicity_floor", spec.ergodicity_floor);
    r.finish();
    return spec;
}

inline std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw ConfigError("cannot read " + p.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw Error("cannot write " + p.string());
    out << text;
    if (!out) throw Error("write failed for " + p.string());
}

/// Parses JSON text; errors name the line and column.
inline json parse_json_text(const std::string& text, const std::string& name) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        std::size_t line = 1, col = 1;
        for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
            if (text[i] == '\n') {
                ++line;
                col = 1;
            } else {
                ++col;
            }
        }
        throw ConfigError(name + ":" + std::to_string(line) + ":" + std::to_string(col) + ": malformed JSON");
    }
}

// ---------------------------------------------------------------------------
// Experiment configs
// ---------------------------------------------------------------------------

enum class Command { RunMappo, RunPessimistic, RunRatio, CheckProperties, GenGame };

inline std::string to_string(Command c) {
    switch (c) {
    case Command::RunMappo: return "run-mappo";
    case Command::RunPessimistic: return "run-pessimistic";
    case Command::RunRatio: return "run-ratio";
    case Command::CheckProperties: return "check-properties";
    case Command::GenGame: return "gen-game";
    }
    return "?";
}

enum class RatioMethod { Sequential, Independent, Both };

struct RatioConfig {
    RatioGame game = RatioGame::reference();
    double step = kDefaultRatioStep;
    int iterations = 5000;
    RatioMethod method = RatioMethod::Both;
    /// Initial first-action probabilities; empty means uniform.
    std::optional<double> init_x, init_y;
    /// Draw logits from N(0, 1) per repeat instead of the fixed init.
    bool random_init = false;
    double grid_step = 1e-3;
    double threshold = 1e-2;
};

struct ExperimentConfig {
    Command command = Command::RunMappo;
    std::uint64_t seed = 0;
    int repeats = 1;
    std::optional<std::string> output_dir;
    std::optional<Game> game;
    MappoConfig mappo;
    PessimisticConfig pessimistic;
    RatioConfig ratio;
    int n_games = 100;
    InjectedBug bug = InjectedBug::None;
    std::optional<GameGenSpec> gen_spec;
    /// The document as given, echoed into the output directory.
    json source;
};

namespace detail {

inline FeatureSpec read_features(ConfigReader r) {
    FeatureSpec f;
    f.kind = r.choice<FeatureKind>("kind", f.kind,
                                   {{"one_hot", FeatureKind::OneHot}, {"random_projection", FeatureKind::RandomProjection}});
    f.dim = r.get<Index>("dim", f.dim);
    f.seed = r.get<std::uint64_t>("seed", f.seed);
    r.finish();
    return f;
}

inline UpdateScheme read_scheme(ConfigReader& r) {
    return r.choice<UpdateScheme>("scheme", UpdateScheme::IterationStart,
                                  {{"iteration_start", UpdateScheme::IterationStart}, {"refresh", UpdateScheme::Refresh}});
}

inline MappoConfig read_mappo(ConfigReader r) {
    MappoConfig c;
    c.iterations = r.get<int>("iterations", c.iterations);
    c.sgd_steps = r.get<long>("sgd_steps", c.sgd_steps);
    c.beta = r.optional<double>("beta");
    if (r.has("radius")) c.radii = {r.require<double>("radius")};
    if (r.has("radii")) c.radii = r.require<std::vector<double>>("radii");
    if (r.has("features")) c.features = read_features(r.child("features"));
    c.estimator = r.choice<EstimatorKind>("estimator", c.estimator,
                                          {{"exact", EstimatorKind::Exact}, {"monte_carlo", EstimatorKind::MonteCarlo}});
    c.mc.repeats = r.get<long>("mc_repeats", c.mc.repeats);
    c.mc.horizon = r.get<long>("mc_horizon", c.mc.horizon);
    c.mc_tolerance = r.get<double>("mc_tolerance", c.mc_tolerance);
    c.solver = r.choice<SolverKind>("solver", c.solver, {{"sgd", SolverKind::Sgd}, {"population", SolverKind::Population}});
    c.sgd_init = r.choice<SgdInit>("sgd_init", c.sgd_init, {{"warm", SgdInit::Warm}, {"zero", SgdInit::Zero}});
    c.scheme = read_scheme(r);
    c.sampler = r.choice<SamplerKind>("sampler", c.sampler,
                                      {{"exact_stationary", SamplerKind::ExactStationary}, {"simulated", SamplerKind::Simulated}});
    c.objective = r.choice<ObjectiveMode>("objective", c.objective,
                                          {{"stationary_optimal", ObjectiveMode::StationaryOptimal},
                                           {"initial_state", ObjectiveMode::InitialState}});
    c.s0 = r.get<int>("s0", c.s0);
    c.shuffle_agents = r.get<bool>("shuffle_agents", c.shuffle_agents);
    c.diagnostics = r.get<bool>("diagnostics", c.diagnostics);
    c.record_wall_time = r.get<bool>("record_wall_time", c.record_wall_time);
    r.finish();
    return c;
}

inline PessimisticConfig read_pessimistic(ConfigReader r) {
    PessimisticConfig c;
    c.iterations = r.get<int>("iterations", c.iterations);
    c.n = r.get<Index>("n", c.n);
    c.lambda = r.optional<double>("lambda");
    c.eta = r.optional<double>("eta");
    c.delta = r.get<double>("delta", c.delta);
    c.s0 = r.get<int>("s0", c.s0);
    if (r.has("features")) c.features = read_features(r.child("features"));
    c.value_radius = r.optional<double>("value_radius");
    c.policy_radius = r.get<double>("policy_radius", c.policy_radius);
    if (r.has("mu")) {
        ConfigReader m = r.child("mu");
        DataDistribution mu;
        const auto st = m.require<std::vector<double>>("state");
        const auto jt = m.require<std::vector<double>>("joint");
        mu.state = Eigen::Map<const Eigen::VectorXd>(st.data(), static_cast<Index>(st.size()));
        mu.joint = Eigen::Map<const Eigen::VectorXd>(jt.data(), static_cast<Index>(jt.size()));
        m.finish();
        c.mu = mu;
    }
    c.reuse_dataset = r.get<bool>("reuse_dataset", c.reuse_dataset);
    c.scheme = read_scheme(r);
    c.record_wall_time = r.get<bool>("record_wall_time", c.record_wall_time);
    r.finish();
    return c;
}

inline Eigen::Matrix2d read_matrix2(ConfigReader& r, const std::string& key) {
    const auto rows = r.require<std::vector<std::vector<double>>>(key);
    if (rows.size() != 2 || rows[0].size() != 2 || rows[1].size() != 2)
        throw ConfigError(r.where(key) + ": expected a 2x2 matrix");
    Eigen::Matrix2d m;
    m << rows[0][0], rows[0][1], rows[1][0], rows[1][1];
    return m;
}

inline RatioConfig read_ratio(ConfigReader r) {
    RatioConfig c;
    if (r.has("R")) c.game.R = read_matrix2(r, "R");
    if (r.has("S")) c.game.S = read_matrix2(r, "S");
    c.step = r.get<double>("step", c.step);
    c.iterations = r.get<int>("iterations", c.iterations);
    c.method = r.choice<RatioMethod>("method", c.method,
                                     {{"sequential", RatioMethod::Sequential},
                                      {"independent", RatioMethod::Independent},
                                      {"both", RatioMethod::Both}});
    c.init_x = r.optional<double>("init_x");
    c.init_y = r.optional<double>("init_y");
    c.random_init = r.get<bool>("random_init", c.random_init);
    c.grid_step = r.get<double>("grid_step", c.grid_step);
    c.threshold = r.get<double>("threshold", c.threshold);
    r.finish();
    try {
        c.game.validate();
        if (c.init_x) logits_for(*c.init_x);
        if (c.init_y) logits_for(*c.init_y);
    } catch (const ConfigError& e) {
        throw ConfigError(r.where() + ": " + e.what());
    }
    if (!(c.step > 0.0) || c.iterations < 0) throw ConfigError(r.where() + ": step must be > 0 and iterations >= 0");
    return c;
}

} // namespace detail

/// Validates and reads an experiment config. Relative game paths resolve
/// against `base_dir`. Every error is a ConfigError naming the offending field.
inline ExperimentConfig parse_experiment(const json& doc, const fs::path& base_dir = {}) {
    ExperimentConfig cfg;
    cfg.source = doc;
    ConfigReader r(doc, "");
    cfg.command = r.choice<Command>("command", Command::RunMappo,
                                    {{"run-mappo", Command::RunMappo},
                                     {"run-pessimistic", Command::RunPessimistic},
                                     {"run-ratio", Command::RunRatio},
                                     {"check-properties", Command::CheckProperties},
                                     {"gen-game", Command::GenGame}});
    if (!r.has("command")) throw ConfigError("/command: missing required key");
    cfg.seed = r.get<std::uint64_t>("seed", 0);
    cfg.repeats = r.get<int>("repeats", 1);
    if (cfg.repeats < 1) throw ConfigError("/repeats: must be >= 1");
    cfg.output_dir = r.optional<std::string>("output_dir");

    const bool needs_game = cfg.command == Command::RunMappo || cfg.command == Command::RunPessimistic;
    if (needs_game || cfg.command == Command::GenGame) {
        ConfigReader g = r.child("game");
        if (g.has("file") == g.has("generate")) throw ConfigError("/game: give exactly one of \"file\" or \"generate\"");
        if (g.has("file")) {
            if (cfg.command == Command::GenGame) throw ConfigError("/game/file: gen-game needs a generator spec");
            fs::path p = g.require<std::string>("file");
            if (p.is_relative()) p = base_dir / p;
            try {
                cfg.game = deserialize_game(read_file(p));
            } catch (const ParseError& e) {
                throw ConfigError("/game/file: " + p.string() + ": " + e.what());
            }
        } else {
            cfg.gen_spec = gen_spec_from_json(g.raw("generate"), "/game/generate");
            try {
                cfg.game = random_game(*cfg.gen_spec);
            } catch (const ConfigError& e) {
                throw ConfigError(std::string("/game/generate: ") + e.what());
            }
        }
        g.finish();
        const auto report = validate_game(*cfg.game);
        if (!report.ok) throw ConfigError("/game: " + report.describe());
    } else if (r.has("game")) {
        throw ConfigError("/game: not used by " + to_string(cfg.command));
    }

    const bool has_algo = r.has("algorithm");
    const json empty = json::object();
    ConfigReader algo = has_algo ? r.child("algorithm") : ConfigReader(empty, "/algorithm");
    switch (cfg.command) {
    case Command::RunMappo: cfg.mappo = detail::read_mappo(std::move(algo)); break;
    case Command::RunPessimistic: cfg.pessimistic = detail::read_pessimistic(std::move(algo)); break;
    case Command::RunRatio: cfg.ratio = detail::read_ratio(std::move(algo)); break;
    case Command::CheckProperties:
        cfg.n_games = algo.get<int>("n_games", cfg.n_games);
        if (cfg.n_games < 0) throw ConfigError("/algorithm/n_games: must be >= 0");
        cfg.bug = algo.choice<InjectedBug>("inject_bug", InjectedBug::None,
                                           {{"none", InjectedBug::None}, {"negated_advantage", InjectedBug::NegatedAdvantage}});
        algo.finish();
        break;
    case Command::GenGame: algo.finish(); break;
    }
    r.finish();
    if (cfg.game) {
        const int S = cfg.game->num_states;
        if (cfg.mappo.s0 < 0 || cfg.mappo.s0 >= S) throw ConfigError("/algorithm/s0: state out of range");
        if (cfg.pessimistic.s0 < 0 || cfg.pessimistic.s0 >= S) throw ConfigError("/algorithm/s0: state out of range");
        if (cfg.pessimistic.mu) {
            try {
                cfg.pessimistic.mu->validate(*cfg.game);
            } catch (const ConfigError& e) {
                throw ConfigError(std::string("/algorithm/mu: ") + e.what());
            }
        }
    }
    return cfg;
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

struct Artifact {
    std::string name;
    std::string content;
};

struct RunOutput {
    std::uint64_t seed = 0;
    std::vector<Artifact> files;
    json metrics = json::object();
    bool ok = true;
};

inline std::string trace_csv(const RunTrace& t, bool pessimistic) {
    std::vector<std::string> header{"iter", "agent", "J", "gap", "solver_loss", "eps_k_m", "xi_k_m", "beta_k", "wall_ms"};
    if (pessimistic)
        for (const char* c : {"lambda", "eta", "bellman_err", "f_s0", "clip_violation_mass"}) header.emplace_back(c);
    CsvWriter w(header);
    for (const auto& r : t.rows) {
        if (pessimistic)
            w.row(r.iter, r.agent, r.J, r.gap, r.solver_loss, r.eps, r.xi, r.beta_k, r.wall_ms, r.lambda, r.eta,
                  r.bellman_err, r.f_s0, r.clip_violation_mass);
        else
            w.row(r.iter, r.agent, r.J, r.gap, r.solver_loss, r.eps, r.xi, r.beta_k, r.wall_ms);
    }
    return w.str();
}

inline std::string iterates_csv(const RunTrace& t) {
    CsvWriter w({"iter", "J", "gap"});
    for (std::size_t k = 0; k < t.iterate_J.size(); ++k) w.row(static_cast<int>(k), t.iterate_J[k], t.iterate_gap[k]);
    return w.str();
}

inline json trace_metrics(const RunTrace& t) {
    json m;
    m["J_star"] = t.J_star;
    m["objective"] = to_string(t.objective);
    m["final_gap"] = t.final_gap();
    m["best_gap"] = t.best_gap();
    m["best_iter"] = t.best_iter;
    m["output_gap"] = t.output_gap();
    m["output_iter"] = t.output_iter;
    if (t.iterate_gap.size() >= 3) m["gap_envelope_slope"] = gap_envelope_slope(t.iterate_gap);
    return m;
}

inline std::string ratio_trace_csv(const RatioRun& run) {
    CsvWriter w({"iter", "x", "y", "V", "grad_norm_x", "grad_norm_y"});
    for (const auto& r : run.rows) w.row(r.iter, r.x, r.y, r.V, r.grad_norm_x, r.grad_norm_y);
    return w.str();
}

inline json point_json(const RatioPoint& p) { return {{"x", p.x}, {"y", p.y}, {"V", p.V}, {"grad_norm", p.grad_norm}}; }

/// One repeat of the configured command, as in-memory artifacts.
inline RunOutput run_once(const ExperimentConfig& cfg, std::uint64_t seed) {
    RunOutput out;
    out.seed = seed;
    switch (cfg.command) {
    case Command::RunMappo: {
        MappoConfig c = cfg.mappo;
        c.seed = seed;
        const auto res = train_mappo(*cfg.game, c);
        out.files.push_back({"trace.csv", trace_csv(res.trace, false)});
        out.files.push_back({"iterates.csv", iterates_csv(res.trace)});
        out.files.push_back({"policy.json", policy_checkpoint(res.output).dump(2) + "\n"});
        out.metrics = trace_metrics(res.trace);
        out.metrics["beta"] = res.trace.beta;
        break;
    }
    case Command::RunPessimistic: {
        PessimisticConfig c = cfg.pessimistic;
        c.seed = seed;
        const auto res = train_pessimistic(*cfg.game, c);
        out.files.push_back({"trace.csv", trace_csv(res.trace, true)});
        out.files.push_back({"iterates.csv", iterates_csv(res.trace)});
        out.files.push_back({"policy.json", policy_checkpoint(res.output).dump(2) + "\n"});
        out.metrics = trace_metrics(res.trace);
        out.metrics["lambda"] = res.lambdas;
        out.metrics["eta"] = res.etas;
        break;
    }
    case Command::RunRatio: {
        const auto& c = cfg.ratio;
        Eigen::Vector2d lx = c.init_x ? logits_for(*c.init_x) : Eigen::Vector2d::Zero();
        Eigen::Vector2d ly = c.init_y ? logits_for(*c.init_y) : Eigen::Vector2d::Zero();
        if (c.random_init) {
            Rng rng = make_rng(seed);
            lx = {standard_normal(rng), standard_normal(rng)};
            ly = {standard_normal(rng), standard_normal(rng)};
        }
        const auto opt = brute_force_optimum(c.game, c.grid_step);
        out.metrics["coordinates"] = "x and y are the probabilities of each player's first action";
        out.metrics["optimum"] = point_json(opt);
        out.metrics["stationary_point"] = point_json(locate_stationary_point(c.game, c.grid_step));
        out.metrics["init"] = {{"x", softmax2(lx)[0]}, {"y", softmax2(ly)[0]}};
        auto add = [&](const std::string& name, const RatioRun& run) {
            out.files.push_back({"trace_" + name + ".csv", ratio_trace_csv(run)});
            out.metrics[name] = {{"final_V", run.final_value()},
                                 {"iterations_to_threshold", run.iterations_to(opt.V, c.threshold)}};
        };
        if (c.method != RatioMethod::Independent) add("sequential", sequential_run(c.game, lx, ly, c.step, c.iterations));
        if (c.method != RatioMethod::Sequential) add("independent", independent_pg_run(c.game, lx, ly, c.step, c.iterations));
        break;
    }
    case Command::CheckProperties: {
        const auto rep = check_properties(cfg.n_games, seed, cfg.bug);
        out.files.push_back({"report.json", rep.to_json().dump(2) + "\n"});
        out.metrics = {{"pass", rep.all_pass()}};
        out.ok = rep.all_pass();
        break;
    }
    case Command::GenGame: {
        GameGenSpec spec = *cfg.gen_spec;
        spec.seed = seed;
        out.files.push_back({"game.json", serialize_game(random_game(spec)) + "\n"});
        break;
    }
    }
    return out;
}

struct ExperimentResult {
    fs::path dir;
    json summary;
    bool ok = true;
};

/// Runs every repeat concurrently and writes per-run directories, a config
/// echo and a summary listing each artifact's SHA-256. Repeat r uses seed
/// derive_seed(master, r), so adding repeats never changes earlier ones.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const fs::path& dir) {
    std::vector<RunOutput> outputs(static_cast<std::size_t>(cfg.repeats));
    std::vector<std::exception_ptr> errors(outputs.size());
    const unsigned workers = std::max(1u, std::min<unsigned>(std::thread::hardware_concurrency(), cfg.repeats));
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            for (std::size_t r = w; r < outputs.size(); r += workers) {
                try {
                    outputs[r] = run_once(cfg, derive_seed(cfg.seed, r));
                } catch (...) {
                    errors[r] = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);

    fs::create_directories(dir);
    ExperimentResult res;
    res.dir = dir;
    json echo = cfg.source;
    echo["seed"] = cfg.seed;
    echo["repeats"] = cfg.repeats;
    const std::string echo_text = echo.dump(2) + "\n";
    write_file(dir / "config.json", echo_text);

    json runs = json::array();
    for (std::size_t r = 0; r < outputs.size(); ++r) {
        char name[32];
        std::snprintf(name, sizeof name, "run_%03zu", r);
        fs::create_directories(dir / name);
        json files = json::object();
        for (const auto& f : outputs[r].files) {
            write_file(dir / name / f.name, f.content);
            files[std::string(name) + "/" + f.name] = sha256_hex(f.content);
        }
        runs.push_back({{"dir", name}, {"seed", outputs[r].seed}, {"files", files}, {"metrics", outputs[r].metrics}});
        res.ok = res.ok && outputs[r].ok;
    }
    res.summary = {{"command", to_string(cfg.command)},
                   {"seed", cfg.seed},
                   {"repeats", cfg.repeats},
                   {"config_sha256", sha256_hex(echo_text)},
                   {"runs", runs},
                   {"ok", res.ok}};
    write_file(dir / "summary.json", res.summary.dump(2) + "\n");
    return res;
}

} // namespace marl
