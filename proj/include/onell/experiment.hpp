#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "onell/ddqn.hpp"
#include "onell/detail/format.hpp"
#include "onell/error.hpp"
#include "onell/ga.hpp"
#include "onell/nn.hpp"
#include "onell/policy.hpp"
#include "onell/stats.hpp"

namespace onell::exp {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr const char* kOutputRootEnv = "ONELL_OUTPUT_ROOT";

// ---------------------------------------------------------------------------
// JSON views of library types

inline json to_json(const ErtSummary& s) {
    json j{{"n", s.n}, {"runs", s.runs}, {"successes", s.successes}, {"std", s.std}};
    if (s.infinite()) {
        j["ert"] = nullptr;
        j["normalized_ert"] = nullptr;
        j["infinite"] = true;
    } else {
        j["ert"] = s.ert;
        j["normalized_ert"] = s.normalized_ert;
        j["infinite"] = false;
    }
    return j;
}

inline json to_json(const ParameterSet& p) {
    return {{"lambda_m", p.lambda_m}, {"alpha", p.alpha}, {"lambda_c", p.lambda_c}, {"beta", p.beta}};
}

inline json to_json(const ComparisonTable& t) {
    json cells = json::array();
    for (const auto& c : t.cells) {
        json j{{"policy", c.policy}, {"summary", to_json(c.summary)}, {"best", c.best},
               {"not_significant", c.not_significant}, {"seeds", c.seeds}, {"evaluations", c.evaluations}};
        if (c.tested) {
            j["p_value"] = c.p_value;
            j["p_adjusted"] = c.p_adjusted;
        }
        cells.push_back(std::move(j));
    }
    return {{"level", t.level}, {"policies", t.policies}, {"sizes", t.sizes}, {"cells", std::move(cells)}};
}

namespace detail {

template <class T>
T get_field(const json& j, const char* key, const T& fallback, std::vector<std::string>& problems,
            const std::string& where) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        problems.push_back(where + key + ": wrong type (got " + j.at(key).dump() + ")");
        return fallback;
    }
}

inline void reject_unknown(const json& j, const std::set<std::string>& known, std::vector<std::string>& problems,
                           const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key())) problems.push_back(where + it.key() + ": unknown field");
}

inline void throw_problems(const std::string& what, const std::vector<std::string>& problems) {
    if (problems.empty()) return;
    std::string msg = what;
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ValidationError(msg);
}

inline std::string sanitize(const std::string& s) {
    std::string out;
    for (char c : s) {
        const auto u = static_cast<unsigned char>(c);
        out += (std::isalnum(u) || c == '.' || c == '_' || c == '-') ? c : '-';
    }
    return out.empty() ? "policy" : out;
}

}  // namespace detail

inline rl::TrainConfig train_config_from_json(const json& j) {
    rl::TrainConfig c;
    if (j.is_null()) return c;
    if (!j.is_object()) throw ValidationError("training config must be a JSON object");
    std::vector<std::string> p;
    const std::string w = "train.";
    detail::reject_unknown(j, {"n", "gamma", "epsilon", "warmup", "batch_size", "learning_rate", "budget",
                               "cutoff_factor", "eval_interval", "eval_runs", "final_eval_runs", "top_k",
                               "repetitions", "reward_mode", "target_update_period", "buffer_capacity",
                               "action_mode", "controlled", "trunk"},
                           p, w);
    c.n = detail::get_field(j, "n", c.n, p, w);
    c.gamma = detail::get_field(j, "gamma", c.gamma, p, w);
    c.epsilon = detail::get_field(j, "epsilon", c.epsilon, p, w);
    c.warmup = detail::get_field(j, "warmup", c.warmup, p, w);
    c.batch_size = detail::get_field(j, "batch_size", c.batch_size, p, w);
    c.learning_rate = detail::get_field(j, "learning_rate", c.learning_rate, p, w);
    c.budget = detail::get_field(j, "budget", c.budget, p, w);
    c.cutoff_factor = detail::get_field(j, "cutoff_factor", c.cutoff_factor, p, w);
    c.eval_interval = detail::get_field(j, "eval_interval", c.eval_interval, p, w);
    c.eval_runs = detail::get_field(j, "eval_runs", c.eval_runs, p, w);
    c.final_eval_runs = detail::get_field(j, "final_eval_runs", c.final_eval_runs, p, w);
    c.top_k = detail::get_field(j, "top_k", c.top_k, p, w);
    c.repetitions = detail::get_field(j, "repetitions", c.repetitions, p, w);
    c.target_update_period = detail::get_field(j, "target_update_period", c.target_update_period, p, w);
    c.buffer_capacity = detail::get_field(j, "buffer_capacity", c.buffer_capacity, p, w);
    c.trunk = detail::get_field(j, "trunk", c.trunk, p, w);
    try {
        if (j.contains("reward_mode")) c.reward_mode = rl::parse_reward_mode(j.at("reward_mode").get<std::string>());
        if (j.contains("action_mode")) c.action_mode = rl::parse_action_mode(j.at("action_mode").get<std::string>());
        if (j.contains("controlled")) c.controlled = rl::ControlMask::parse(j.at("controlled").get<std::vector<std::string>>());
    } catch (const ValidationError& e) {
        p.push_back(e.what());
    } catch (const json::exception&) {
        p.push_back("train.reward_mode/action_mode/controlled: wrong type");
    }
    for (const auto& s : c.problems()) p.push_back(w + s);
    detail::throw_problems("invalid training config:", p);
    return c;
}

inline json to_json(const rl::TrainConfig& c) {
    return {{"n", c.n},
            {"gamma", c.gamma},
            {"epsilon", c.epsilon},
            {"warmup", c.warmup},
            {"batch_size", c.batch_size},
            {"learning_rate", c.learning_rate},
            {"budget", c.budget},
            {"cutoff_factor", c.cutoff_factor},
            {"eval_interval", c.eval_interval},
            {"eval_runs", c.eval_runs},
            {"final_eval_runs", c.final_eval_runs},
            {"top_k", c.top_k},
            {"repetitions", c.repetitions},
            {"reward_mode", rl::to_string(c.reward_mode)},
            {"target_update_period", c.target_update_period},
            {"buffer_capacity", c.buffer_capacity},
            {"action_mode", rl::to_string(c.action_mode)},
            {"controlled", c.controlled.names()},
            {"trunk", c.trunk}};
}

// ---------------------------------------------------------------------------
// Policy registry

struct NamedPolicy {
    std::string label;
    PolicyPtr policy;
};

inline const std::vector<std::string>& known_policy_ids() {
    static const std::vector<std::string> ids{"theory", "dmp", "ushape", "one-fifth", "irace", "self-adjusting",
                                              "constant", "table", "composite", "neural"};
    return ids;
}

namespace detail {

inline ParameterSource parse_source(const json& v, const std::string& where) {
    if (v.is_number()) return ParameterSource::constant(v.get<double>());
    if (v.is_string()) {
        const auto s = v.get<std::string>();
        if (s == "theory") return ParameterSource::theory();
        if (s == "dmp") return ParameterSource::dmp();
        if (s == "rl" || s == "table") return ParameterSource::table();
    }
    throw ValidationError(where + ": expected \"theory\", \"dmp\", \"rl\" or a number, got " + v.dump());
}

inline fs::path resolve(const fs::path& base, const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() || base.empty() ? path : base / path;
}

inline std::string label_with(const std::string& id, const json& j, std::initializer_list<const char*> keys) {
    std::string args;
    for (const char* k : keys)
        if (j.contains(k)) args += std::string(args.empty() ? "" : ",") + k + "=" + j.at(k).dump();
    return args.empty() ? id : id + "(" + args + ")";
}

}  // namespace detail

/// Model file written by `train`, plus the codec needed to decode actions.
struct NeuralModel {
    nn::NetworkSpec spec;
    rl::Net params;
    rl::ActionCodec codec;
};

inline void save_neural_model(const fs::path& path, const rl::Net& params, const nn::NetworkSpec& spec,
                              const rl::ActionCodec& codec, std::size_t n) {
    {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw std::runtime_error("cannot write " + path.string());
        nn::serialize(os, params, spec);
    }
    std::ofstream meta(path.string() + ".json");
    meta << json{{"action_mode", rl::to_string(codec.mode())}, {"controlled", codec.mask().names()}, {"n", n}}.dump(2)
         << '\n';
}

inline NeuralModel load_neural_model(const fs::path& path, const json& overrides = json::object()) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw LoadError("cannot open model file " + path.string());
    auto loaded = nn::deserialize<float>(is);
    json meta = json::object();
    if (std::ifstream ms(path.string() + ".json"); ms) {
        try {
            ms >> meta;
        } catch (const json::exception& e) {
            throw LoadError("model metadata " + path.string() + ".json: " + e.what());
        }
    }
    for (const char* k : {"action_mode", "controlled"})
        if (overrides.contains(k)) meta[k] = overrides.at(k);
    const auto mode = rl::parse_action_mode(meta.value("action_mode", std::string("factored")));
    const auto mask = meta.contains("controlled") ? rl::ControlMask::parse(meta.at("controlled").get<std::vector<std::string>>())
                                                  : rl::ControlMask::all();
    rl::ActionCodec codec(mode, mask);
    if (loaded.spec.heads != codec.head_widths())
        throw LoadError("model " + path.string() + " has heads that do not match the " + rl::to_string(mode) +
                        " codec for " + mask.to_string());
    return {std::move(loaded.spec), std::move(loaded.params), std::move(codec)};
}

/**
 * Builds a policy from a manifest entry: either an id string or an
 * object {"id": ..., parameters...}. Relative paths resolve against
 * `base_dir`.
 */
inline NamedPolicy make_policy(const json& entry, const fs::path& base_dir = {}) {
    json j = entry.is_string() ? json{{"id", entry.get<std::string>()}} : entry;
    if (!j.is_object() || !j.contains("id") || !j.at("id").is_string())
        throw ValidationError("policy entry must be a string or an object with an \"id\": " + entry.dump());
    const std::string id = j.at("id").get<std::string>();
    const std::string custom = j.value("label", std::string());
    auto named = [&](std::string label, PolicyPtr p) {
        return NamedPolicy{custom.empty() ? std::move(label) : custom, std::move(p)};
    };
    try {
        if (id == "theory") return named("theory", make_theory_policy());
        if (id == "dmp") return named("dmp", make_dmp_policy());
        if (id == "ushape") return named("ushape", make_ushape_policy());
        if (id == "irace") return named("irace", make_irace_policy());
        if (id == "one-fifth") {
            const double F = j.value("F", kDefaultOneFifthF);
            return named(detail::label_with("one-fifth", json{{"F", F}}, {"F"}), make_one_fifth_policy(F));
        }
        if (id == "self-adjusting") {
            SelfAdjustConfig c = irace_config();
            c.alpha = j.value("alpha", c.alpha);
            c.beta = j.value("beta", c.beta);
            c.crossover_ratio = j.value("crossover_ratio", c.crossover_ratio);
            c.A = j.value("A", c.A);
            c.b = j.value("b", c.b);
            c.lambda_init = j.value("lambda_init", c.lambda_init);
            c.validate();
            return named(detail::label_with("self-adjusting", j, {"alpha", "beta", "crossover_ratio", "A", "b"}),
                         std::make_unique<SelfAdjustingPolicy>(c, "self-adjusting"));
        }
        if (id == "constant") {
            ParameterSet ps;
            ps.lambda_m = j.value("lambda_m", 1);
            ps.alpha = j.value("alpha", 1.0);
            ps.lambda_c = j.value("lambda_c", ps.lambda_m);
            ps.beta = j.value("beta", 1.0);
            ps.validate();
            return named(detail::label_with("constant", j, {"lambda_m", "alpha", "lambda_c", "beta"}),
                         std::make_unique<ConstantPolicy>(ps));
        }
        if (id == "table") {
            if (!j.contains("path")) throw ValidationError("policy 'table' needs a \"path\"");
            const fs::path p = detail::resolve(base_dir, j.at("path").get<std::string>());
            return named("table(" + p.stem().string() + ")", std::make_unique<TablePolicy>(TablePolicy::load(p.string())));
        }
        if (id == "composite") {
            PerParameterSource src{ParameterSource::theory(), ParameterSource::theory(), ParameterSource::theory(),
                                   ParameterSource::theory()};
            std::string label;
            for (const char* k : {"lambda_m", "alpha", "lambda_c", "beta"}) {
                if (!j.contains(k)) continue;
                const ParameterSource s = detail::parse_source(j.at(k), std::string("composite.") + k);
                if (std::string(k) == "lambda_m") src.lambda_m = s;
                else if (std::string(k) == "alpha") src.alpha = s;
                else if (std::string(k) == "lambda_c") src.lambda_c = s;
                else src.beta = s;
                if (s.kind != SourceKind::theory_default) label += std::string(label.empty() ? "" : "+") + k;
            }
            std::shared_ptr<const TablePolicy> table;
            if (j.contains("table"))
                table = std::make_shared<const TablePolicy>(
                    TablePolicy::load(detail::resolve(base_dir, j.at("table").get<std::string>()).string()));
            return named(label.empty() ? "theory" : label, std::make_unique<CompositePolicy>(src, table, "composite"));
        }
        if (id == "neural") {
            if (!j.contains("model")) throw ValidationError("policy 'neural' needs a \"model\" path");
            const fs::path p = detail::resolve(base_dir, j.at("model").get<std::string>());
            NeuralModel m = load_neural_model(p, j);
            return named("neural(" + p.stem().string() + ")",
                         std::make_unique<rl::NeuralPolicy>(std::move(m.params), std::move(m.spec), std::move(m.codec)));
        }
    } catch (const json::exception& e) {
        throw ValidationError("policy " + entry.dump() + ": " + e.what());
    } catch (const ContractViolation& e) {
        throw ValidationError("policy " + entry.dump() + ": " + e.what());
    }
    std::string known;
    for (const auto& k : known_policy_ids()) known += (known.empty() ? "" : ", ") + k;
    throw UsageError("unknown policy '" + id + "'; known policies: " + known);
}

// ---------------------------------------------------------------------------
// Manifests

struct Manifest {
    std::string command;
    std::vector<std::size_t> sizes;
    std::vector<json> policies;
    std::size_t seeds = 1000;
    std::uint64_t master_seed = 42;
    std::string output_dir;
    unsigned parallel = 0;  // 0 = all cores
    double cutoff_factor = 0.8;
    double level = 0.01;
    bool trajectories = false;
    bool plot = false;
    json train = json::object();
    json rows;                 // ablate: list of composite rows, or "dmp-ablation"
    json masks;                // ablate: list of controlled-parameter lists
    std::string table;         // table: "baselines" or "dmp-ablation"
    std::uint64_t checkpoint_every = 0;
    bool resume = false;
    fs::path base_dir;         // directory of the manifest file
    std::string version = "dev";

    unsigned threads() const { return parallel == 0 ? default_parallelism() : parallel; }
    std::uint64_t cutoff(std::size_t n) const { return default_cutoff(n, cutoff_factor); }
};

inline const std::vector<std::string>& known_commands() {
    static const std::vector<std::string> c{"run", "train", "compare", "ablate", "export", "table"};
    return c;
}

inline Manifest manifest_from_json(const json& j, const fs::path& base_dir = {}) {
    if (!j.is_object()) throw ValidationError("manifest must be a JSON object");
    std::vector<std::string> p;
    const std::string w;
    detail::reject_unknown(j, {"command", "sizes", "policies", "seeds", "master_seed", "output_dir", "parallel",
                               "cutoff_factor", "level", "trajectories", "plot", "train", "rows", "masks", "table",
                               "checkpoint_every", "resume"},
                           p, w);
    Manifest m;
    m.base_dir = base_dir;
    m.command = detail::get_field(j, "command", m.command, p, w);
    m.sizes = detail::get_field(j, "sizes", m.sizes, p, w);
    m.seeds = detail::get_field(j, "seeds", m.seeds, p, w);
    m.master_seed = detail::get_field(j, "master_seed", m.master_seed, p, w);
    m.output_dir = detail::get_field(j, "output_dir", m.output_dir, p, w);
    m.parallel = detail::get_field(j, "parallel", m.parallel, p, w);
    m.cutoff_factor = detail::get_field(j, "cutoff_factor", m.cutoff_factor, p, w);
    m.level = detail::get_field(j, "level", m.level, p, w);
    m.trajectories = detail::get_field(j, "trajectories", m.trajectories, p, w);
    m.plot = detail::get_field(j, "plot", m.plot, p, w);
    m.table = detail::get_field(j, "table", m.table, p, w);
    m.checkpoint_every = detail::get_field(j, "checkpoint_every", m.checkpoint_every, p, w);
    m.resume = detail::get_field(j, "resume", m.resume, p, w);
    if (j.contains("policies")) {
        if (!j.at("policies").is_array()) p.push_back("policies: must be an array");
        else m.policies = j.at("policies").get<std::vector<json>>();
    }
    if (j.contains("train")) m.train = j.at("train");
    if (j.contains("rows")) m.rows = j.at("rows");
    if (j.contains("masks")) m.masks = j.at("masks");
    detail::throw_problems("invalid manifest:", p);
    return m;
}

inline Manifest load_manifest(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw UsageError("cannot open manifest " + path.string());
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw ValidationError("manifest " + path.string() + " is not valid JSON: " + e.what());
    }
    return manifest_from_json(j, path.parent_path());
}

/// Output directory: manifest/flag value, else $ONELL_OUTPUT_ROOT/<command>,
/// else results/<command>.
inline fs::path output_directory(const Manifest& m) {
    if (!m.output_dir.empty()) return m.output_dir;
    if (const char* root = std::getenv(kOutputRootEnv); root && *root) return fs::path(root) / m.command;
    return fs::path("results") / m.command;
}

inline std::string output_stem(const std::string& kind, const std::string& label, std::size_t n, std::size_t seeds,
                               const std::string& version) {
    return kind + "_" + detail::sanitize(label) + "_n" + std::to_string(n) + "_s" + std::to_string(seeds) + "_" +
           detail::sanitize(version);
}

struct CommandResult {
    std::vector<fs::path> files;
};

namespace detail {

inline void common_checks(const Manifest& m, bool needs_policies, bool needs_sizes) {
    std::vector<std::string> p;
    if (needs_sizes && m.sizes.empty()) p.push_back("sizes: at least one problem size is required");
    for (auto n : m.sizes)
        if (n < 1) p.push_back("sizes: problem sizes must be positive");
    if (needs_policies && m.policies.empty()) p.push_back("policies: at least one policy is required");
    if (!(m.cutoff_factor > 0.0)) p.push_back("cutoff_factor: must be positive");
    if (!(m.level > 0.0 && m.level < 1.0)) p.push_back("level: must lie in (0, 1)");
    throw_problems("invalid manifest:", p);
}

inline void require_seeds(const Manifest& m) {
    if (m.seeds == 0) throw UsageError("seeds must be at least 1 (got 0)");
}

inline fs::path prepare_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw ValidationError("output directory " + dir.string() + " is not writable");
    return dir;
}

inline void write_text(const fs::path& path, const std::string& text, CommandResult& res) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << text;
    res.files.push_back(path);
}

inline std::string summary_csv_header() { return "policy,n,runs,successes,ert,normalized_ert,std\n"; }

inline std::string summary_csv_row(const std::string& label, const ErtSummary& s) {
    return label + "," + std::to_string(s.n) + "," + std::to_string(s.runs) + "," + std::to_string(s.successes) + "," +
           onell::detail::format_real(s.ert) + "," + onell::detail::format_real(s.normalized_ert) + "," +
           onell::detail::format_real(s.std) + "\n";
}

inline void log_summary(std::ostream& log, const std::string& label, const ErtSummary& s) {
    log << label << "  n=" << s.n << "  ERT/n=" << onell::detail::format_fixed(s.normalized_ert, 3)
        << "  std/n=" << onell::detail::format_fixed(s.std / static_cast<double>(s.n), 3) << "  success "
        << s.successes << "/" << s.runs << '\n';
}

struct LabeledEntry {
    std::string label;
    json spec;
};

inline std::vector<LabeledEntry> resolve_entries(const std::vector<json>& entries, const fs::path& base) {
    std::vector<LabeledEntry> out;
    std::set<std::string> seen;
    for (const auto& e : entries) {
        NamedPolicy np = make_policy(e, base);
        std::string label = np.label;
        for (int k = 2; seen.count(label); ++k) label = np.label + "#" + std::to_string(k);
        seen.insert(label);
        out.push_back({label, e});
    }
    return out;
}

inline std::size_t seeds_for(const json& entry, std::size_t fallback) {
    if (entry.is_object() && entry.contains("seeds")) return entry.at("seeds").get<std::size_t>();
    return fallback;
}

inline json strip_keys(json e, std::initializer_list<const char*> keys) {
    if (e.is_object())
        for (const char* k : keys) e.erase(k);
    return e;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Commands

/// Evaluates every (policy, n) cell and writes per-cell JSON and a summary CSV.
inline CommandResult cmd_run(const Manifest& m, std::ostream& log) {
    detail::common_checks(m, true, true);
    detail::require_seeds(m);
    const fs::path dir = detail::prepare_dir(output_directory(m));
    const auto entries = detail::resolve_entries(m.policies, m.base_dir);
    const auto seeds = seed_range(m.seeds);
    CommandResult res;
    std::string csv = detail::summary_csv_header();
    for (const auto& e : entries) {
        for (auto n : m.sizes) {
            NamedPolicy np = make_policy(detail::strip_keys(e.spec, {"seeds"}), m.base_dir);
            const EvaluationResult r = evaluate_policy(*np.policy, n, seeds, m.master_seed, m.cutoff(n), m.threads());
            detail::log_summary(log, e.label, r.summary);
            csv += detail::summary_csv_row(e.label, r.summary);
            const std::string stem = output_stem("run", e.label, n, m.seeds, m.version);
            json out{{"policy", e.label},   {"spec", e.spec},        {"master_seed", m.master_seed},
                     {"cutoff", m.cutoff(n)}, {"summary", to_json(r.summary)}, {"seeds", r.seeds},
                     {"evaluations", r.evaluations}, {"success", r.success}};
            detail::write_text(dir / (stem + ".json"), out.dump(2) + "\n", res);
            if (m.trajectories) {
                PolicyPtr p = np.policy->clone();
                RngStream rng(m.master_seed, seeds.front());
                EpisodeOptions opts;
                opts.cutoff = m.cutoff(n);
                opts.record_trajectory = true;
                const RunResult rr = run_episode(*p, n, Target(n), opts, rng);
                std::ostringstream os;
                write_trajectory_csv(os, *rr.trajectory);
                detail::write_text(dir / ("trajectory_" + detail::sanitize(e.label) + "_n" + std::to_string(n) + "_seed" +
                                          std::to_string(seeds.front()) + "_" + detail::sanitize(m.version) + ".csv"),
                                   os.str(), res);
            }
        }
    }
    detail::write_text(dir / ("run_summary_s" + std::to_string(m.seeds) + "_" + detail::sanitize(m.version) + ".csv"), csv,
                       res);
    return res;
}

namespace detail {

inline CommandResult write_table(const ComparisonTable& t, const fs::path& dir, const std::string& stem,
                                 std::ostream& log) {
    CommandResult res;
    std::ostringstream csv;
    t.write_csv(csv);
    write_text(dir / (stem + ".csv"), csv.str(), res);
    std::ostringstream txt;
    t.write_text(txt);
    write_text(dir / (stem + ".txt"), txt.str(), res);
    write_text(dir / (stem + ".json"), to_json(t).dump(2) + "\n", res);
    log << txt.str();
    return res;
}

inline ComparisonTable evaluate_table(const std::vector<LabeledEntry>& entries, const Manifest& m, std::ostream& log) {
    std::vector<TableInput> inputs;
    for (auto n : m.sizes) {
        for (const auto& e : entries) {
            NamedPolicy np = make_policy(strip_keys(e.spec, {"seeds"}), m.base_dir);
            const auto seeds = seed_range(seeds_for(e.spec, m.seeds));
            TableInput in{e.label, n, evaluate_policy(*np.policy, n, seeds, m.master_seed, m.cutoff(n), m.threads())};
            log_summary(log, e.label, in.result.summary);
            inputs.push_back(std::move(in));
        }
    }
    return comparison_table(inputs, m.level);
}

}  // namespace detail

/// Comparison table over policies and sizes with significance marks.
inline CommandResult cmd_compare(const Manifest& m, std::ostream& log) {
    detail::common_checks(m, true, true);
    detail::require_seeds(m);
    std::set<std::size_t> counts;
    for (const auto& e : m.policies) counts.insert(detail::seeds_for(e, m.seeds));
    if (counts.size() > 1)
        throw ValidationError("compare: all policies must use the same number of seeds (paired tests)");
    if (*counts.begin() == 0) throw UsageError("seeds must be at least 1 (got 0)");
    const fs::path dir = detail::prepare_dir(output_directory(m));
    const auto entries = detail::resolve_entries(m.policies, m.base_dir);
    const ComparisonTable t = detail::evaluate_table(entries, m, log);
    const std::string stem = "compare_s" + std::to_string(m.seeds) + "_" + detail::sanitize(m.version);
    return detail::write_table(t, dir, stem, log);
}

/// The seven symbolic rows of the derived-policy ablation.
inline std::vector<json> dmp_ablation_rows() {
    return {
        json{{"id", "composite"}, {"label", "theory"}},
        json{{"id", "composite"}, {"label", "lambda_m"}, {"lambda_m", "dmp"}},
        json{{"id", "composite"}, {"label", "alpha"}, {"alpha", "dmp"}},
        json{{"id", "composite"}, {"label", "lambda_c"}, {"lambda_c", "dmp"}},
        json{{"id", "composite"}, {"label", "alpha+lambda_c"}, {"alpha", "dmp"}, {"lambda_c", "dmp"}},
        json{{"id", "composite"}, {"label", "lambda_m+lambda_c"}, {"lambda_m", "dmp"}, {"lambda_c", "dmp"}},
        json{{"id", "composite"}, {"label", "dmp"}, {"lambda_m", "dmp"}, {"alpha", "dmp"}, {"lambda_c", "dmp"}},
    };
}

inline std::vector<json> baseline_policies() {
    return {json("theory"), json{{"id", "one-fifth"}, {"F", kDefaultOneFifthF}}, json("irace"), json("dmp")};
}

namespace detail {

inline void write_artifact(const rl::TrainingArtifact& art, const fs::path& dir, CommandResult& res) {
    prepare_dir(dir);
    std::ostringstream curve;
    art.write_learning_curve(curve);
    write_text(dir / "learning_curve.csv", curve.str(), res);
    std::string fin = "checkpoint_step,eval_normalized_ert,final_runs,final_successes,final_ert,final_normalized_ert,final_std\n";
    for (const auto& f : art.finalists) {
        const auto& c = art.checkpoints[f.checkpoint];
        fin += std::to_string(c.step) + "," + onell::detail::format_real(c.eval.normalized_ert) + "," +
               std::to_string(f.summary.runs) + "," + std::to_string(f.summary.successes) + "," +
               onell::detail::format_real(f.summary.ert) + "," + onell::detail::format_real(f.summary.normalized_ert) +
               "," + onell::detail::format_real(f.summary.std) + "\n";
    }
    write_text(dir / "finalists.csv", fin, res);
    save_neural_model(dir / "best_model.bin", art.best_checkpoint().params, art.spec, art.codec(), art.config.n);
    res.files.push_back(dir / "best_model.bin");
    std::ostringstream table;
    rl::export_learned_policy(art, art.config.n).write_csv(table);
    write_text(dir / "best_policy.csv", table.str(), res);
    json summary{{"seed", art.seed},
                 {"config", to_json(art.config)},
                 {"reward_bias", art.reward_bias},
                 {"best_checkpoint_step", art.best_checkpoint().step},
                 {"best", to_json(art.best_summary())}};
    write_text(dir / "summary.json", summary.dump(2) + "\n", res);
}

struct Campaign {
    std::vector<rl::TrainingArtifact> reps;
    std::size_t best = 0;
};

inline Campaign run_campaign(const rl::TrainConfig& cfg, const Manifest& m, const fs::path& dir, std::ostream& log,
                             CommandResult& res) {
    Campaign c;
    for (std::size_t r = 0; r < cfg.repetitions; ++r) {
        const std::uint64_t seed = derive_seed(m.master_seed, r);
        const fs::path rep_dir = prepare_dir(dir / ("rep" + std::to_string(r)));
        const fs::path state_path = rep_dir / "trainer.state";
        std::unique_ptr<rl::Trainer> t;
        if (m.resume && fs::exists(state_path)) {
            std::ifstream is(state_path, std::ios::binary);
            t = std::make_unique<rl::Trainer>(rl::Trainer::resume(cfg, seed, is, m.threads()));
            log << "rep " << r << ": resumed at step " << t->steps_done() << '\n';
        } else {
            t = std::make_unique<rl::Trainer>(cfg, seed, m.threads());
        }
        t->on_evaluation([&log, r, n = cfg.n](const rl::Checkpoint& ck) {
            log << "rep " << r << " step " << ck.step << "  eval ERT/n=" << onell::detail::format_fixed(ck.eval.normalized_ert, 3)
                << "  std/n=" << onell::detail::format_fixed(ck.eval.std / static_cast<double>(n), 3) << '\n';
        });
        t->warm_up();
        while (!t->finished()) {
            const std::uint64_t chunk = m.checkpoint_every ? m.checkpoint_every : cfg.budget;
            t->run(chunk);
            if (m.checkpoint_every) {
                std::ofstream os(state_path, std::ios::binary);
                t->save_state(os);
            }
        }
        c.reps.push_back(t->finish());
        write_artifact(c.reps.back(), rep_dir, res);
        log << "rep " << r << ": best ERT/n=" << onell::detail::format_fixed(c.reps.back().best_summary().normalized_ert, 3)
            << " (step " << c.reps.back().best_checkpoint().step << ")\n";
        if (c.reps.back().best_summary().ert < c.reps[c.best].best_summary().ert) c.best = r;
    }
    return c;
}

}  // namespace detail

/// DDQN training campaigns, one per problem size, each with
/// `repetitions` independent runs and an overall best policy.
inline CommandResult cmd_train(const Manifest& m, std::ostream& log) {
    rl::TrainConfig base = train_config_from_json(m.train);
    std::vector<std::size_t> sizes = m.sizes.empty() ? std::vector<std::size_t>{base.n} : m.sizes;
    const fs::path dir = detail::prepare_dir(output_directory(m));
    CommandResult res;
    for (auto n : sizes) {
        rl::TrainConfig cfg = base;
        cfg.n = n;
        cfg.validate();
        const std::string tag = "ddqn-" + rl::to_string(cfg.action_mode) + "-" + cfg.controlled.to_string();
        const fs::path cdir = detail::prepare_dir(dir / output_stem("train", tag, n, cfg.repetitions, m.version));
        auto camp = detail::run_campaign(cfg, m, cdir, log, res);
        const auto& best = camp.reps[camp.best];
        std::ostringstream table;
        rl::export_learned_policy(best, n).write_csv(table);
        detail::write_text(cdir / "best_policy.csv", table.str(), res);
        save_neural_model(cdir / "best_model.bin", best.best_checkpoint().params, best.spec, best.codec(), n);
        res.files.push_back(cdir / "best_model.bin");
        json reps = json::array();
        for (const auto& a : camp.reps) reps.push_back({{"seed", a.seed}, {"best", to_json(a.best_summary())}});
        detail::write_text(cdir / "best_of.json",
                           json{{"best_repetition", camp.best}, {"best", to_json(best.best_summary())}, {"repetitions", reps}}
                                   .dump(2) + "\n",
                           res);
    }
    return res;
}

/// Symbolic rows (composite policies) or RL masks, one ERT row each.
inline CommandResult cmd_ablate(const Manifest& m, std::ostream& log) {
    detail::common_checks(m, false, true);
    detail::require_seeds(m);
    const bool symbolic = !m.rows.is_null();
    const bool rl_masks = !m.masks.is_null();
    if (symbolic == rl_masks) throw UsageError("ablate: give exactly one of \"rows\" (symbolic) or \"masks\" (RL)");
    const fs::path dir = detail::prepare_dir(output_directory(m));

    std::vector<json> rows;
    CommandResult res;
    if (symbolic) {
        if (m.rows.is_string() && m.rows.get<std::string>() == "dmp-ablation") rows = dmp_ablation_rows();
        else if (m.rows.is_array()) rows = m.rows.get<std::vector<json>>();
        else throw ValidationError("rows: expected \"dmp-ablation\" or an array of composite rows");
        if (rows.empty()) throw UsageError("ablate: empty row list");
        for (auto& r : rows)
            if (r.is_object() && !r.contains("id")) r["id"] = "composite";
    } else {
        if (!m.masks.is_array() || m.masks.empty()) throw UsageError("ablate: empty mask list");
        rl::TrainConfig base = train_config_from_json(m.train);
        for (const auto& mk : m.masks) {
            rl::TrainConfig cfg = base;
            cfg.n = m.sizes.front();
            try {
                cfg.controlled = rl::ControlMask::parse(mk.get<std::vector<std::string>>());
            } catch (const json::exception&) {
                throw ValidationError("masks: each mask must be a list of parameter names");
            }
            cfg.validate();
            for (auto n : m.sizes) {
                cfg.n = n;
                const fs::path cdir = detail::prepare_dir(
                    dir / output_stem("mask", cfg.controlled.to_string(), n, cfg.repetitions, m.version));
                auto camp = detail::run_campaign(cfg, m, cdir, log, res);
                std::ostringstream table;
                rl::export_learned_policy(camp.reps[camp.best], n).write_csv(table);
                detail::write_text(cdir / "best_policy.csv", table.str(), res);
            }
        }
        // Each mask's best policy is re-evaluated on the shared seeds below.
        for (const auto& mk : m.masks) {
            const auto mask = rl::ControlMask::parse(mk.get<std::vector<std::string>>());
            rows.push_back(json{{"id", "table"}, {"label", mask.to_string()}});
        }
    }

    std::vector<TableInput> inputs;
    for (auto n : m.sizes) {
        for (std::size_t i = 0; i < rows.size(); ++i) {
            json spec = rows[i];
            if (rl_masks) {
                const auto mask = rl::ControlMask::parse(m.masks[i].get<std::vector<std::string>>());
                rl::TrainConfig cfg = train_config_from_json(m.train);
                spec["path"] = (dir / output_stem("mask", mask.to_string(), n, cfg.repetitions, m.version) / "best_policy.csv").string();
            }
            NamedPolicy np = make_policy(spec, m.base_dir);
            TableInput in{np.label, n, evaluate_policy(*np.policy, n, seed_range(m.seeds), m.master_seed, m.cutoff(n), m.threads())};
            detail::log_summary(log, np.label, in.result.summary);
            inputs.push_back(std::move(in));
        }
    }
    const ComparisonTable t = comparison_table(inputs, m.level);
    auto out = detail::write_table(t, dir, "ablate_s" + std::to_string(m.seeds) + "_" + detail::sanitize(m.version), log);
    res.files.insert(res.files.end(), out.files.begin(), out.files.end());
    return res;
}

/// Policy tables for every (policy, n) and, with `plot`, ERT-vs-n series.
inline CommandResult cmd_export(const Manifest& m, std::ostream& log) {
    detail::common_checks(m, true, true);
    const fs::path dir = detail::prepare_dir(output_directory(m));
    const auto entries = detail::resolve_entries(m.policies, m.base_dir);
    CommandResult res;
    for (const auto& e : entries) {
        for (auto n : m.sizes) {
            NamedPolicy np = make_policy(e.spec, m.base_dir);
            const TablePolicy t = TablePolicy::from_policy(*np.policy, n, e.label);
            std::ostringstream os;
            t.write_csv(os);
            detail::write_text(dir / ("policy_" + detail::sanitize(e.label) + "_n" + std::to_string(n) + "_" +
                                      detail::sanitize(m.version) + ".csv"),
                               os.str(), res);
        }
    }
    if (m.plot) {
        detail::require_seeds(m);
        std::string csv = "policy,n,normalized_ert,std_normalized,successes,runs\n";
        for (const auto& e : entries) {
            for (auto n : m.sizes) {
                NamedPolicy np = make_policy(e.spec, m.base_dir);
                const auto r = evaluate_policy(*np.policy, n, seed_range(m.seeds), m.master_seed, m.cutoff(n), m.threads());
                detail::log_summary(log, e.label, r.summary);
                csv += e.label + "," + std::to_string(n) + "," + onell::detail::format_real(r.summary.normalized_ert) + "," +
                       onell::detail::format_real(r.summary.std / static_cast<double>(n)) + "," +
                       std::to_string(r.summary.successes) + "," + std::to_string(r.summary.runs) + "\n";
            }
        }
        detail::write_text(dir / ("ert_vs_n_s" + std::to_string(m.seeds) + "_" + detail::sanitize(m.version) + ".csv"), csv,
                           res);
    }
    return res;
}

/// Desk-scale reproduction of the baseline or derived-policy tables.
inline CommandResult cmd_table(const Manifest& m, std::ostream& log) {
    detail::require_seeds(m);
    Manifest mm = m;
    std::string which = m.table.empty() ? "baselines" : m.table;
    if (which == "baselines") {
        if (mm.sizes.empty()) mm.sizes = {100, 500, 2000};
        if (mm.policies.empty()) mm.policies = baseline_policies();
    } else if (which == "dmp-ablation") {
        if (mm.sizes.empty()) mm.sizes = {500, 1000, 2000, 3000};
        mm.policies = dmp_ablation_rows();
    } else {
        throw UsageError("table: unknown table '" + which + "' (expected baselines or dmp-ablation)");
    }
    detail::common_checks(mm, true, true);
    const fs::path dir = detail::prepare_dir(output_directory(mm));
    const auto entries = detail::resolve_entries(mm.policies, mm.base_dir);
    const ComparisonTable t = detail::evaluate_table(entries, mm, log);
    return detail::write_table(t, dir, "table_" + which + "_s" + std::to_string(mm.seeds) + "_" + detail::sanitize(mm.version), log);
}

inline CommandResult dispatch(const Manifest& m, std::ostream& log) {
    if (m.command == "run") return cmd_run(m, log);
    if (m.command == "train") return cmd_train(m, log);
    if (m.command == "compare") return cmd_compare(m, log);
    if (m.command == "ablate") return cmd_ablate(m, log);
    if (m.command == "export") return cmd_export(m, log);
    if (m.command == "table") return cmd_table(m, log);
    throw UsageError("unknown command '" + m.command + "' (expected run, train, compare, ablate, export or table)");
}

}  // namespace onell::exp
