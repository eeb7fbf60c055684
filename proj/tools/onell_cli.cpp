// Command-line front end: every subcommand reads an optional JSON manifest
// and applies flag overrides on top of it.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "onell/experiment.hpp"

#ifndef ONELL_VERSION
#define ONELL_VERSION "dev"
#endif

namespace {

enum ExitCode { kOk = 0, kUsage = 2, kValidation = 3, kRuntime = 4 };

using onell::exp::json;

// "id" | "id:key=value,key=value" | inline JSON object
json parse_policy_flag(const std::string& s) {
    if (!s.empty() && s.front() == '{') {
        try {
            return json::parse(s);
        } catch (const json::exception& e) {
            throw onell::UsageError("--policy: invalid JSON: " + std::string(e.what()));
        }
    }
    const auto colon = s.find(':');
    if (colon == std::string::npos) return json(s);
    json j{{"id", s.substr(0, colon)}};
    std::string rest = s.substr(colon + 1);
    std::size_t pos = 0;
    while (pos <= rest.size()) {
        const auto comma = rest.find(',', pos);
        const std::string kv = rest.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw onell::UsageError("--policy: expected key=value, got '" + kv + "'");
        const std::string key = kv.substr(0, eq);
        const std::string val = kv.substr(eq + 1);
        double num = 0;
        if (onell::detail::parse_real(val, num)) j[key] = num;
        else j[key] = val;
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return j;
}

struct Overrides {
    std::string manifest;
    std::vector<std::size_t> sizes;
    std::vector<std::string> policies;
    std::optional<std::size_t> seeds;
    std::optional<std::uint64_t> master_seed;
    std::string out;
    std::optional<unsigned> parallel;
    std::optional<double> cutoff_factor;
    std::optional<double> level;
    bool trajectories = false;
    bool plot = false;
    std::string table;
    std::string rows;
    std::vector<std::string> masks;
    std::string train_config;
    std::optional<std::uint64_t> budget;
    std::optional<std::size_t> repetitions;
    std::optional<std::uint64_t> checkpoint_every;
    bool resume = false;
};

void add_common(CLI::App* sub, Overrides& o) {
    sub->add_option("-m,--manifest", o.manifest, "JSON manifest; flags override its fields");
    sub->add_option("-n,--sizes", o.sizes, "Problem sizes");
    sub->add_option("-p,--policy", o.policies, "Policy: id, id:key=value,... or a JSON object");
    sub->add_option("-s,--seeds", o.seeds, "Number of seeds (runs) per cell");
    sub->add_option("--master-seed", o.master_seed, "Master seed");
    sub->add_option("-o,--out", o.out, "Output directory (default $ONELL_OUTPUT_ROOT/<command>)");
    sub->add_option("-j,--parallel", o.parallel, "Worker threads (default: all cores)");
    sub->add_option("--cutoff-factor", o.cutoff_factor, "Evaluation cutoff as a multiple of n^2");
    sub->add_option("--level", o.level, "Significance level");
}

onell::exp::Manifest build_manifest(const std::string& command, const Overrides& o) {
    onell::exp::Manifest m;
    if (!o.manifest.empty()) m = onell::exp::load_manifest(o.manifest);
    if (!m.command.empty() && m.command != command)
        throw onell::UsageError("manifest is for '" + m.command + "' but the subcommand is '" + command + "'");
    m.command = command;
    if (!o.sizes.empty()) m.sizes = o.sizes;
    if (!o.policies.empty()) {
        m.policies.clear();
        for (const auto& p : o.policies) m.policies.push_back(parse_policy_flag(p));
    }
    if (o.seeds) m.seeds = *o.seeds;
    if (o.master_seed) m.master_seed = *o.master_seed;
    if (!o.out.empty()) m.output_dir = o.out;
    if (o.parallel) m.parallel = *o.parallel;
    if (o.cutoff_factor) m.cutoff_factor = *o.cutoff_factor;
    if (o.level) m.level = *o.level;
    if (o.trajectories) m.trajectories = true;
    if (o.plot) m.plot = true;
    if (!o.table.empty()) m.table = o.table;
    if (!o.rows.empty()) m.rows = o.rows;
    if (!o.masks.empty()) {
        m.masks = json::array();
        for (const auto& s : o.masks) {
            std::vector<std::string> names;
            std::size_t pos = 0;
            while (true) {
                const auto plus = s.find('+', pos);
                names.push_back(s.substr(pos, plus == std::string::npos ? std::string::npos : plus - pos));
                if (plus == std::string::npos) break;
                pos = plus + 1;
            }
            m.masks.push_back(names);
        }
    }
    if (!o.train_config.empty()) {
        std::ifstream is(o.train_config);
        if (!is) throw onell::UsageError("cannot open training config " + o.train_config);
        try {
            is >> m.train;
        } catch (const json::exception& e) {
            throw onell::ValidationError("training config is not valid JSON: " + std::string(e.what()));
        }
    }
    if (o.budget) m.train["budget"] = *o.budget;
    if (o.repetitions) m.train["repetitions"] = *o.repetitions;
    if (o.checkpoint_every) m.checkpoint_every = *o.checkpoint_every;
    if (o.resume) m.resume = true;
    m.version = ONELL_VERSION;
    return m;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Parameter control for the (1+(lambda,lambda)) GA on OneMax"};
    app.set_version_flag("--version", std::string(ONELL_VERSION));
    app.require_subcommand(1);

    Overrides o;
    auto* run = app.add_subcommand("run", "Evaluate policies and write ERT summaries");
    add_common(run, o);
    run->add_flag("--trajectories", o.trajectories, "Also dump the first seed's trajectory");

    auto* train = app.add_subcommand("train", "Train DDQN policies");
    add_common(train, o);
    train->add_option("-c,--train-config", o.train_config, "JSON training config (replaces the manifest's)");
    train->add_option("--budget", o.budget, "Training steps per repetition");
    train->add_option("--repetitions", o.repetitions, "Independent training repetitions");
    train->add_option("--checkpoint-every", o.checkpoint_every, "Save resumable trainer state every K steps");
    train->add_flag("--resume", o.resume, "Resume repetitions from saved trainer state");

    auto* compare = app.add_subcommand("compare", "Comparison table with paired tests");
    add_common(compare, o);

    auto* ablate = app.add_subcommand("ablate", "Symbolic or RL ablation over controlled parameters");
    add_common(ablate, o);
    ablate->add_option("--rows", o.rows, "Symbolic rows preset (dmp-ablation)");
    ablate->add_option("--mask", o.masks, "RL mask such as lambda_m+alpha (repeatable)");
    ablate->add_option("-c,--train-config", o.train_config, "JSON training config for RL masks");
    ablate->add_option("--budget", o.budget, "Training steps per repetition");
    ablate->add_option("--repetitions", o.repetitions, "Independent training repetitions");

    auto* exp = app.add_subcommand("export", "Policy tables and ERT-vs-n plot data");
    add_common(exp, o);
    exp->add_flag("--plot", o.plot, "Evaluate and write ERT-vs-n series");

    auto* table = app.add_subcommand("table", "Reproduce a results table at desk scale");
    add_common(table, o);
    table->add_option("--table", o.table, "baselines or dmp-ablation");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        const std::string command = app.get_subcommands().front()->get_name();
        const onell::exp::Manifest m = build_manifest(command, o);
        const auto res = onell::exp::dispatch(m, std::cout);
        for (const auto& f : res.files) std::cerr << "wrote " << f.string() << '\n';
        return kOk;
    } catch (const onell::UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kUsage;
    } catch (const onell::ValidationError& e) {
        std::cerr << "validation error: " << e.what() << '\n';
        return kValidation;
    } catch (const onell::LoadError& e) {
        std::cerr << "validation error: " << e.what() << '\n';
        return kValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kRuntime;
    }
}
