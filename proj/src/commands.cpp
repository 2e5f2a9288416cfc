#include "fedsem/commands.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "fedsem/error.hpp"

namespace fedsem::cli {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string format_real(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::string fixed6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

// Prefixes runtime errors with the stage that raised them. Configuration
// errors pass through unchanged so they keep their exit code.
template <typename Fn>
auto in_stage(const char* stage, Fn fn) {
    try {
        return fn();
    } catch (const ConfigError&) {
        throw;
    } catch (const InvalidConfig& e) {
        throw InvalidConfig(std::string(stage) + ": " + e.what());
    } catch (const IoError& e) {
        throw IoError(std::string(stage) + ": " + e.what());
    } catch (const Error& e) {
        throw Error(std::string(stage) + ": " + e.what());
    }
}

std::string percent(double fraction) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f%%", fraction * 100.0);
    return buf;
}

std::string render_fedavg_summary(const ordered_json& result) {
    std::ostringstream out;
    out << "FedAvg without a pseudo-labeling phase; accuracies in percent.\n";
    char line[256];
    std::snprintf(line, sizeof(line), "%-10s %-9s %-9s %-14s %-14s\n", "% labeled", "# rounds", "# epochs",
                  "best acc", "final acc");
    out << line;
    std::snprintf(line, sizeof(line), "%-10g %-9zu %-9zu %-14s %-14s\n", result.at("labeled_percent").get<double>(),
                  result.at("rounds").get<std::size_t>(), result.at("epochs").get<std::size_t>(),
                  percent(result.at("best_accuracy").get<double>()).c_str(),
                  percent(result.at("final_accuracy").get<double>()).c_str());
    out << line;
    return out.str();
}

}  // namespace

PreparedData prepare_data(const config::ExperimentConfig& config) {
    return in_stage("data preparation", [&] {
        PreparedData prepared;
        data::Dataset raw;
        if (config.source == config::DataSource::synthetic) {
            data::SyntheticSpec spec = config.synthetic;
            spec.seed = config.resolved_dataset_seed();
            raw = data::generate_synthetic(spec);
        } else {
            raw = data::load_csv(config.csv_path, config.synthetic.num_classes, config.csv_has_header);
        }
        data::PartitionSpec spec = config.partition;
        spec.num_clients = config.federation().num_clients;
        spec.seed = config.resolved_partition_seed();
        prepared.shards = data::split_train_test(data::partition(raw, spec), config.train_ratio, config.split_seed());
        prepared.dataset =
            data::mask_labels(raw, prepared.shards, config.labeled_fraction, config.mask_mode, config.resolved_mask_seed());
        return prepared;
    });
}

RunOutcome run_experiment(const config::ExperimentConfig& config, std::ostream* progress) {
    const PreparedData prepared = prepare_data(config);
    RunOutcome outcome;
    if (config.fedsem_enabled) {
        outcome.fedsem = in_stage("fedsem", [&] {
            return phases::run_fedsem(config.fedsem, prepared.shards, prepared.dataset);
        });
        const auto& result = *outcome.fedsem;
        outcome.history = result.history;
        outcome.summary = metrics::summarize(result, config.fedsem, config.labeled_fraction);
        outcome.result_json = metrics::result_to_json(result, *outcome.summary);
        outcome.result_json["mode"] = "fedsem";
        const std::vector<metrics::SummaryRow> rows{*outcome.summary};
        outcome.summary_text = metrics::render_summary(rows);
    } else {
        outcome.fedavg = in_stage("fedavg", [&] {
            return federation::run_fedavg(config.federation(), prepared.shards, prepared.dataset, true);
        });
        outcome.history = outcome.fedavg.history;
        double best = 0.0;
        for (const auto& r : outcome.history) {
            best = std::max(best, r.test_accuracy);
        }
        ordered_json j;
        j["mode"] = "fedavg";
        j["labeled_percent"] = config.labeled_fraction * 100.0;
        j["rounds"] = config.federation().rounds;
        j["epochs"] = config.federation().local_epochs;
        j["best_accuracy"] = best;
        j["final_accuracy"] = outcome.history.empty() ? 0.0 : outcome.history.back().test_accuracy;
        j["final_loss"] = outcome.history.empty() ? 0.0 : outcome.history.back().test_loss;
        j["model"] = metrics::params_to_json(outcome.fedavg.global_params);
        outcome.result_json = std::move(j);
        outcome.summary_text = render_fedavg_summary(outcome.result_json);
    }
    outcome.result_json["config"] = config::serialize_config(config);
    if (progress) {
        for (const auto& r : outcome.history) {
            *progress << "round " << r.round << " [" << to_string(r.phase) << "] acc=" << fixed6(r.test_accuracy)
                      << " loss=" << fixed6(r.test_loss) << '\n';
        }
    }
    return outcome;
}

void write_run_outputs(const RunOutcome& outcome, const config::ExperimentConfig& config,
                       const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) {
        throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
    }
    if (config.write_csv) {
        metrics::export_history(outcome.history, dir / "history.csv", metrics::HistoryFormat::csv);
    }
    if (config.write_json) {
        metrics::export_history(outcome.history, dir / "history.json", metrics::HistoryFormat::json);
    }
    metrics::write_text_file(dir / "result.json", outcome.result_json.dump(2) + "\n");
    metrics::write_text_file(dir / "summary.txt", outcome.summary_text);
}

std::string render_report(const json& result) {
    try {
        const std::string mode = result.at("mode").get<std::string>();
        if (mode == "fedsem") {
            const std::vector<metrics::SummaryRow> rows{metrics::summary_from_json(result.at("summary"))};
            return metrics::render_summary(rows);
        }
        if (mode == "fedavg") {
            return render_fedavg_summary(ordered_json(result));
        }
        throw IoError("result.json has unknown mode '" + mode + "'");
    } catch (const json::exception& e) {
        throw IoError(std::string("malformed result.json: ") + e.what());
    }
}

SweepAxis parse_axis(const std::string& text) {
    const auto eq = text.find('=');
    if (eq == std::string::npos) {
        throw ConfigError("sweep axis '" + text + "' must look like name=v1,v2");
    }
    SweepAxis axis;
    const std::string name = text.substr(0, eq);
    if (name == "fraction" || name == "labeled_fraction") {
        axis.key = "labels.fraction";
    } else if (name == "epochs") {
        axis.key = "federation.local_epochs";
    } else if (name == "rounds") {
        axis.key = "federation.rounds";
    } else if (name == "seed") {
        axis.key = "federation.master_seed";
    } else {
        const auto& keys = config::known_keys();
        if (std::find(keys.begin(), keys.end(), name) == keys.end()) {
            throw ConfigError("sweep axis names unknown key '" + name + "'");
        }
        axis.key = name;
    }
    std::stringstream ss(text.substr(eq + 1));
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) {
            axis.values.push_back(item);
        }
    }
    if (axis.values.empty()) {
        throw ConfigError("sweep axis '" + name + "' has no values");
    }
    return axis;
}

std::vector<config::Overrides> sweep_cells(const std::vector<SweepAxis>& axes) {
    std::vector<config::Overrides> cells{{}};
    for (const auto& axis : axes) {
        if (axis.values.empty()) {
            throw ConfigError("sweep axis '" + axis.key + "' has no values");
        }
        std::vector<config::Overrides> next;
        for (const auto& cell : cells) {
            for (const auto& v : axis.values) {
                auto extended = cell;
                extended.emplace_back(axis.key, v);
                next.push_back(std::move(extended));
            }
        }
        cells = std::move(next);
    }
    return cells;
}

std::string sweep_csv_row(const metrics::SummaryRow& row, std::uint64_t seed) {
    return format_real(row.labeled_percent) + "," + std::to_string(row.rounds) + "," + std::to_string(row.epochs) +
           "," + format_real(row.accuracy_phase1) + "," + format_real(row.accuracy_phase2) + "," +
           format_real(row.gain) + "," + std::to_string(seed);
}

std::filesystem::path resolve_output_dir(const std::optional<std::filesystem::path>& flag,
                                         const config::ExperimentConfig& config) {
    if (flag) {
        return *flag;
    }
    if (!config.output_dir.empty()) {
        return config.output_dir;
    }
    if (const char* env = std::getenv("FEDSEM_OUT"); env && *env) {
        return env;
    }
    return "fedsem_out";
}

namespace {

struct RunFlags {
    std::string config_path;
    std::vector<std::string> overrides;
    std::optional<std::string> out_dir;
    std::optional<std::uint64_t> seed;
    bool quiet = false;
};

void add_run_flags(CLI::App& cmd, RunFlags& flags) {
    cmd.add_option("--config", flags.config_path, "Experiment file")->required();
    cmd.add_option("--override", flags.overrides, "section.key=value, wins over the file (repeatable)");
    cmd.add_option("--out", flags.out_dir, "Output directory");
    cmd.add_option("--seed", flags.seed, "Sets federation.master_seed");
    cmd.add_flag("--quiet", flags.quiet, "Only print errors");
}

config::Overrides collect_overrides(const RunFlags& flags) {
    config::Overrides overrides;
    if (flags.seed) {
        overrides.emplace_back("federation.master_seed", std::to_string(*flags.seed));
    }
    for (const auto& o : flags.overrides) {
        overrides.push_back(config::parse_override(o));
    }
    return overrides;
}

std::optional<std::filesystem::path> out_flag(const RunFlags& flags) {
    if (flags.out_dir) {
        return std::filesystem::path(*flags.out_dir);
    }
    return std::nullopt;
}

int cmd_generate(const data::SyntheticSpec& spec, const std::filesystem::path& out_path, bool quiet,
                 std::ostream& out) {
    const data::Dataset ds = data::generate_synthetic(spec);
    if (out_path.has_parent_path()) {
        std::filesystem::create_directories(out_path.parent_path());
    }
    data::save_csv(out_path, ds, true);
    ordered_json meta;
    meta["n"] = ds.size();
    meta["d"] = ds.dim();
    meta["C"] = ds.num_classes;
    meta["seed"] = spec.seed;
    meta["separation"] = spec.class_separation;
    meta["generator"] = "gaussian_blobs";
    meta["generator_version"] = kGeneratorVersion;
    std::filesystem::path meta_path = out_path;
    meta_path.replace_extension(".meta.json");
    metrics::write_text_file(meta_path, meta.dump(2) + "\n");
    if (!quiet) {
        out << "wrote " << ds.size() << " samples to " << out_path.string() << " and " << meta_path.string() << '\n';
    }
    return kExitOk;
}

int cmd_run(const RunFlags& flags, std::ostream& out) {
    const config::ExperimentConfig cfg = config::load_config(flags.config_path, collect_overrides(flags));
    const auto dir = resolve_output_dir(out_flag(flags), cfg);
    const RunOutcome outcome = run_experiment(cfg, flags.quiet ? nullptr : &out);
    write_run_outputs(outcome, cfg, dir);
    if (!flags.quiet) {
        out << outcome.summary_text << "outputs in " << dir.string() << '\n';
    }
    return kExitOk;
}

int cmd_sweep(const RunFlags& flags, const std::vector<std::string>& axis_specs, std::ostream& out) {
    std::vector<SweepAxis> axes;
    for (const auto& a : axis_specs) {
        axes.push_back(parse_axis(a));
    }
    const config::Overrides base = collect_overrides(flags);
    const config::ExperimentConfig base_cfg = config::load_config(flags.config_path, base);
    if (!base_cfg.fedsem_enabled) {
        throw ConfigError("sweep needs a [fedsem] section in " + flags.config_path);
    }
    const auto root = resolve_output_dir(out_flag(flags), base_cfg);
    const auto cells = sweep_cells(axes);

    // Validate every cell before running any of them.
    std::vector<config::ExperimentConfig> configs;
    for (const auto& cell : cells) {
        auto overrides = base;
        overrides.insert(overrides.end(), cell.begin(), cell.end());
        configs.push_back(config::load_config(flags.config_path, overrides));
    }

    std::string csv = std::string(kSweepCsvHeader) + "\n";
    std::vector<metrics::SummaryRow> rows;
    for (std::size_t i = 0; i < configs.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "cell_%03zu", i);
        const RunOutcome outcome = run_experiment(configs[i], nullptr);
        write_run_outputs(outcome, configs[i], root / name);
        rows.push_back(*outcome.summary);
        csv += sweep_csv_row(*outcome.summary, configs[i].federation().master_seed) + "\n";
        if (!flags.quiet) {
            out << name << ": gain " << format_real(outcome.summary->gain) << '\n';
        }
    }
    std::filesystem::create_directories(root);
    metrics::write_text_file(root / "sweep.csv", csv);
    metrics::write_text_file(root / "sweep_summary.txt", metrics::render_summary(rows));
    if (!flags.quiet) {
        out << metrics::render_summary(rows) << "outputs in " << root.string() << '\n';
    }
    return kExitOk;
}

int cmd_report(const std::optional<std::string>& out_dir, const std::optional<std::string>& config_path, bool quiet,
               std::ostream& out) {
    std::filesystem::path dir;
    if (out_dir) {
        dir = *out_dir;
    } else if (config_path) {
        dir = resolve_output_dir(std::nullopt, config::load_config(*config_path));
    } else {
        throw ConfigError("report needs --out DIR or --config PATH");
    }
    json result;
    try {
        result = json::parse(metrics::read_text_file(dir / "result.json"));
    } catch (const json::exception& e) {
        throw IoError((dir / "result.json").string() + ": " + e.what());
    }
    const std::string text = render_report(result);
    metrics::write_text_file(dir / "summary.txt", text);
    if (!quiet) {
        out << text;
    }
    return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Semi-supervised federated learning simulator", "fedsem"};
    app.require_subcommand(1);

    data::SyntheticSpec gen{400, 4, 8, 3.0, 42};
    std::string gen_out;
    bool gen_quiet = false;
    auto* generate = app.add_subcommand("generate", "Write a synthetic Gaussian-blob dataset as CSV");
    generate->add_option("--classes", gen.num_classes, "Number of classes")->required();
    generate->add_option("--samples", gen.samples, "Number of samples")->required();
    generate->add_option("--dim", gen.dim, "Feature dimension")->required();
    generate->add_option("--sep", gen.class_separation, "Distance of class centres from the origin");
    generate->add_option("--seed", gen.seed, "Generator seed");
    generate->add_option("--out", gen_out, "CSV path; metadata goes next to it")->required();
    generate->add_flag("--quiet", gen_quiet);

    RunFlags run_flags;
    auto* run = app.add_subcommand("run", "Run one experiment");
    add_run_flags(*run, run_flags);

    RunFlags sweep_flags;
    std::vector<std::string> axes;
    auto* sweep = app.add_subcommand("sweep", "Run the Cartesian product of parameter axes");
    add_run_flags(*sweep, sweep_flags);
    sweep->add_option("--axis", axes, "name=v1,v2 with name fraction|epochs|rounds|seed or section.key")->required();

    std::optional<std::string> report_out;
    std::optional<std::string> report_config;
    bool report_quiet = false;
    auto* report = app.add_subcommand("report", "Re-render summary.txt from result.json");
    report->add_option("--out", report_out, "Run output directory");
    report->add_option("--config", report_config, "Experiment file whose output directory to use");
    report->add_flag("--quiet", report_quiet);

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*generate) {
            return cmd_generate(gen, gen_out, gen_quiet, out);
        }
        if (*run) {
            return cmd_run(run_flags, out);
        }
        if (*sweep) {
            return cmd_sweep(sweep_flags, axes, out);
        }
        if (*report) {
            return cmd_report(report_out, report_config, report_quiet, out);
        }
    } catch (const ConfigError& e) {
        err << "configuration error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const InvalidConfig& e) {
        err << "configuration error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitConfig;
}

}  // namespace fedsem::cli
