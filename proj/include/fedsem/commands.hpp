#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedsem/config.hpp"
#include "fedsem/data.hpp"
#include "fedsem/metrics.hpp"
#include "fedsem/phases.hpp"

// Experiment driver behind the `fedsem` executable.
namespace fedsem::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitConfig = 2;

inline constexpr int kGeneratorVersion = 1;

// Dataset after partitioning, splitting and masking.
struct PreparedData {
    data::Dataset dataset;
    std::vector<data::ClientShard> shards;
};

PreparedData prepare_data(const config::ExperimentConfig& config);

struct RunOutcome {
    std::optional<phases::ExperimentResult> fedsem;  // set when [fedsem] is present
    federation::ServerState fedavg;                  // plain FedAvg otherwise
    History history;
    std::optional<metrics::SummaryRow> summary;
    nlohmann::ordered_json result_json;
    std::string summary_text;
};

RunOutcome run_experiment(const config::ExperimentConfig& config, std::ostream* progress = nullptr);

// history.csv / history.json / result.json / summary.txt under `dir`.
void write_run_outputs(const RunOutcome& outcome, const config::ExperimentConfig& config,
                       const std::filesystem::path& dir);

// summary.txt text rebuilt from a result.json document.
std::string render_report(const nlohmann::json& result);

struct SweepAxis {
    std::string key;  // full section.key
    std::vector<std::string> values;
};

// "fraction=0.2,0.3"; short names fraction|epochs|rounds|seed or any section.key.
SweepAxis parse_axis(const std::string& text);

// Cartesian product, last axis varying fastest.
std::vector<config::Overrides> sweep_cells(const std::vector<SweepAxis>& axes);

inline constexpr const char* kSweepCsvHeader =
    "labeled_percent,rounds,epochs,accuracy_phase1,accuracy_phase2,gain,seed";

std::string sweep_csv_row(const metrics::SummaryRow& row, std::uint64_t seed);

// Output root: --out, then [output].directory, then $FEDSEM_OUT, then ./fedsem_out.
std::filesystem::path resolve_output_dir(const std::optional<std::filesystem::path>& flag,
                                         const config::ExperimentConfig& config);

// Full command line; returns the process exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace fedsem::cli
