#pragma once

#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedsem/phases.hpp"
#include "fedsem/record.hpp"

namespace fedsem::metrics {

/// Relative accuracy improvement (acc_phase2 - acc_phase1) / acc_phase2.
/// Negative when phase 2 does worse. Throws DomainError when acc_phase2 <= 0.
double gain(double acc_phase1, double acc_phase2);

// Gain as a percentage rounded half-up to one decimal.
double gain_percent(double gain_fraction);

enum class HistoryFormat { csv, json };

inline constexpr const char* kHistoryCsvHeader = "round,phase,test_accuracy,test_loss,participants,wall_ms";

void write_history_csv(std::ostream& out, std::span<const RoundRecord> history);
nlohmann::ordered_json history_to_json(std::span<const RoundRecord> history);
History history_from_json(const nlohmann::json& doc);
History parse_history_csv(std::istream& in);

void export_history(std::span<const RoundRecord> history, const std::filesystem::path& path, HistoryFormat format);
History load_history_json(const std::filesystem::path& path);

// One line of the results table.
struct SummaryRow {
    double labeled_percent = 0.0;
    std::size_t rounds = 0;
    std::size_t epochs = 0;
    double accuracy_phase1 = 0.0;
    double accuracy_phase2 = 0.0;
    double gain = 0.0;

    bool operator==(const SummaryRow&) const = default;
};

SummaryRow summarize(const phases::ExperimentResult& result, const phases::FedSemConfig& config,
                     double labeled_fraction);

// Aligned plain-text table with a header stating the percent rounding.
std::string render_summary(std::span<const SummaryRow> rows);

nlohmann::ordered_json summary_to_json(const SummaryRow& row);
SummaryRow summary_from_json(const nlohmann::json& doc);

nlohmann::ordered_json params_to_json(const model::ModelParams& params);
model::ModelParams params_from_json(const nlohmann::json& doc);

nlohmann::ordered_json result_to_json(const phases::ExperimentResult& result, const SummaryRow& summary);

// Writes text to `path`, replacing any previous file. Throws IoError naming the path.
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace fedsem::metrics
