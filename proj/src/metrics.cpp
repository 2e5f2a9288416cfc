#include "fedsem/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "fedsem/error.hpp"

namespace fedsem {

std::string to_string(Phase phase) {
    return phase == Phase::phase1 ? "phase1" : "phase2";
}

Phase phase_from_string(const std::string& name) {
    if (name == "phase1") return Phase::phase1;
    if (name == "phase2") return Phase::phase2;
    throw InvalidArgument("unknown phase '" + name + "'");
}

}  // namespace fedsem

namespace fedsem::metrics {

using nlohmann::json;
using nlohmann::ordered_json;

double gain(double acc_phase1, double acc_phase2) {
    if (!(acc_phase2 > 0.0)) {
        throw DomainError("gain: phase-2 accuracy must be positive");
    }
    return (acc_phase2 - acc_phase1) / acc_phase2;
}

double gain_percent(double gain_fraction) {
    return std::floor(gain_fraction * 1000.0 + 0.5) / 10.0;
}

namespace {

std::string fixed6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

std::string join_ids(const std::vector<std::size_t>& ids) {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) {
            out += ';';
        }
        out += std::to_string(ids[i]);
    }
    return out;
}

}  // namespace

void write_history_csv(std::ostream& out, std::span<const RoundRecord> history) {
    out << kHistoryCsvHeader << '\n';
    for (const auto& r : history) {
        out << r.round << ',' << to_string(r.phase) << ',' << fixed6(r.test_accuracy) << ',' << fixed6(r.test_loss)
            << ',' << join_ids(r.participant_ids) << ',' << r.wall_ms << '\n';
    }
}

ordered_json history_to_json(std::span<const RoundRecord> history) {
    ordered_json arr = ordered_json::array();
    for (const auto& r : history) {
        ordered_json rec;
        rec["round"] = r.round;
        rec["phase"] = to_string(r.phase);
        rec["test_accuracy"] = r.test_accuracy;
        rec["test_loss"] = r.test_loss;
        rec["participants"] = r.participant_ids;
        rec["wall_ms"] = r.wall_ms;
        arr.push_back(std::move(rec));
    }
    return arr;
}

History history_from_json(const json& doc) {
    if (!doc.is_array()) {
        throw InvalidArgument("history JSON must be an array");
    }
    History out;
    for (const auto& rec : doc) {
        RoundRecord r;
        r.round = rec.at("round").get<std::size_t>();
        r.phase = phase_from_string(rec.at("phase").get<std::string>());
        r.test_accuracy = rec.at("test_accuracy").get<double>();
        r.test_loss = rec.at("test_loss").get<double>();
        r.participant_ids = rec.at("participants").get<std::vector<std::size_t>>();
        r.wall_ms = rec.at("wall_ms").get<std::uint64_t>();
        out.push_back(std::move(r));
    }
    return out;
}

History parse_history_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != kHistoryCsvHeader) {
        throw ParseError("history CSV header mismatch", 1);
    }
    History out;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            cells.push_back(cell);
        }
        if (!line.empty() && line.back() == ',') {
            cells.emplace_back();
        }
        if (cells.size() != 6) {
            throw ParseError("history CSV row needs 6 cells", line_no);
        }
        try {
            RoundRecord r;
            r.round = std::stoul(cells[0]);
            r.phase = phase_from_string(cells[1]);
            r.test_accuracy = std::stod(cells[2]);
            r.test_loss = std::stod(cells[3]);
            std::stringstream ids(cells[4]);
            std::string id;
            while (std::getline(ids, id, ';')) {
                r.participant_ids.push_back(std::stoul(id));
            }
            r.wall_ms = std::stoull(cells[5]);
            out.push_back(std::move(r));
        } catch (const std::logic_error&) {
            throw ParseError("malformed history CSV row", line_no);
        } catch (const InvalidArgument& e) {
            throw ParseError(e.what(), line_no);
        }
    }
    return out;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    out << text;
    out.close();
    if (!out) {
        throw IoError("write failed for " + path.string());
    }
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void export_history(std::span<const RoundRecord> history, const std::filesystem::path& path, HistoryFormat format) {
    std::ostringstream out;
    if (format == HistoryFormat::csv) {
        write_history_csv(out, history);
    } else {
        out << history_to_json(history).dump(2) << '\n';
    }
    write_text_file(path, out.str());
}

History load_history_json(const std::filesystem::path& path) {
    try {
        return history_from_json(json::parse(read_text_file(path)));
    } catch (const json::exception& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

SummaryRow summarize(const phases::ExperimentResult& result, const phases::FedSemConfig& config,
                     double labeled_fraction) {
    SummaryRow row;
    row.labeled_percent = labeled_fraction * 100.0;
    row.rounds = config.federation.rounds;
    row.epochs = config.federation.local_epochs;
    row.accuracy_phase1 = result.accuracy_phase1;
    row.accuracy_phase2 = result.accuracy_phase2;
    row.gain = gain(result.accuracy_phase1, result.accuracy_phase2);
    return row;
}

std::string render_summary(std::span<const SummaryRow> rows) {
    auto percent = [](double v, int decimals) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.*f%%", decimals, v);
        return std::string(buf);
    };
    std::ostringstream out;
    out << "Accuracies in percent; gain = (acc_phase2 - acc_phase1) / acc_phase2, "
           "shown in percent rounded half-up to one decimal.\n";
    char line[256];
    std::snprintf(line, sizeof(line), "%-10s %-9s %-9s %-18s %-18s %s\n", "% labeled", "# rounds", "# epochs",
                  "labeled-only acc", "all-data acc", "gain");
    out << line;
    for (const auto& r : rows) {
        std::snprintf(line, sizeof(line), "%-10g %-9zu %-9zu %-18s %-18s %s\n", r.labeled_percent, r.rounds, r.epochs,
                      percent(r.accuracy_phase1 * 100.0, 2).c_str(), percent(r.accuracy_phase2 * 100.0, 2).c_str(),
                      percent(gain_percent(r.gain), 1).c_str());
        out << line;
    }
    return out.str();
}

ordered_json summary_to_json(const SummaryRow& row) {
    ordered_json j;
    j["labeled_percent"] = row.labeled_percent;
    j["rounds"] = row.rounds;
    j["epochs"] = row.epochs;
    j["accuracy_phase1"] = row.accuracy_phase1;
    j["accuracy_phase2"] = row.accuracy_phase2;
    j["gain"] = row.gain;
    return j;
}

SummaryRow summary_from_json(const json& doc) {
    SummaryRow row;
    row.labeled_percent = doc.at("labeled_percent").get<double>();
    row.rounds = doc.at("rounds").get<std::size_t>();
    row.epochs = doc.at("epochs").get<std::size_t>();
    row.accuracy_phase1 = doc.at("accuracy_phase1").get<double>();
    row.accuracy_phase2 = doc.at("accuracy_phase2").get<double>();
    row.gain = doc.at("gain").get<double>();
    return row;
}

ordered_json params_to_json(const model::ModelParams& params) {
    ordered_json j;
    j["layer_dims"] = params.layer_dims;
    j["values"] = params.flatten();
    return j;
}

model::ModelParams params_from_json(const json& doc) {
    const auto dims = doc.at("layer_dims").get<std::vector<std::size_t>>();
    const auto values = doc.at("values").get<std::vector<double>>();
    return model::ModelParams::unflatten(dims, values);
}

ordered_json result_to_json(const phases::ExperimentResult& result, const SummaryRow& summary) {
    ordered_json j;
    j["accuracy_phase1"] = result.accuracy_phase1;
    j["accuracy_phase2"] = result.accuracy_phase2;
    j["gain"] = result.gain;
    j["pseudo_label_accuracy"] =
        result.pseudo_label_accuracy ? ordered_json(*result.pseudo_label_accuracy) : ordered_json(nullptr);
    j["pseudo_label_count"] = result.pseudo_label_count;
    j["phase1_rounds"] = result.phase1_rounds;
    j["phase2_rounds"] = result.phase2_rounds;
    j["phase1_training_samples"] = result.phase1_training_samples;
    j["phase2_training_samples"] = result.phase2_training_samples;
    j["summary"] = summary_to_json(summary);
    j["model_phase1"] = params_to_json(result.model_phase1);
    j["model_phase2"] = params_to_json(result.model_phase2);
    return j;
}

}  // namespace fedsem::metrics
