#include "fedsem/phases.hpp"

#include <algorithm>
#include <cmath>

#include "fedsem/error.hpp"
#include "fedsem/metrics.hpp"

namespace fedsem::phases {

void FedSemConfig::validate() const {
    federation.validate();
    if (federation.rounds < 2) {
        throw InvalidConfig("fedsem: rounds must be at least 2 so both phases run");
    }
    if (phase_switch == PhaseSwitch::on_convergence && convergence_window < 2) {
        throw InvalidConfig("fedsem: convergence_window must be at least 2");
    }
    if (!(convergence_epsilon >= 0.0)) {
        throw InvalidConfig("fedsem: convergence_epsilon must be nonnegative");
    }
    if (!(pseudo_label_threshold >= 0.0 && pseudo_label_threshold <= 1.0)) {
        throw InvalidConfig("fedsem: pseudo_label_threshold must lie in [0, 1]");
    }
}

bool converged(std::span<const RoundRecord> history, std::size_t window, double epsilon) {
    if (window == 0 || history.size() < window) {
        return false;
    }
    const auto tail = history.last(window);
    const auto [lo, hi] = std::minmax_element(tail.begin(), tail.end(), [](const RoundRecord& a, const RoundRecord& b) {
        return a.test_accuracy < b.test_accuracy;
    });
    return hi->test_accuracy - lo->test_accuracy <= epsilon;
}

std::size_t phase1_round_cap(const FedSemConfig& config) {
    const std::size_t r = config.federation.rounds;
    return config.phase_switch == PhaseSwitch::at_half_rounds ? r / 2 : r - 1;
}

namespace {

bool stop_early(const FedSemConfig& config, std::span<const RoundRecord> phase_history) {
    return config.phase_switch == PhaseSwitch::on_convergence &&
           converged(phase_history, config.convergence_window, config.convergence_epsilon);
}

double best_accuracy(std::span<const RoundRecord> records) {
    double best = 0.0;
    for (const auto& r : records) {
        best = std::max(best, r.test_accuracy);
    }
    return best;
}

}  // namespace

std::size_t training_sample_count(const data::Dataset& dataset, std::span<const data::ClientShard> shards,
                                  bool ground_truth_only) {
    std::size_t n = 0;
    for (const auto& shard : shards) {
        for (std::size_t i : shard.train_indices) {
            if (dataset.visible(i) && !(ground_truth_only && dataset.is_pseudo(i))) {
                ++n;
            }
        }
    }
    return n;
}

PhaseOutcome run_phase1(const FedSemConfig& config, std::span<const data::ClientShard> shards,
                        const data::Dataset& dataset) {
    config.validate();
    if (training_sample_count(dataset, shards, true) == 0) {
        throw CannotTrain("phase 1: no client holds a visible label");
    }
    const auto& fed = config.federation;
    PhaseOutcome out;
    out.state.global_params =
        model::init_params(fed.layer_dims(dataset.dim(), dataset.num_classes), federation::init_seed(fed.master_seed));
    const std::size_t cap = phase1_round_cap(config);
    while (out.rounds_run < cap) {
        out.state = federation::run_round(std::move(out.state), shards, dataset, fed, true, Phase::phase1);
        ++out.rounds_run;
        if (stop_early(config, out.state.history)) {
            break;
        }
    }
    return out;
}

data::Dataset pseudo_label(const model::ModelParams& model_phase1, const data::Dataset& dataset, double threshold) {
    if (model_phase1.input_dim() != dataset.dim() || model_phase1.num_classes() != dataset.num_classes) {
        throw ShapeError("pseudo_label: model does not match dataset dimensions");
    }
    data::Dataset out = dataset;
    const std::vector<std::size_t> hidden = data::hidden_indices(dataset);
    if (hidden.empty()) {
        return out;
    }
    const Matrix probs = model::forward(model_phase1, dataset.features.gather_rows(hidden));
    const std::vector<int> predicted = model::argmax_rows(probs);
    for (std::size_t j = 0; j < hidden.size(); ++j) {
        const double confidence = probs(j, static_cast<std::size_t>(predicted[j]));
        if (confidence >= threshold) {
            out.pseudo_labels[hidden[j]] = predicted[j];
            out.label_visible[hidden[j]] = true;
        }
    }
    return out;
}

PhaseOutcome run_phase2(const PhaseOutcome& phase1, const data::Dataset& pseudo_labeled,
                        const FedSemConfig& config, std::span<const data::ClientShard> shards) {
    config.validate();
    const auto& fed = config.federation;
    if (phase1.rounds_run >= fed.rounds) {
        throw InvalidConfig("phase 2: phase 1 consumed the whole round budget");
    }
    const std::size_t budget = fed.rounds - phase1.rounds_run;
    PhaseOutcome out;
    out.state = phase1.state;
    const std::size_t first = out.state.history.size();
    while (out.rounds_run < budget) {
        out.state = federation::run_round(std::move(out.state), shards, pseudo_labeled, fed, false, Phase::phase2);
        ++out.rounds_run;
        if (stop_early(config, std::span<const RoundRecord>(out.state.history).subspan(first))) {
            break;
        }
    }
    return out;
}

ExperimentResult run_fedsem(const FedSemConfig& config, std::span<const data::ClientShard> shards,
                            const data::Dataset& dataset, std::span<const int> oracle_labels) {
    config.validate();
    const std::span<const int> truth = oracle_labels.empty() ? std::span<const int>(dataset.labels) : oracle_labels;
    if (truth.size() != dataset.size()) {
        throw InvalidArgument("run_fedsem: oracle labels do not match the dataset size");
    }

    ExperimentResult result;
    const PhaseOutcome phase1 = run_phase1(config, shards, dataset);
    result.model_phase1 = phase1.state.global_params;
    result.phase1_rounds = phase1.rounds_run;
    result.phase1_training_samples = training_sample_count(dataset, shards, true);

    const data::Dataset completed = pseudo_label(result.model_phase1, dataset, config.pseudo_label_threshold);
    std::size_t matches = 0;
    for (std::size_t i = 0; i < completed.size(); ++i) {
        if (completed.is_pseudo(i) && !dataset.is_pseudo(i)) {
            ++result.pseudo_label_count;
            matches += completed.pseudo_labels[i] == truth[i] ? 1 : 0;
        }
    }
    if (result.pseudo_label_count > 0) {
        result.pseudo_label_accuracy =
            static_cast<double>(matches) / static_cast<double>(result.pseudo_label_count);
    }

    const PhaseOutcome phase2 = run_phase2(phase1, completed, config, shards);
    result.model_phase2 = phase2.state.global_params;
    result.phase2_rounds = phase2.rounds_run;
    result.phase2_training_samples = training_sample_count(completed, shards, false);
    result.history = phase2.state.history;

    const std::span<const RoundRecord> all(result.history);
    result.accuracy_phase1 = best_accuracy(all.first(result.phase1_rounds));
    result.accuracy_phase2 = best_accuracy(all.subspan(result.phase1_rounds));
    result.gain = metrics::gain(result.accuracy_phase1, result.accuracy_phase2);
    return result;
}

std::string to_string(PhaseSwitch mode) {
    return mode == PhaseSwitch::at_half_rounds ? "at_half_rounds" : "on_convergence";
}

PhaseSwitch phase_switch_from_string(const std::string& name) {
    if (name == "at_half_rounds") return PhaseSwitch::at_half_rounds;
    if (name == "on_convergence") return PhaseSwitch::on_convergence;
    throw InvalidConfig("unknown phase_switch '" + name + "' (at_half_rounds|on_convergence)");
}

}  // namespace fedsem::phases
