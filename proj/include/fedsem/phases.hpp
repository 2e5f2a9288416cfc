#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>

#include "fedsem/data.hpp"
#include "fedsem/federation.hpp"
#include "fedsem/model.hpp"
#include "fedsem/record.hpp"

// Two-phase semi-supervised federated training: labeled-only FedAvg, one
// pass of pseudo-labeling with the resulting model, then FedAvg over the
// completed labels starting from the phase-1 model.
namespace fedsem::phases {

enum class PhaseSwitch { at_half_rounds, on_convergence };

struct FedSemConfig {
    federation::FederationConfig federation;
    PhaseSwitch phase_switch = PhaseSwitch::at_half_rounds;
    std::size_t convergence_window = 5;
    double convergence_epsilon = 0.005;
    // Minimum top-class probability for a pseudo-label; 0 labels everything.
    double pseudo_label_threshold = 0.0;

    void validate() const;

    bool operator==(const FedSemConfig&) const = default;
};

/// True when the last `window` records exist and their test accuracies span
/// at most `epsilon`.
bool converged(std::span<const RoundRecord> history, std::size_t window, double epsilon);

// Rounds phase 1 may use: floor(R/2) when switching at half, R-1 otherwise.
std::size_t phase1_round_cap(const FedSemConfig& config);

struct PhaseOutcome {
    federation::ServerState state;  // global_params is the phase model
    std::size_t rounds_run = 0;
};

// Labeled-only FedAvg from a fresh model. Throws CannotTrain when no client
// holds a visible ground-truth label.
PhaseOutcome run_phase1(const FedSemConfig& config, std::span<const data::ClientShard> shards,
                        const data::Dataset& dataset);

/// Labels every hidden sample whose top probability under `model_phase1`
/// reaches `threshold` with that model's prediction, marking it visible as a
/// pseudo-label. Ground-truth labels are left untouched.
data::Dataset pseudo_label(const model::ModelParams& model_phase1, const data::Dataset& dataset, double threshold);

// Continues from `phase1` (warm start) over all visible labels for the
// remaining budget, stopping early on convergence in on_convergence mode.
PhaseOutcome run_phase2(const PhaseOutcome& phase1, const data::Dataset& pseudo_labeled,
                        const FedSemConfig& config, std::span<const data::ClientShard> shards);

struct ExperimentResult {
    model::ModelParams model_phase1;
    model::ModelParams model_phase2;
    History history;
    double accuracy_phase1 = 0.0;  // best test accuracy during phase 1
    double accuracy_phase2 = 0.0;  // best test accuracy during phase 2
    double gain = 0.0;
    // Share of pseudo-labels matching ground truth; empty when none were assigned.
    std::optional<double> pseudo_label_accuracy;
    std::size_t pseudo_label_count = 0;
    std::size_t phase1_rounds = 0;
    std::size_t phase2_rounds = 0;
    std::size_t phase1_training_samples = 0;
    std::size_t phase2_training_samples = 0;
};

/// Full experiment. `oracle_labels`, when given, replaces dataset.labels as
/// the ground truth used to score pseudo-labels; training never reads it.
ExperimentResult run_fedsem(const FedSemConfig& config, std::span<const data::ClientShard> shards,
                            const data::Dataset& dataset, std::span<const int> oracle_labels = {});

// Training samples summed over all clients for the given view.
std::size_t training_sample_count(const data::Dataset& dataset, std::span<const data::ClientShard> shards,
                                  bool ground_truth_only);

std::string to_string(PhaseSwitch mode);
PhaseSwitch phase_switch_from_string(const std::string& name);

}  // namespace fedsem::phases
