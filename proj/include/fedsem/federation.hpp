#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fedsem/data.hpp"
#include "fedsem/model.hpp"
#include "fedsem/record.hpp"

// FedAvg round engine: client sampling, local training fan-out, parameter
// averaging and per-round evaluation of the global model.
namespace fedsem::federation {

enum class Aggregation { paper_uniform, sample_weighted };

struct FederationConfig {
    std::size_t num_clients = 20;
    std::size_t clients_per_round = 5;
    std::size_t rounds = 40;
    std::size_t local_epochs = 10;
    double learning_rate = 1e-4;
    std::size_t batch_size = 32;
    model::Solver solver = model::Solver::adam;
    Aggregation aggregation = Aggregation::sample_weighted;
    std::uint64_t master_seed = 0;
    // Widths between the input layer and the class layer.
    std::vector<std::size_t> hidden_layers{32};
    // Worker threads for client training within a round; 1 runs serially.
    std::size_t threads = 1;
    // When false, RoundRecord::wall_ms stays 0 so outputs are byte-reproducible.
    bool record_timing = false;

    void validate() const;
    model::LocalTraining local_training() const;
    std::vector<std::size_t> layer_dims(std::size_t input_dim, std::size_t num_classes) const;

    bool operator==(const FederationConfig&) const = default;
};

struct ClientUpdate {
    std::size_t client_id = 0;
    model::ModelParams params;
    std::size_t num_samples = 0;
};

struct ServerState {
    model::ModelParams global_params;
    std::size_t round = 0;  // completed rounds
    History history;
};

// Seeded permutation of the eligible ids for one round. The first S entries
// are the sample; later entries are replacements, tried in order.
std::vector<std::size_t> client_order(std::span<const std::size_t> eligible, std::size_t round_index,
                                      std::uint64_t master_seed);

// Uniform sample of S ids without replacement, ascending.
std::vector<std::size_t> sample_clients(std::size_t num_clients, std::size_t clients_per_round,
                                        std::size_t round_index, std::uint64_t master_seed,
                                        std::span<const std::size_t> eligible);

std::uint64_t client_seed(std::uint64_t master_seed, std::size_t round_index, std::size_t client_id) noexcept;

/// Local training of one client starting from a copy of the global model.
/// labeled_only restricts the view to ground-truth labels. Throws ClientSkip
/// when the view is empty.
ClientUpdate client_round(const model::ModelParams& global_params, const data::ClientShard& shard,
                          const data::Dataset& dataset, const FederationConfig& config, std::size_t round_index,
                          bool labeled_only);

// Summation runs in client_id order, so the result does not depend on the
// order of `updates`.
model::ModelParams aggregate(std::span<const ClientUpdate> updates, Aggregation scheme);

/// One server round: sample, train (possibly in parallel), aggregate,
/// evaluate on the union of client test sets, append a record.
/// Throws RoundFailed when every candidate client skips.
ServerState run_round(ServerState state, std::span<const data::ClientShard> shards, const data::Dataset& dataset,
                      const FederationConfig& config, bool labeled_only, Phase phase = Phase::phase1);

// Fresh model from master_seed, then config.rounds rounds.
ServerState run_fedavg(const FederationConfig& config, std::span<const data::ClientShard> shards,
                       const data::Dataset& dataset, bool labeled_only);

// Seed for the initial global model.
std::uint64_t init_seed(std::uint64_t master_seed) noexcept;

std::string to_string(Aggregation scheme);
Aggregation aggregation_from_string(const std::string& name);
std::string to_string(model::Solver solver);
model::Solver solver_from_string(const std::string& name);

}  // namespace fedsem::federation
