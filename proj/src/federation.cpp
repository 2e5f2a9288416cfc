#include "fedsem/federation.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <numeric>
#include <thread>

#include "fedsem/error.hpp"
#include "fedsem/rng.hpp"

namespace fedsem::federation {

void FederationConfig::validate() const {
    if (num_clients == 0) {
        throw InvalidConfig("federation: num_clients must be at least 1");
    }
    if (clients_per_round == 0 || clients_per_round > num_clients) {
        throw InvalidConfig("federation: clients_per_round must lie in [1, num_clients]");
    }
    if (local_epochs == 0) {
        throw InvalidConfig("federation: local_epochs must be at least 1");
    }
    if (batch_size == 0) {
        throw InvalidConfig("federation: batch_size must be at least 1");
    }
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
        throw InvalidConfig("federation: learning_rate must be positive");
    }
    if (threads == 0) {
        throw InvalidConfig("federation: threads must be at least 1");
    }
    for (std::size_t h : hidden_layers) {
        if (h == 0) {
            throw InvalidConfig("federation: hidden layer widths must be positive");
        }
    }
}

model::LocalTraining FederationConfig::local_training() const {
    return model::LocalTraining{local_epochs, batch_size, learning_rate, solver};
}

std::vector<std::size_t> FederationConfig::layer_dims(std::size_t input_dim, std::size_t num_classes) const {
    std::vector<std::size_t> dims;
    dims.push_back(input_dim);
    dims.insert(dims.end(), hidden_layers.begin(), hidden_layers.end());
    dims.push_back(num_classes);
    return dims;
}

std::vector<std::size_t> client_order(std::span<const std::size_t> eligible, std::size_t round_index,
                                      std::uint64_t master_seed) {
    std::vector<std::size_t> order(eligible.begin(), eligible.end());
    std::sort(order.begin(), order.end());
    order.erase(std::unique(order.begin(), order.end()), order.end());
    Rng rng(derive_seed(master_seed, {0xc11e, round_index}));
    rng.shuffle(order);
    return order;
}

std::vector<std::size_t> sample_clients(std::size_t num_clients, std::size_t clients_per_round,
                                        std::size_t round_index, std::uint64_t master_seed,
                                        std::span<const std::size_t> eligible) {
    if (clients_per_round == 0 || clients_per_round > eligible.size()) {
        throw InvalidConfig("sample_clients: cannot draw " + std::to_string(clients_per_round) + " of " +
                            std::to_string(eligible.size()) + " eligible clients");
    }
    for (std::size_t id : eligible) {
        if (id >= num_clients) {
            throw InvalidConfig("sample_clients: client id " + std::to_string(id) + " outside population");
        }
    }
    std::vector<std::size_t> order = client_order(eligible, round_index, master_seed);
    if (clients_per_round > order.size()) {
        throw InvalidConfig("sample_clients: eligible set has duplicate ids");
    }
    order.resize(clients_per_round);
    std::sort(order.begin(), order.end());
    return order;
}

std::uint64_t client_seed(std::uint64_t master_seed, std::size_t round_index, std::size_t client_id) noexcept {
    return derive_seed(master_seed, {0x10ca1, round_index, client_id});
}

std::uint64_t init_seed(std::uint64_t master_seed) noexcept {
    return derive_seed(master_seed, {0x1417});
}

ClientUpdate client_round(const model::ModelParams& global_params, const data::ClientShard& shard,
                          const data::Dataset& dataset, const FederationConfig& config, std::size_t round_index,
                          bool labeled_only) {
    model::LabeledSamples view = data::training_view(dataset, shard, labeled_only);
    if (view.empty()) {
        throw ClientSkip("client " + std::to_string(shard.client_id) + " has no usable training samples");
    }
    ClientUpdate update;
    update.client_id = shard.client_id;
    update.num_samples = view.size();
    update.params = model::train_local(global_params, view, config.local_training(),
                                       client_seed(config.master_seed, round_index, shard.client_id));
    return update;
}

model::ModelParams aggregate(std::span<const ClientUpdate> updates, Aggregation scheme) {
    if (updates.empty()) {
        throw AggregationError("aggregate: no updates");
    }
    std::vector<const ClientUpdate*> sorted;
    sorted.reserve(updates.size());
    for (const auto& u : updates) {
        if (!u.params.same_shape(updates.front().params)) {
            throw AggregationError("aggregate: update from client " + std::to_string(u.client_id) +
                                   " has a different shape");
        }
        if (scheme == Aggregation::sample_weighted && u.num_samples == 0) {
            throw AggregationError("aggregate: update from client " + std::to_string(u.client_id) +
                                   " reports zero samples");
        }
        sorted.push_back(&u);
    }
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const ClientUpdate* a, const ClientUpdate* b) { return a->client_id < b->client_id; });

    // Running weighted mean: m += (x - m) * n_k / N_k. Identical updates stay
    // exact, and equal counts reproduce the uniform mean bit for bit.
    model::ModelParams out = sorted.front()->params;
    double seen = 0.0;
    for (const auto* u : sorted) {
        const double n = scheme == Aggregation::sample_weighted ? static_cast<double>(u->num_samples) : 1.0;
        seen += n;
        if (u == sorted.front()) {
            continue;
        }
        const double w = n / seen;
        for (std::size_t l = 0; l < out.num_layers(); ++l) {
            auto& dst_w = out.weights[l].data();
            const auto& src_w = u->params.weights[l].data();
            for (std::size_t i = 0; i < dst_w.size(); ++i) {
                dst_w[i] += (src_w[i] - dst_w[i]) * w;
            }
            auto& dst_b = out.biases[l];
            const auto& src_b = u->params.biases[l];
            for (std::size_t i = 0; i < dst_b.size(); ++i) {
                dst_b[i] += (src_b[i] - dst_b[i]) * w;
            }
        }
    }
    return out;
}

namespace {

std::size_t usable_samples(const data::Dataset& dataset, const data::ClientShard& shard, bool labeled_only) {
    std::size_t n = 0;
    for (std::size_t i : shard.train_indices) {
        if (dataset.visible(i) && !(labeled_only && dataset.is_pseudo(i))) {
            ++n;
        }
    }
    return n;
}

std::vector<ClientUpdate> train_clients(const model::ModelParams& global_params,
                                        std::span<const data::ClientShard* const> selected,
                                        const data::Dataset& dataset, const FederationConfig& config,
                                        std::size_t round_index, bool labeled_only) {
    std::vector<ClientUpdate> updates(selected.size());
    auto work = [&](std::size_t slot) {
        updates[slot] = client_round(global_params, *selected[slot], dataset, config, round_index, labeled_only);
    };
    const std::size_t workers = std::min(config.threads, selected.size());
    if (workers <= 1) {
        for (std::size_t slot = 0; slot < selected.size(); ++slot) {
            work(slot);
        }
        return updates;
    }

    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(workers);
    {
        std::vector<std::jthread> pool;
        pool.reserve(workers);
        for (std::size_t t = 0; t < workers; ++t) {
            pool.emplace_back([&, t] {
                try {
                    for (std::size_t slot = next++; slot < selected.size(); slot = next++) {
                        work(slot);
                    }
                } catch (...) {
                    errors[t] = std::current_exception();
                }
            });
        }
    }
    for (const auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
    return updates;
}

}  // namespace

ServerState run_round(ServerState state, std::span<const data::ClientShard> shards, const data::Dataset& dataset,
                      const FederationConfig& config, bool labeled_only, Phase phase) {
    config.validate();
    if (shards.size() != config.num_clients) {
        throw InvalidConfig("run_round: " + std::to_string(shards.size()) + " shards for " +
                            std::to_string(config.num_clients) + " configured clients");
    }
    const auto started = std::chrono::steady_clock::now();
    const std::size_t round_index = state.round + 1;

    std::vector<std::size_t> eligible(shards.size());
    std::iota(eligible.begin(), eligible.end(), std::size_t{0});
    const std::vector<std::size_t> order = client_order(eligible, round_index, config.master_seed);

    // Clients with nothing to train on are replaced by the next id in the
    // seeded order, keeping |S| when enough clients can train.
    std::vector<const data::ClientShard*> selected;
    for (std::size_t id : order) {
        if (selected.size() == config.clients_per_round) {
            break;
        }
        if (usable_samples(dataset, shards[id], labeled_only) > 0) {
            selected.push_back(&shards[id]);
        }
    }
    if (selected.empty()) {
        throw RoundFailed("round " + std::to_string(round_index) + ": every sampled client skipped");
    }
    std::sort(selected.begin(), selected.end(),
              [](const data::ClientShard* a, const data::ClientShard* b) { return a->client_id < b->client_id; });

    const std::vector<ClientUpdate> updates =
        train_clients(state.global_params, selected, dataset, config, round_index, labeled_only);
    state.global_params = aggregate(updates, config.aggregation);

    const model::Evaluation eval = model::evaluate(state.global_params, data::evaluation_view(dataset, shards));

    RoundRecord record;
    record.round = round_index;
    record.phase = phase;
    record.test_accuracy = eval.accuracy;
    record.test_loss = eval.mean_loss;
    for (const auto* s : selected) {
        record.participant_ids.push_back(s->client_id);
    }
    if (config.record_timing) {
        record.wall_ms = static_cast<std::uint64_t>(
            std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - started)
                .count());
    }
    state.history.push_back(std::move(record));
    state.round = round_index;
    return state;
}

ServerState run_fedavg(const FederationConfig& config, std::span<const data::ClientShard> shards,
                       const data::Dataset& dataset, bool labeled_only) {
    config.validate();
    ServerState state;
    state.global_params =
        model::init_params(config.layer_dims(dataset.dim(), dataset.num_classes), init_seed(config.master_seed));
    for (std::size_t r = 0; r < config.rounds; ++r) {
        state = run_round(std::move(state), shards, dataset, config, labeled_only);
    }
    return state;
}

std::string to_string(Aggregation scheme) {
    return scheme == Aggregation::paper_uniform ? "paper_uniform" : "sample_weighted";
}

Aggregation aggregation_from_string(const std::string& name) {
    if (name == "paper_uniform") return Aggregation::paper_uniform;
    if (name == "sample_weighted") return Aggregation::sample_weighted;
    throw InvalidConfig("unknown aggregation '" + name + "' (paper_uniform|sample_weighted)");
}

std::string to_string(model::Solver solver) {
    return solver == model::Solver::sgd ? "sgd" : "adam";
}

model::Solver solver_from_string(const std::string& name) {
    if (name == "sgd") return model::Solver::sgd;
    if (name == "adam") return model::Solver::adam;
    throw InvalidConfig("unknown solver '" + name + "' (sgd|adam)");
}

}  // namespace fedsem::federation
