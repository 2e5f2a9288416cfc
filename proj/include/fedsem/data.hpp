#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "fedsem/matrix.hpp"
#include "fedsem/model.hpp"

namespace fedsem::data {

/// Samples, their ground-truth labels, and which labels the protocol may read.
///
/// `labels` always holds ground truth. Training code reaches labels only
/// through training_label(), which refuses hidden samples and returns the
/// pseudo-label for samples filled in by a model.
struct Dataset {
    Matrix features;                 // N x d
    std::vector<int> labels;         // ground truth, in [0, num_classes)
    std::vector<bool> label_visible;
    std::vector<int> pseudo_labels;  // -1 where no pseudo-label was assigned
    std::size_t num_classes = 0;

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t dim() const noexcept { return features.cols(); }

    bool visible(std::size_t i) const { return label_visible.at(i); }
    bool is_pseudo(std::size_t i) const { return pseudo_labels.at(i) >= 0; }
    int training_label(std::size_t i) const;

    // Throws InvalidArgument when fields disagree in length or range.
    void validate() const;
};

// Builds a dataset with every label visible.
Dataset make_dataset(Matrix features, std::vector<int> labels, std::size_t num_classes);

struct ClientShard {
    std::size_t client_id = 0;
    std::vector<std::size_t> train_indices;
    std::vector<std::size_t> test_indices;

    std::size_t size() const noexcept { return train_indices.size() + test_indices.size(); }
};

enum class PartitionScheme { iid, shards, dirichlet };

struct PartitionSpec {
    PartitionScheme scheme = PartitionScheme::shards;
    std::size_t num_clients = 20;
    std::size_t shards_per_client = 2;
    double alpha = 0.5;
    std::uint64_t seed = 0;

    bool operator==(const PartitionSpec&) const = default;
};

enum class MaskMode { per_client, global };

struct SyntheticSpec {
    std::size_t samples = 0;
    std::size_t num_classes = 0;
    std::size_t dim = 0;
    double class_separation = 1.0;
    std::uint64_t seed = 0;

    bool operator==(const SyntheticSpec&) const = default;
};

/// Gaussian blobs: class c is centred on a random unit direction scaled by
/// class_separation, with identity covariance. Label counts differ by at most one.
Dataset generate_synthetic(const SyntheticSpec& spec);

// Rows `f1,...,fd,label`. Errors name the offending line.
Dataset parse_csv(std::istream& in, std::size_t num_classes, bool has_header);
Dataset load_csv(const std::filesystem::path& path, std::size_t num_classes, bool has_header);

// Ground-truth labels. Features are written in shortest round-trip form.
void write_csv(std::ostream& out, const Dataset& dataset, bool header = true);
void save_csv(const std::filesystem::path& path, const Dataset& dataset, bool header = true);

// Allocation only: every index lands in train_indices, test_indices stay empty.
std::vector<ClientShard> partition(const Dataset& dataset, const PartitionSpec& spec);

// Per-client seeded shuffle, then test size max(1, floor((1 - ratio) * n)).
std::vector<ClientShard> split_train_test(std::vector<ClientShard> shards, double ratio, std::uint64_t seed);

/// Keeps ceil(fraction * |train|) train labels visible (per client, or over
/// the union of train indices in global mode) and hides the rest. Test
/// labels are always visible. Drops any previous pseudo-labels.
Dataset mask_labels(const Dataset& dataset, std::span<const ClientShard> shards, double labeled_fraction,
                    MaskMode mode, std::uint64_t seed);

Matrix one_hot(std::span<const int> labels, std::size_t num_classes);

/// Training samples of one client. With ground_truth_only, pseudo-labeled
/// samples are left out; hidden samples are always left out.
model::LabeledSamples training_view(const Dataset& dataset, const ClientShard& shard, bool ground_truth_only);

// Union of all client test indices, ascending.
std::vector<std::size_t> evaluation_indices(std::span<const ClientShard> shards);
model::LabeledSamples evaluation_view(const Dataset& dataset, std::span<const ClientShard> shards);

// Indices whose labels are currently hidden.
std::vector<std::size_t> hidden_indices(const Dataset& dataset);

std::string to_string(PartitionScheme scheme);
PartitionScheme partition_scheme_from_string(const std::string& name);
std::string to_string(MaskMode mode);
MaskMode mask_mode_from_string(const std::string& name);

}  // namespace fedsem::data
