#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fedsem/data.hpp"
#include "fedsem/federation.hpp"
#include "fedsem/phases.hpp"

// Experiment files: INI documents with the sections
//   [dataset] [partition] [labels] [model] [federation] [fedsem] [output]
// Unknown sections or keys are rejected. Omitted seeds derive from
// federation.master_seed.
namespace fedsem::config {

enum class DataSource { synthetic, csv };

struct ExperimentConfig {
    DataSource source = DataSource::synthetic;
    data::SyntheticSpec synthetic{4000, 10, 16, 2.0, 0};
    std::optional<std::uint64_t> dataset_seed;
    std::filesystem::path csv_path;
    bool csv_has_header = true;

    data::PartitionSpec partition;  // num_clients mirrors federation.num_clients
    std::optional<std::uint64_t> partition_seed;
    double train_ratio = 0.8;

    double labeled_fraction = 1.0;
    data::MaskMode mask_mode = data::MaskMode::per_client;
    std::optional<std::uint64_t> mask_seed;

    // fedsem.federation holds the federation section.
    phases::FedSemConfig fedsem;
    bool fedsem_enabled = false;

    std::filesystem::path output_dir;
    bool write_csv = true;
    bool write_json = true;

    const federation::FederationConfig& federation() const { return fedsem.federation; }
    federation::FederationConfig& federation() { return fedsem.federation; }

    std::uint64_t resolved_dataset_seed() const;
    std::uint64_t resolved_partition_seed() const;
    std::uint64_t resolved_mask_seed() const;
    std::uint64_t split_seed() const;

    bool operator==(const ExperimentConfig&) const = default;
};

using Overrides = std::vector<std::pair<std::string, std::string>>;

// Splits "section.key=value". Throws ConfigError when malformed.
std::pair<std::string, std::string> parse_override(const std::string& text);

/// Parses an experiment document. Overrides are applied before validation
/// and must name known keys. `base_dir` resolves a relative dataset path.
/// Throws ConfigError with the offending line or key.
ExperimentConfig parse_config(const std::string& text, const Overrides& overrides = {},
                              const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path, const Overrides& overrides = {});

// Inverse of parse_config: parsing the output yields an equal configuration.
std::string serialize_config(const ExperimentConfig& config);

// Every accepted "section.key".
const std::vector<std::string>& known_keys();

}  // namespace fedsem::config
