#include "fedsem/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>

#include "fedsem/error.hpp"
#include "fedsem/rng.hpp"

namespace fedsem::data {

namespace {

constexpr double kRoundingSlack = 1e-9;

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) {
        s.remove_prefix(1);
    }
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
        s.remove_suffix(1);
    }
    return s;
}

std::vector<std::string_view> split_commas(std::string_view line) {
    std::vector<std::string_view> cells;
    std::size_t start = 0;
    for (;;) {
        const std::size_t pos = line.find(',', start);
        if (pos == std::string_view::npos) {
            cells.push_back(trim(line.substr(start)));
            return cells;
        }
        cells.push_back(trim(line.substr(start, pos - start)));
        start = pos + 1;
    }
}

bool parse_real(std::string_view cell, double& out) {
    if (cell.empty()) {
        return false;
    }
    if (cell.front() == '+') {
        cell.remove_prefix(1);
    }
    const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), out);
    return res.ec == std::errc() && res.ptr == cell.data() + cell.size() && std::isfinite(out);
}

}  // namespace

int Dataset::training_label(std::size_t i) const {
    if (!label_visible.at(i)) {
        throw InvalidArgument("training_label: label of sample " + std::to_string(i) + " is hidden");
    }
    const int pseudo = pseudo_labels.at(i);
    return pseudo >= 0 ? pseudo : labels[i];
}

void Dataset::validate() const {
    const std::size_t n = labels.size();
    if (features.rows() != n || label_visible.size() != n || pseudo_labels.size() != n) {
        throw InvalidArgument("Dataset: field lengths disagree");
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
            throw InvalidArgument("Dataset: label out of range at sample " + std::to_string(i));
        }
        if (pseudo_labels[i] >= static_cast<int>(num_classes)) {
            throw InvalidArgument("Dataset: pseudo-label out of range at sample " + std::to_string(i));
        }
    }
    for (double v : features.data()) {
        if (!std::isfinite(v)) {
            throw InvalidArgument("Dataset: non-finite feature value");
        }
    }
}

Dataset make_dataset(Matrix features, std::vector<int> labels, std::size_t num_classes) {
    Dataset ds;
    ds.features = std::move(features);
    ds.labels = std::move(labels);
    ds.num_classes = num_classes;
    ds.label_visible.assign(ds.labels.size(), true);
    ds.pseudo_labels.assign(ds.labels.size(), -1);
    ds.validate();
    return ds;
}

Dataset generate_synthetic(const SyntheticSpec& spec) {
    if (spec.num_classes == 0 || spec.samples < spec.num_classes || spec.dim < 2 ||
        !(spec.class_separation > 0.0)) {
        throw InvalidConfig("generate_synthetic: need samples >= classes >= 1, dim >= 2 and separation > 0");
    }
    Rng rng(derive_seed(spec.seed, {0x5eed}));

    Matrix centers(spec.num_classes, spec.dim);
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        auto row = centers.row(c);
        double norm = 0.0;
        while (norm < 1e-12) {
            norm = 0.0;
            for (double& v : row) {
                v = rng.normal();
                norm += v * v;
            }
            norm = std::sqrt(norm);
        }
        for (double& v : row) {
            v *= spec.class_separation / norm;
        }
    }

    std::vector<int> labels(spec.samples);
    for (std::size_t i = 0; i < spec.samples; ++i) {
        labels[i] = static_cast<int>(i % spec.num_classes);
    }
    rng.shuffle(labels);

    Matrix features(spec.samples, spec.dim);
    for (std::size_t i = 0; i < spec.samples; ++i) {
        const auto center = centers.row(static_cast<std::size_t>(labels[i]));
        auto row = features.row(i);
        for (std::size_t k = 0; k < spec.dim; ++k) {
            row[k] = center[k] + rng.normal();
        }
    }
    return make_dataset(std::move(features), std::move(labels), spec.num_classes);
}

Dataset parse_csv(std::istream& in, std::size_t num_classes, bool has_header) {
    if (num_classes == 0) {
        throw InvalidConfig("load_csv: num_classes must be positive");
    }
    std::vector<double> values;
    std::vector<int> labels;
    std::size_t dim = 0;
    std::string line;
    std::size_t line_no = 0;
    bool header_pending = has_header;
    while (std::getline(in, line)) {
        ++line_no;
        std::string_view view = trim(line);
        if (line_no == 1 && view.size() >= 3 && view.substr(0, 3) == "\xEF\xBB\xBF") {
            view.remove_prefix(3);
        }
        if (view.empty()) {
            continue;
        }
        if (header_pending) {
            header_pending = false;
            continue;
        }
        const auto cells = split_commas(view);
        if (cells.size() < 2) {
            throw ParseError("CSV row needs at least one feature and a label", line_no);
        }
        if (dim == 0) {
            dim = cells.size() - 1;
        } else if (cells.size() - 1 != dim) {
            throw ParseError("ragged row: expected " + std::to_string(dim + 1) + " cells, found " +
                                 std::to_string(cells.size()),
                             line_no);
        }
        for (std::size_t k = 0; k < dim; ++k) {
            double v = 0.0;
            if (!parse_real(cells[k], v)) {
                throw ParseError("non-numeric feature '" + std::string(cells[k]) + "' in column " +
                                     std::to_string(k + 1),
                                 line_no);
            }
            values.push_back(v);
        }
        double label = 0.0;
        if (!parse_real(cells.back(), label) || label != std::floor(label)) {
            throw ParseError("label '" + std::string(cells.back()) + "' is not an integer", line_no);
        }
        if (label < 0.0 || label >= static_cast<double>(num_classes)) {
            throw ParseError("label " + std::string(cells.back()) + " outside [0, " + std::to_string(num_classes) +
                                 ")",
                             line_no);
        }
        labels.push_back(static_cast<int>(label));
    }
    const std::size_t n = labels.size();
    return make_dataset(Matrix(n, dim, std::move(values)), std::move(labels), num_classes);
}

Dataset load_csv(const std::filesystem::path& path, std::size_t num_classes, bool has_header) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open dataset file " + path.string());
    }
    try {
        return parse_csv(in, num_classes, has_header);
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what(), e.line());
    }
}

void write_csv(std::ostream& out, const Dataset& dataset, bool header) {
    if (header) {
        for (std::size_t k = 0; k < dataset.dim(); ++k) {
            out << 'f' << (k + 1) << ',';
        }
        out << "label\n";
    }
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        for (double v : dataset.features.row(i)) {
            out << format_double(v) << ',';
        }
        out << dataset.labels[i] << '\n';
    }
}

void save_csv(const std::filesystem::path& path, const Dataset& dataset, bool header) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot write dataset file " + path.string());
    }
    write_csv(out, dataset, header);
    if (!out) {
        throw IoError("write failed for " + path.string());
    }
}

namespace {

std::vector<ClientShard> empty_shards(std::size_t k) {
    std::vector<ClientShard> shards(k);
    for (std::size_t i = 0; i < k; ++i) {
        shards[i].client_id = i;
    }
    return shards;
}

void partition_iid(std::size_t n, const PartitionSpec& spec, std::vector<ClientShard>& shards) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(spec.seed, {0x11d}));
    rng.shuffle(order);
    for (std::size_t j = 0; j < n; ++j) {
        shards[j % spec.num_clients].train_indices.push_back(order[j]);
    }
}

void partition_label_shards(const Dataset& ds, const PartitionSpec& spec, std::vector<ClientShard>& shards) {
    if (spec.shards_per_client == 0) {
        throw InvalidConfig("partition: shards_per_client must be positive");
    }
    const std::size_t n = ds.size();
    const std::size_t total = spec.num_clients * spec.shards_per_client;
    if (n < total) {
        throw InvalidConfig("partition: " + std::to_string(n) + " samples cannot fill " + std::to_string(total) +
                            " shards");
    }
    std::vector<std::size_t> by_label(n);
    std::iota(by_label.begin(), by_label.end(), std::size_t{0});
    std::stable_sort(by_label.begin(), by_label.end(),
                     [&](std::size_t a, std::size_t b) { return ds.labels[a] < ds.labels[b]; });

    std::vector<std::size_t> shard_ids(total);
    std::iota(shard_ids.begin(), shard_ids.end(), std::size_t{0});
    Rng rng(derive_seed(spec.seed, {0x5a4d}));
    rng.shuffle(shard_ids);

    for (std::size_t slot = 0; slot < total; ++slot) {
        const std::size_t shard = shard_ids[slot];
        const std::size_t begin = shard * n / total;
        const std::size_t end = (shard + 1) * n / total;
        auto& dst = shards[slot / spec.shards_per_client].train_indices;
        dst.insert(dst.end(), by_label.begin() + static_cast<std::ptrdiff_t>(begin),
                   by_label.begin() + static_cast<std::ptrdiff_t>(end));
    }
}

void partition_dirichlet(const Dataset& ds, const PartitionSpec& spec, std::vector<ClientShard>& shards) {
    if (!(spec.alpha > 0.0) || !std::isfinite(spec.alpha)) {
        throw InvalidConfig("partition: dirichlet alpha must be positive");
    }
    const std::size_t k = spec.num_clients;
    std::vector<std::vector<std::size_t>> per_class(ds.num_classes);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        per_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
    }
    Rng rng(derive_seed(spec.seed, {0xd1c}));
    std::vector<double> weights(k);
    for (auto& members : per_class) {
        if (members.empty()) {
            continue;
        }
        rng.shuffle(members);
        double total = 0.0;
        for (double& w : weights) {
            w = rng.gamma(spec.alpha);
            total += w;
        }
        if (!(total > 0.0)) {
            // Every draw underflowed; fall back to an even split.
            std::fill(weights.begin(), weights.end(), 1.0);
            total = static_cast<double>(k);
        }
        const double n_c = static_cast<double>(members.size());
        double cumulative = 0.0;
        std::size_t begin = 0;
        for (std::size_t client = 0; client < k; ++client) {
            cumulative += weights[client];
            std::size_t end = client + 1 == k ? members.size()
                                              : static_cast<std::size_t>(std::llround(n_c * cumulative / total));
            end = std::clamp(end, begin, members.size());
            auto& dst = shards[client].train_indices;
            dst.insert(dst.end(), members.begin() + static_cast<std::ptrdiff_t>(begin),
                       members.begin() + static_cast<std::ptrdiff_t>(end));
            begin = end;
        }
    }

    // Every client needs at least one sample: move one from the largest
    // client (lowest id on ties) until none is empty.
    for (auto& shard : shards) {
        if (!shard.train_indices.empty()) {
            continue;
        }
        auto donor = std::max_element(shards.begin(), shards.end(), [](const ClientShard& a, const ClientShard& b) {
            return a.train_indices.size() < b.train_indices.size();
        });
        shard.train_indices.push_back(donor->train_indices.back());
        donor->train_indices.pop_back();
    }
}

}  // namespace

std::vector<ClientShard> partition(const Dataset& dataset, const PartitionSpec& spec) {
    if (spec.num_clients == 0) {
        throw InvalidConfig("partition: num_clients must be positive");
    }
    if (dataset.size() < spec.num_clients) {
        throw InvalidConfig("partition: " + std::to_string(dataset.size()) + " samples for " +
                            std::to_string(spec.num_clients) + " clients");
    }
    std::vector<ClientShard> shards = empty_shards(spec.num_clients);
    switch (spec.scheme) {
    case PartitionScheme::iid:
        partition_iid(dataset.size(), spec, shards);
        break;
    case PartitionScheme::shards:
        partition_label_shards(dataset, spec, shards);
        break;
    case PartitionScheme::dirichlet:
        partition_dirichlet(dataset, spec, shards);
        break;
    }
    for (auto& shard : shards) {
        std::sort(shard.train_indices.begin(), shard.train_indices.end());
    }
    return shards;
}

std::vector<ClientShard> split_train_test(std::vector<ClientShard> shards, double ratio, std::uint64_t seed) {
    if (!(ratio > 0.0 && ratio < 1.0)) {
        throw InvalidConfig("split_train_test: ratio must lie in (0, 1)");
    }
    for (auto& shard : shards) {
        std::vector<std::size_t> all = shard.train_indices;
        all.insert(all.end(), shard.test_indices.begin(), shard.test_indices.end());
        std::sort(all.begin(), all.end());
        if (all.size() < 2) {
            throw InvalidConfig("split_train_test: client " + std::to_string(shard.client_id) +
                                " holds fewer than 2 samples and cannot be evaluated");
        }
        Rng rng(derive_seed(seed, {0x7e57, shard.client_id}));
        rng.shuffle(all);
        const double raw = (1.0 - ratio) * static_cast<double>(all.size());
        const std::size_t test = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(raw + kRoundingSlack)));
        shard.test_indices.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(test));
        shard.train_indices.assign(all.begin() + static_cast<std::ptrdiff_t>(test), all.end());
        std::sort(shard.train_indices.begin(), shard.train_indices.end());
        std::sort(shard.test_indices.begin(), shard.test_indices.end());
    }
    return shards;
}

Dataset mask_labels(const Dataset& dataset, std::span<const ClientShard> shards, double labeled_fraction,
                    MaskMode mode, std::uint64_t seed) {
    if (!(labeled_fraction > 0.0 && labeled_fraction <= 1.0)) {
        throw InvalidConfig("mask_labels: labeled fraction must lie in (0, 1]");
    }
    Dataset out = dataset;
    std::fill(out.pseudo_labels.begin(), out.pseudo_labels.end(), -1);
    auto visible_count = [&](std::size_t n) {
        const double raw = labeled_fraction * static_cast<double>(n);
        return std::min(n, static_cast<std::size_t>(std::ceil(raw - kRoundingSlack)));
    };
    auto keep_subset = [&](std::vector<std::size_t> pool, std::uint64_t stream) {
        std::sort(pool.begin(), pool.end());
        Rng rng(stream);
        rng.shuffle(pool);
        const std::size_t keep = visible_count(pool.size());
        for (std::size_t j = 0; j < pool.size(); ++j) {
            out.label_visible[pool[j]] = j < keep;
        }
    };

    if (mode == MaskMode::per_client) {
        for (const auto& shard : shards) {
            keep_subset(shard.train_indices, derive_seed(seed, {0x3a5c, shard.client_id}));
        }
    } else {
        std::vector<std::size_t> pool;
        for (const auto& shard : shards) {
            pool.insert(pool.end(), shard.train_indices.begin(), shard.train_indices.end());
        }
        keep_subset(std::move(pool), derive_seed(seed, {0x3a5c, 0x600ba1}));
    }
    for (const auto& shard : shards) {
        for (std::size_t i : shard.test_indices) {
            out.label_visible[i] = true;
        }
    }
    return out;
}

Matrix one_hot(std::span<const int> labels, std::size_t num_classes) {
    Matrix out(labels.size(), num_classes);
    for (std::size_t j = 0; j < labels.size(); ++j) {
        if (labels[j] < 0 || static_cast<std::size_t>(labels[j]) >= num_classes) {
            throw InvalidArgument("one_hot: label " + std::to_string(labels[j]) + " outside [0, " +
                                  std::to_string(num_classes) + ")");
        }
        out(j, static_cast<std::size_t>(labels[j])) = 1.0;
    }
    return out;
}

namespace {

model::LabeledSamples gather(const Dataset& dataset, std::span<const std::size_t> indices) {
    model::LabeledSamples s;
    s.inputs = dataset.features.gather_rows(indices);
    s.labels.reserve(indices.size());
    for (std::size_t i : indices) {
        s.labels.push_back(dataset.training_label(i));
    }
    s.num_classes = dataset.num_classes;
    return s;
}

}  // namespace

model::LabeledSamples training_view(const Dataset& dataset, const ClientShard& shard, bool ground_truth_only) {
    std::vector<std::size_t> chosen;
    chosen.reserve(shard.train_indices.size());
    for (std::size_t i : shard.train_indices) {
        if (!dataset.visible(i)) {
            continue;
        }
        if (ground_truth_only && dataset.is_pseudo(i)) {
            continue;
        }
        chosen.push_back(i);
    }
    return gather(dataset, chosen);
}

std::vector<std::size_t> evaluation_indices(std::span<const ClientShard> shards) {
    std::vector<std::size_t> idx;
    for (const auto& shard : shards) {
        idx.insert(idx.end(), shard.test_indices.begin(), shard.test_indices.end());
    }
    std::sort(idx.begin(), idx.end());
    return idx;
}

model::LabeledSamples evaluation_view(const Dataset& dataset, std::span<const ClientShard> shards) {
    const auto idx = evaluation_indices(shards);
    return gather(dataset, idx);
}

std::vector<std::size_t> hidden_indices(const Dataset& dataset) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        if (!dataset.label_visible[i]) {
            idx.push_back(i);
        }
    }
    return idx;
}

std::string to_string(PartitionScheme scheme) {
    switch (scheme) {
    case PartitionScheme::iid:
        return "iid";
    case PartitionScheme::shards:
        return "shards";
    case PartitionScheme::dirichlet:
        return "dirichlet";
    }
    return "?";
}

PartitionScheme partition_scheme_from_string(const std::string& name) {
    if (name == "iid") return PartitionScheme::iid;
    if (name == "shards") return PartitionScheme::shards;
    if (name == "dirichlet") return PartitionScheme::dirichlet;
    throw InvalidConfig("unknown partition scheme '" + name + "' (iid|shards|dirichlet)");
}

std::string to_string(MaskMode mode) {
    return mode == MaskMode::per_client ? "per_client" : "global";
}

MaskMode mask_mode_from_string(const std::string& name) {
    if (name == "per_client") return MaskMode::per_client;
    if (name == "global") return MaskMode::global;
    throw InvalidConfig("unknown mask mode '" + name + "' (per_client|global)");
}

}  // namespace fedsem::data
