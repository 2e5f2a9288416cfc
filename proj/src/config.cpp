#include "fedsem/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "fedsem/error.hpp"
#include "fedsem/metrics.hpp"
#include "fedsem/rng.hpp"

namespace fedsem::config {

namespace pt = boost::property_tree;

namespace {

const std::vector<std::string> kKnownKeys = {
    "dataset.source",
    "dataset.samples",
    "dataset.classes",
    "dataset.dim",
    "dataset.separation",
    "dataset.seed",
    "dataset.path",
    "dataset.has_header",
    "partition.scheme",
    "partition.shards_per_client",
    "partition.alpha",
    "partition.train_ratio",
    "partition.seed",
    "labels.fraction",
    "labels.mode",
    "labels.seed",
    "model.hidden",
    "federation.num_clients",
    "federation.clients_per_round",
    "federation.rounds",
    "federation.local_epochs",
    "federation.learning_rate",
    "federation.batch_size",
    "federation.solver",
    "federation.aggregation",
    "federation.master_seed",
    "federation.threads",
    "fedsem.phase_switch",
    "fedsem.convergence_window",
    "fedsem.convergence_epsilon",
    "fedsem.pseudo_label_threshold",
    "output.directory",
    "output.formats",
    "output.timing",
};

const std::vector<std::string> kRequiredKeys = {"dataset.source", "federation.rounds"};

bool known_section(const std::string& s) {
    return std::any_of(kKnownKeys.begin(), kKnownKeys.end(),
                       [&](const std::string& k) { return k.compare(0, s.size() + 1, s + ".") == 0; });
}

bool known_key(const std::string& k) {
    return std::find(kKnownKeys.begin(), kKnownKeys.end(), k) != kKnownKeys.end();
}

// "section.key" -> line number, for diagnostics.
std::map<std::string, std::size_t> key_lines(const std::string& text) {
    std::map<std::string, std::size_t> lines;
    std::istringstream in(text);
    std::string line;
    std::string section;
    std::size_t no = 0;
    while (std::getline(in, line)) {
        ++no;
        const auto first = line.find_first_not_of(" \t");
        if (first == std::string::npos || line[first] == ';' || line[first] == '#') {
            continue;
        }
        if (line[first] == '[') {
            const auto close = line.find(']', first);
            section = line.substr(first + 1, close == std::string::npos ? std::string::npos : close - first - 1);
            lines.emplace(section, no);
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            continue;
        }
        std::string key = line.substr(first, eq - first);
        while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) {
            key.pop_back();
        }
        lines.emplace(section + "." + key, no);
    }
    return lines;
}

std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

class Reader {
public:
    Reader(const pt::ptree& tree, const std::map<std::string, std::size_t>& lines) : tree_(tree), lines_(lines) {}

    bool has(const std::string& key) const { return tree_.get_optional<std::string>(key).has_value(); }
    bool has_section(const std::string& s) const { return tree_.get_child_optional(s).has_value(); }

    std::string text(const std::string& key, const std::string& fallback) const {
        return trim(tree_.get<std::string>(key, fallback));
    }

    std::string required_text(const std::string& key) const {
        if (!has(key)) {
            throw ConfigError("missing required key '" + key + "'");
        }
        return text(key, "");
    }

    template <typename T>
    T integer(const std::string& key, T fallback) const {
        if (!has(key)) {
            return fallback;
        }
        return parse_integer<T>(key, text(key, ""));
    }

    template <typename T>
    T parse_integer(const std::string& key, const std::string& raw) const {
        T value{};
        const auto res = std::from_chars(raw.data(), raw.data() + raw.size(), value);
        if (raw.empty() || res.ec != std::errc() || res.ptr != raw.data() + raw.size()) {
            fail(key, "expected a nonnegative integer, got '" + raw + "'");
        }
        return value;
    }

    double real(const std::string& key, double fallback) const {
        if (!has(key)) {
            return fallback;
        }
        const std::string raw = text(key, "");
        double value = 0.0;
        const auto res = std::from_chars(raw.data(), raw.data() + raw.size(), value);
        if (raw.empty() || res.ec != std::errc() || res.ptr != raw.data() + raw.size() || !std::isfinite(value)) {
            fail(key, "expected a real number, got '" + raw + "'");
        }
        return value;
    }

    bool boolean(const std::string& key, bool fallback) const {
        if (!has(key)) {
            return fallback;
        }
        const std::string raw = text(key, "");
        if (raw == "true" || raw == "1" || raw == "yes") return true;
        if (raw == "false" || raw == "0" || raw == "no") return false;
        fail(key, "expected true or false, got '" + raw + "'");
    }

    std::optional<std::uint64_t> seed(const std::string& key) const {
        if (!has(key)) {
            return std::nullopt;
        }
        return integer<std::uint64_t>(key, 0);
    }

    [[noreturn]] void fail(const std::string& key, const std::string& why) const {
        const auto it = lines_.find(key);
        const std::string where = it == lines_.end() ? "" : " (line " + std::to_string(it->second) + ")";
        throw ConfigError("key '" + key + "'" + where + ": " + why);
    }

private:
    const pt::ptree& tree_;
    const std::map<std::string, std::size_t>& lines_;
};

std::string format_real(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

template <typename Fn>
auto wrap_enum(const Reader& r, const std::string& key, Fn fn) {
    try {
        return fn();
    } catch (const InvalidConfig& e) {
        r.fail(key, e.what());
    }
}

ExperimentConfig from_tree(const pt::ptree& tree, const std::map<std::string, std::size_t>& lines,
                           const std::filesystem::path& base_dir) {
    for (const auto& [section, body] : tree) {
        if (!known_section(section)) {
            const auto it = lines.find(section);
            throw ConfigError("unknown section [" + section + "]" +
                              (it == lines.end() ? "" : " (line " + std::to_string(it->second) + ")"));
        }
        for (const auto& [key, value] : body) {
            const std::string full = section + "." + key;
            if (!known_key(full)) {
                const auto it = lines.find(full);
                throw ConfigError("unknown key '" + full + "'" +
                                  (it == lines.end() ? "" : " (line " + std::to_string(it->second) + ")"));
            }
        }
    }
    const Reader r(tree, lines);
    for (const auto& key : kRequiredKeys) {
        if (!r.has(key)) {
            throw ConfigError("missing required key '" + key + "'");
        }
    }

    ExperimentConfig c;
    const std::string source = r.required_text("dataset.source");
    if (source == "synthetic") {
        c.source = DataSource::synthetic;
    } else if (source == "csv") {
        c.source = DataSource::csv;
    } else {
        r.fail("dataset.source", "expected synthetic or csv, got '" + source + "'");
    }
    c.synthetic.samples = r.integer<std::size_t>("dataset.samples", c.synthetic.samples);
    c.synthetic.num_classes = r.integer<std::size_t>("dataset.classes", c.synthetic.num_classes);
    c.synthetic.dim = r.integer<std::size_t>("dataset.dim", c.synthetic.dim);
    c.synthetic.class_separation = r.real("dataset.separation", c.synthetic.class_separation);
    c.dataset_seed = r.seed("dataset.seed");
    c.csv_has_header = r.boolean("dataset.has_header", c.csv_has_header);
    if (c.source == DataSource::csv) {
        c.csv_path = r.required_text("dataset.path");
        if (!r.has("dataset.classes")) {
            throw ConfigError("missing required key 'dataset.classes' for a csv dataset");
        }
        if (c.csv_path.is_relative() && !base_dir.empty()) {
            c.csv_path = base_dir / c.csv_path;
        }
    } else if (r.has("dataset.path")) {
        c.csv_path = r.text("dataset.path", "");
    }

    auto& fed = c.federation();
    fed.num_clients = r.integer<std::size_t>("federation.num_clients", fed.num_clients);
    fed.clients_per_round = r.integer<std::size_t>("federation.clients_per_round", fed.clients_per_round);
    fed.rounds = r.integer<std::size_t>("federation.rounds", fed.rounds);
    fed.local_epochs = r.integer<std::size_t>("federation.local_epochs", fed.local_epochs);
    fed.learning_rate = r.real("federation.learning_rate", fed.learning_rate);
    fed.batch_size = r.integer<std::size_t>("federation.batch_size", fed.batch_size);
    fed.solver = wrap_enum(r, "federation.solver",
                           [&] { return federation::solver_from_string(r.text("federation.solver", "adam")); });
    fed.aggregation = wrap_enum(r, "federation.aggregation", [&] {
        return federation::aggregation_from_string(r.text("federation.aggregation", "sample_weighted"));
    });
    fed.master_seed = r.integer<std::uint64_t>("federation.master_seed", fed.master_seed);
    fed.threads = r.integer<std::size_t>("federation.threads", fed.threads);
    if (r.has("model.hidden")) {
        fed.hidden_layers.clear();
        std::stringstream ss(r.text("model.hidden", ""));
        std::string item;
        while (std::getline(ss, item, ',')) {
            item = trim(item);
            if (!item.empty()) {
                fed.hidden_layers.push_back(r.parse_integer<std::size_t>("model.hidden", item));
            }
        }
    }

    c.partition.scheme = wrap_enum(r, "partition.scheme", [&] {
        return data::partition_scheme_from_string(r.text("partition.scheme", "shards"));
    });
    c.partition.num_clients = fed.num_clients;
    c.partition.shards_per_client = r.integer<std::size_t>("partition.shards_per_client", c.partition.shards_per_client);
    c.partition.alpha = r.real("partition.alpha", c.partition.alpha);
    c.partition_seed = r.seed("partition.seed");
    c.train_ratio = r.real("partition.train_ratio", c.train_ratio);

    c.labeled_fraction = r.real("labels.fraction", c.labeled_fraction);
    c.mask_mode = wrap_enum(r, "labels.mode", [&] { return data::mask_mode_from_string(r.text("labels.mode", "per_client")); });
    c.mask_seed = r.seed("labels.seed");

    c.fedsem_enabled = r.has_section("fedsem");
    auto& fs = c.fedsem;
    fs.phase_switch = wrap_enum(r, "fedsem.phase_switch", [&] {
        return phases::phase_switch_from_string(r.text("fedsem.phase_switch", "at_half_rounds"));
    });
    fs.convergence_window = r.integer<std::size_t>("fedsem.convergence_window", fs.convergence_window);
    fs.convergence_epsilon = r.real("fedsem.convergence_epsilon", fs.convergence_epsilon);
    fs.pseudo_label_threshold = r.real("fedsem.pseudo_label_threshold", fs.pseudo_label_threshold);

    c.output_dir = r.text("output.directory", "");
    if (r.has("output.formats")) {
        c.write_csv = false;
        c.write_json = false;
        std::stringstream ss(r.text("output.formats", ""));
        std::string item;
        while (std::getline(ss, item, ',')) {
            item = trim(item);
            if (item == "csv") {
                c.write_csv = true;
            } else if (item == "json") {
                c.write_json = true;
            } else if (!item.empty()) {
                r.fail("output.formats", "unknown format '" + item + "' (csv|json)");
            }
        }
    }
    fed.record_timing = r.boolean("output.timing", fed.record_timing);

    // Range checks, reported against the config keys.
    try {
        fed.validate();
        if (c.fedsem_enabled) {
            fs.validate();
        }
    } catch (const InvalidConfig& e) {
        throw ConfigError(e.what());
    }
    if (!(c.labeled_fraction > 0.0 && c.labeled_fraction <= 1.0)) {
        r.fail("labels.fraction", "must lie in (0, 1]");
    }
    if (!(c.train_ratio > 0.0 && c.train_ratio < 1.0)) {
        r.fail("partition.train_ratio", "must lie in (0, 1)");
    }
    return c;
}

}  // namespace

std::uint64_t ExperimentConfig::resolved_dataset_seed() const {
    return dataset_seed.value_or(derive_seed(federation().master_seed, {0xda7a}));
}

std::uint64_t ExperimentConfig::resolved_partition_seed() const {
    return partition_seed.value_or(derive_seed(federation().master_seed, {0x9a27}));
}

std::uint64_t ExperimentConfig::resolved_mask_seed() const {
    return mask_seed.value_or(derive_seed(federation().master_seed, {0x3a5c}));
}

std::uint64_t ExperimentConfig::split_seed() const {
    return derive_seed(resolved_partition_seed(), {0x5b11});
}

std::pair<std::string, std::string> parse_override(const std::string& text) {
    const auto eq = text.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError("override '" + text + "' must look like section.key=value");
    }
    std::string key = trim(text.substr(0, eq));
    if (key.find('.') == std::string::npos) {
        throw ConfigError("override '" + text + "' must name section.key");
    }
    return {key, trim(text.substr(eq + 1))};
}

ExperimentConfig parse_config(const std::string& text, const Overrides& overrides,
                              const std::filesystem::path& base_dir) {
    pt::ptree tree;
    try {
        std::istringstream in(text);
        pt::ini_parser::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError("config syntax error: " + e.message() + " (line " + std::to_string(e.line()) + ")");
    }
    for (const auto& [key, value] : overrides) {
        if (!known_key(key)) {
            throw ConfigError("override names unknown key '" + key + "'");
        }
        tree.put(pt::ptree::path_type(key, '.'), value);
    }
    return from_tree(tree, key_lines(text), base_dir);
}

ExperimentConfig load_config(const std::filesystem::path& path, const Overrides& overrides) {
    std::string text;
    try {
        text = metrics::read_text_file(path);
    } catch (const IoError& e) {
        throw ConfigError(e.what());
    }
    try {
        return parse_config(text, overrides, path.parent_path());
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

std::string serialize_config(const ExperimentConfig& c) {
    std::ostringstream out;
    const auto& fed = c.federation();
    auto seed_line = [&](const char* key, const std::optional<std::uint64_t>& s) {
        if (s) {
            out << key << " = " << *s << '\n';
        }
    };
    out << "[dataset]\n";
    out << "source = " << (c.source == DataSource::synthetic ? "synthetic" : "csv") << '\n';
    out << "samples = " << c.synthetic.samples << '\n';
    out << "classes = " << c.synthetic.num_classes << '\n';
    out << "dim = " << c.synthetic.dim << '\n';
    out << "separation = " << format_real(c.synthetic.class_separation) << '\n';
    seed_line("seed", c.dataset_seed);
    if (!c.csv_path.empty()) {
        out << "path = " << c.csv_path.string() << '\n';
    }
    out << "has_header = " << (c.csv_has_header ? "true" : "false") << '\n';

    out << "\n[partition]\n";
    out << "scheme = " << data::to_string(c.partition.scheme) << '\n';
    out << "shards_per_client = " << c.partition.shards_per_client << '\n';
    out << "alpha = " << format_real(c.partition.alpha) << '\n';
    out << "train_ratio = " << format_real(c.train_ratio) << '\n';
    seed_line("seed", c.partition_seed);

    out << "\n[labels]\n";
    out << "fraction = " << format_real(c.labeled_fraction) << '\n';
    out << "mode = " << data::to_string(c.mask_mode) << '\n';
    seed_line("seed", c.mask_seed);

    out << "\n[model]\n";
    out << "hidden = ";
    for (std::size_t i = 0; i < fed.hidden_layers.size(); ++i) {
        out << (i ? "," : "") << fed.hidden_layers[i];
    }
    out << '\n';

    out << "\n[federation]\n";
    out << "num_clients = " << fed.num_clients << '\n';
    out << "clients_per_round = " << fed.clients_per_round << '\n';
    out << "rounds = " << fed.rounds << '\n';
    out << "local_epochs = " << fed.local_epochs << '\n';
    out << "learning_rate = " << format_real(fed.learning_rate) << '\n';
    out << "batch_size = " << fed.batch_size << '\n';
    out << "solver = " << federation::to_string(fed.solver) << '\n';
    out << "aggregation = " << federation::to_string(fed.aggregation) << '\n';
    out << "master_seed = " << fed.master_seed << '\n';
    out << "threads = " << fed.threads << '\n';

    if (c.fedsem_enabled) {
        out << "\n[fedsem]\n";
        out << "phase_switch = " << phases::to_string(c.fedsem.phase_switch) << '\n';
        out << "convergence_window = " << c.fedsem.convergence_window << '\n';
        out << "convergence_epsilon = " << format_real(c.fedsem.convergence_epsilon) << '\n';
        out << "pseudo_label_threshold = " << format_real(c.fedsem.pseudo_label_threshold) << '\n';
    }

    out << "\n[output]\n";
    if (!c.output_dir.empty()) {
        out << "directory = " << c.output_dir.string() << '\n';
    }
    std::string formats;
    if (c.write_csv) formats += "csv";
    if (c.write_json) formats += formats.empty() ? "json" : ",json";
    out << "formats = " << formats << '\n';
    out << "timing = " << (fed.record_timing ? "true" : "false") << '\n';
    return out.str();
}

const std::vector<std::string>& known_keys() {
    return kKnownKeys;
}

}  // namespace fedsem::config
