#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "fedsem/data.hpp"
#include "fedsem/error.hpp"
#include "fedsem/rng.hpp"

using namespace fedsem;
using namespace fedsem::data;

namespace {

// Partition law: disjoint and covering [0, n).
bool is_partition(const std::vector<ClientShard>& shards, std::size_t n) {
    std::vector<int> seen(n, 0);
    for (const auto& s : shards) {
        for (std::size_t i : s.train_indices) {
            if (i >= n) return false;
            ++seen[i];
        }
        for (std::size_t i : s.test_indices) {
            if (i >= n) return false;
            ++seen[i];
        }
    }
    return std::all_of(seen.begin(), seen.end(), [](int c) { return c == 1; });
}

std::size_t distinct_labels(const Dataset& ds, const ClientShard& s) {
    std::set<int> labels;
    for (std::size_t i : s.train_indices) labels.insert(ds.labels[i]);
    return labels.size();
}

Dataset canonical_dataset() {
    return generate_synthetic(SyntheticSpec{4000, 10, 16, 2.0, 42});
}

}  // namespace

TEST_CASE("generate_synthetic") {
    SUBCASE("balanced labels") {
        const Dataset ds = generate_synthetic(SyntheticSpec{100, 4, 3, 1.0, 1});
        for (int c = 0; c < 4; ++c) CHECK(std::count(ds.labels.begin(), ds.labels.end(), c) == 25);
        const Dataset odd = generate_synthetic(SyntheticSpec{103, 4, 3, 1.0, 1});
        for (int c = 0; c < 4; ++c) {
            const auto n = std::count(odd.labels.begin(), odd.labels.end(), c);
            CHECK(n >= 25);
            CHECK(n <= 26);
        }
        CHECK(std::all_of(ds.label_visible.begin(), ds.label_visible.end(), [](bool v) { return v; }));
    }
    SUBCASE("well separated classes are nearly centroid-separable") {
        const Dataset ds = generate_synthetic(SyntheticSpec{300, 3, 8, 10.0, 9});
        std::vector<std::vector<double>> centroid(3, std::vector<double>(8, 0.0));
        std::vector<double> count(3, 0.0);
        for (std::size_t i = 0; i < ds.size(); ++i) {
            const auto c = static_cast<std::size_t>(ds.labels[i]);
            for (std::size_t k = 0; k < 8; ++k) centroid[c][k] += ds.features(i, k);
            count[c] += 1.0;
        }
        for (std::size_t c = 0; c < 3; ++c)
            for (double& v : centroid[c]) v /= count[c];
        std::size_t hits = 0;
        for (std::size_t i = 0; i < ds.size(); ++i) {
            std::size_t best = 0;
            double best_d = INFINITY;
            for (std::size_t c = 0; c < 3; ++c) {
                double d = 0.0;
                for (std::size_t k = 0; k < 8; ++k) d += std::pow(ds.features(i, k) - centroid[c][k], 2);
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            hits += static_cast<int>(best) == ds.labels[i];
        }
        CHECK(static_cast<double>(hits) / 300.0 >= 0.99);
    }
    SUBCASE("deterministic per seed") {
        const Dataset a = generate_synthetic(SyntheticSpec{50, 5, 4, 2.0, 3});
        const Dataset b = generate_synthetic(SyntheticSpec{50, 5, 4, 2.0, 3});
        CHECK(a.features == b.features);
        CHECK(a.labels == b.labels);
        CHECK_FALSE(generate_synthetic(SyntheticSpec{50, 5, 4, 2.0, 4}).features == a.features);
    }
    SUBCASE("degenerate arguments") {
        CHECK_THROWS_AS(generate_synthetic(SyntheticSpec{3, 4, 3, 1.0, 1}), InvalidConfig);
        CHECK_THROWS_AS(generate_synthetic(SyntheticSpec{10, 2, 1, 1.0, 1}), InvalidConfig);
        CHECK_THROWS_AS(generate_synthetic(SyntheticSpec{10, 2, 3, 0.0, 1}), InvalidConfig);
        CHECK_THROWS_AS(generate_synthetic(SyntheticSpec{10, 0, 3, 1.0, 1}), InvalidConfig);
    }
}

TEST_CASE("CSV ingestion") {
    SUBCASE("well-formed rows") {
        std::istringstream in("0.5,-1.25,2\n3,4e-1,0\n");
        const Dataset ds = parse_csv(in, 3, false);
        REQUIRE(ds.size() == 2);
        CHECK(ds.dim() == 2);
        CHECK(ds.features(0, 0) == 0.5);
        CHECK(ds.features(0, 1) == -1.25);
        CHECK(ds.features(1, 0) == 3.0);
        CHECK(ds.features(1, 1) == 0.4);
        CHECK(ds.labels == std::vector<int>{2, 0});
        CHECK(ds.label_visible == std::vector<bool>{true, true});
    }
    SUBCASE("header and CRLF") {
        std::istringstream in("f1,f2,label\r\n1,2,1\r\n3,4,0\r\n");
        const Dataset ds = parse_csv(in, 2, true);
        CHECK(ds.size() == 2);
        CHECK(ds.labels == std::vector<int>{1, 0});
    }
    SUBCASE("label out of range names the line") {
        std::istringstream in("1,2,0\n3,4,3\n");
        try {
            parse_csv(in, 3, false);
            FAIL("expected a parse error");
        } catch (const ParseError& e) {
            CHECK(e.line() == 2);
        }
    }
    SUBCASE("ragged row") {
        std::istringstream in("h1,h2,label\n1,2,0\n3,0\n");
        try {
            parse_csv(in, 3, true);
            FAIL("expected a parse error");
        } catch (const ParseError& e) {
            CHECK(e.line() == 3);
        }
    }
    SUBCASE("non-numeric cell") {
        std::istringstream in("1,abc,0\n");
        CHECK_THROWS_AS(parse_csv(in, 3, false), ParseError);
        std::istringstream frac("1,2,0.5\n");
        CHECK_THROWS_AS(parse_csv(frac, 3, false), ParseError);
    }
    SUBCASE("round-trip through a file") {
        const Dataset ds = generate_synthetic(SyntheticSpec{60, 3, 5, 2.5, 8});
        const auto path = std::filesystem::temp_directory_path() / "fedsem_roundtrip.csv";
        save_csv(path, ds, true);
        const Dataset back = load_csv(path, 3, true);
        REQUIRE(back.size() == ds.size());
        for (std::size_t i = 0; i < ds.features.size(); ++i) {
            CHECK(std::abs(back.features.data()[i] - ds.features.data()[i]) <= 1e-12);
        }
        CHECK(back.labels == ds.labels);
        std::filesystem::remove(path);
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(load_csv("/nonexistent/fedsem.csv", 3, false), IoError);
    }
}

TEST_CASE("partition") {
    const Dataset ds = canonical_dataset();

    SUBCASE("iid round robin") {
        const Dataset small = generate_synthetic(SyntheticSpec{100, 4, 3, 1.0, 2});
        const auto shards = partition(small, PartitionSpec{PartitionScheme::iid, 10, 2, 0.5, 5});
        for (const auto& s : shards) CHECK(s.train_indices.size() == 10);
        CHECK(is_partition(shards, 100));
    }
    SUBCASE("label shards limit labels per client") {
        const auto shards = partition(ds, PartitionSpec{PartitionScheme::shards, 20, 2, 0.5, 7});
        double mean = 0.0;
        for (const auto& s : shards) {
            CHECK(distinct_labels(ds, s) <= 4);
            mean += static_cast<double>(distinct_labels(ds, s));
            CHECK(s.train_indices.size() == 200);
        }
        mean /= 20.0;
        CHECK(mean < 10.0);
        CHECK(mean <= 4.0);
    }
    SUBCASE("partition law for every scheme and several seeds") {
        for (auto scheme : {PartitionScheme::iid, PartitionScheme::shards, PartitionScheme::dirichlet}) {
            for (std::uint64_t seed = 0; seed < 5; ++seed) {
                const auto shards = partition(ds, PartitionSpec{scheme, 20, 2, 0.5, seed});
                CHECK(shards.size() == 20);
                CHECK(is_partition(shards, ds.size()));
                for (std::size_t k = 0; k < shards.size(); ++k) {
                    CHECK(shards[k].client_id == k);
                    CHECK_FALSE(shards[k].train_indices.empty());
                    CHECK(shards[k].test_indices.empty());
                }
            }
        }
    }
    SUBCASE("dirichlet with tiny alpha still feeds every client") {
        const Dataset small = generate_synthetic(SyntheticSpec{60, 3, 3, 1.0, 2});
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            const auto shards = partition(small, PartitionSpec{PartitionScheme::dirichlet, 30, 2, 0.01, seed});
            CHECK(is_partition(shards, 60));
            for (const auto& s : shards) CHECK_FALSE(s.train_indices.empty());
        }
    }
    SUBCASE("seeds change the assignment") {
        for (auto scheme : {PartitionScheme::iid, PartitionScheme::shards, PartitionScheme::dirichlet}) {
            const auto a = partition(ds, PartitionSpec{scheme, 20, 2, 0.5, 1});
            const auto b = partition(ds, PartitionSpec{scheme, 20, 2, 0.5, 2});
            const auto a2 = partition(ds, PartitionSpec{scheme, 20, 2, 0.5, 1});
            CHECK(a[0].train_indices != b[0].train_indices);
            CHECK(a[0].train_indices == a2[0].train_indices);
        }
    }
    SUBCASE("too few samples") {
        const Dataset small = generate_synthetic(SyntheticSpec{8, 2, 2, 1.0, 2});
        CHECK_THROWS_AS(partition(small, PartitionSpec{PartitionScheme::iid, 9, 2, 0.5, 0}), InvalidConfig);
        CHECK_THROWS_AS(partition(small, PartitionSpec{PartitionScheme::shards, 5, 2, 0.5, 0}), InvalidConfig);
        CHECK_THROWS_AS(partition(small, PartitionSpec{PartitionScheme::dirichlet, 4, 2, 0.0, 0}), InvalidConfig);
    }
}

TEST_CASE("split_train_test") {
    auto shard_of = [](std::size_t n, std::size_t offset) {
        ClientShard s;
        for (std::size_t i = 0; i < n; ++i) s.train_indices.push_back(offset + i);
        return s;
    };
    SUBCASE("80/20 sizes") {
        std::vector<ClientShard> shards{shard_of(10, 0), shard_of(5, 10), shard_of(2, 15), shard_of(101, 17)};
        for (std::size_t k = 0; k < shards.size(); ++k) shards[k].client_id = k;
        const auto split = split_train_test(shards, 0.8, 3);
        CHECK(split[0].train_indices.size() == 8);
        CHECK(split[0].test_indices.size() == 2);
        CHECK(split[1].train_indices.size() == 4);
        CHECK(split[1].test_indices.size() == 1);
        CHECK(split[2].train_indices.size() == 1);
        CHECK(split[2].test_indices.size() == 1);
        CHECK(split[3].test_indices.size() == 20);
        CHECK(is_partition(split, 118));
        for (const auto& s : split) {
            std::vector<std::size_t> both;
            std::set_intersection(s.train_indices.begin(), s.train_indices.end(), s.test_indices.begin(),
                                  s.test_indices.end(), std::back_inserter(both));
            CHECK(both.empty());
        }
    }
    SUBCASE("canonical partition") {
        const Dataset ds = canonical_dataset();
        const auto split = split_train_test(partition(ds, PartitionSpec{PartitionScheme::shards, 20, 2, 0.5, 7}), 0.8, 1);
        CHECK(is_partition(split, ds.size()));
        for (const auto& s : split) {
            CHECK(s.train_indices.size() == 160);
            CHECK(s.test_indices.size() == 40);
        }
    }
    SUBCASE("singleton shard cannot be evaluated") {
        std::vector<ClientShard> shards{shard_of(1, 0)};
        CHECK_THROWS_AS(split_train_test(shards, 0.8, 1), InvalidConfig);
    }
}

TEST_CASE("mask_labels") {
    const Dataset ds = canonical_dataset();
    const auto shards = split_train_test(partition(ds, PartitionSpec{PartitionScheme::shards, 20, 2, 0.5, 7}), 0.8, 1);

    SUBCASE("fraction 1 keeps everything") {
        const Dataset m = mask_labels(ds, shards, 1.0, MaskMode::per_client, 4);
        CHECK(m.label_visible == ds.label_visible);
    }
    SUBCASE("visible count per client") {
        for (double f : {0.1, 0.2, 0.3, 0.5, 0.77}) {
            const Dataset m = mask_labels(ds, shards, f, MaskMode::per_client, 4);
            for (const auto& s : shards) {
                std::size_t visible = 0;
                for (std::size_t i : s.train_indices) visible += m.visible(i);
                CHECK(visible == static_cast<std::size_t>(std::ceil(f * static_cast<double>(s.train_indices.size()) - 1e-9)));
                CHECK(visible >= 1);
                for (std::size_t i : s.test_indices) CHECK(m.visible(i));
            }
            CHECK(m.labels == ds.labels);
        }
    }
    SUBCASE("ten train samples at 20 percent") {
        Dataset small = generate_synthetic(SyntheticSpec{12, 2, 2, 1.0, 5});
        ClientShard s;
        s.train_indices = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
        s.test_indices = {10, 11};
        const std::vector<ClientShard> one{s};
        const Dataset m = mask_labels(small, one, 0.2, MaskMode::per_client, 1);
        std::size_t visible = 0;
        for (std::size_t i : s.train_indices) visible += m.visible(i);
        CHECK(visible == 2);
        CHECK(m.visible(10));
        CHECK(m.visible(11));
    }
    SUBCASE("global mode") {
        const Dataset m = mask_labels(ds, shards, 0.2, MaskMode::global, 4);
        std::size_t train_total = 0;
        std::size_t visible = 0;
        for (const auto& s : shards) {
            train_total += s.train_indices.size();
            for (std::size_t i : s.train_indices) visible += m.visible(i);
            for (std::size_t i : s.test_indices) CHECK(m.visible(i));
        }
        CHECK(visible == static_cast<std::size_t>(std::ceil(0.2 * static_cast<double>(train_total) - 1e-9)));
    }
    SUBCASE("hidden labels cannot be read for training") {
        const Dataset m = mask_labels(ds, shards, 0.2, MaskMode::per_client, 4);
        const auto hidden = hidden_indices(m);
        REQUIRE_FALSE(hidden.empty());
        CHECK_THROWS_AS(m.training_label(hidden.front()), InvalidArgument);
        const auto view = training_view(m, shards[0], true);
        CHECK(view.size() == 32);
    }
    SUBCASE("deterministic, seed sensitive") {
        CHECK(mask_labels(ds, shards, 0.3, MaskMode::per_client, 4).label_visible ==
              mask_labels(ds, shards, 0.3, MaskMode::per_client, 4).label_visible);
        CHECK_FALSE(mask_labels(ds, shards, 0.3, MaskMode::per_client, 4).label_visible ==
                    mask_labels(ds, shards, 0.3, MaskMode::per_client, 5).label_visible);
    }
    SUBCASE("fraction out of range") {
        CHECK_THROWS_AS(mask_labels(ds, shards, 0.0, MaskMode::per_client, 4), InvalidConfig);
        CHECK_THROWS_AS(mask_labels(ds, shards, 1.5, MaskMode::per_client, 4), InvalidConfig);
    }
}

TEST_CASE("one_hot") {
    const std::vector<int> two{2};
    const Matrix m = one_hot(two, 4);
    CHECK(m == Matrix(1, 4, std::vector<double>{0, 0, 1, 0}));
    const Matrix empty = one_hot(std::vector<int>{}, 3);
    CHECK(empty.rows() == 0);
    CHECK(empty.cols() == 3);
    const std::vector<int> bad{4};
    CHECK_THROWS_AS(one_hot(bad, 4), InvalidArgument);
    const std::vector<int> negative{-1};
    CHECK_THROWS_AS(one_hot(negative, 4), InvalidArgument);

    Rng rng(3);
    std::vector<int> labels(200);
    for (int& l : labels) l = static_cast<int>(rng.below(7));
    const Matrix many = one_hot(labels, 7);
    for (std::size_t r = 0; r < many.rows(); ++r) {
        double sum = 0.0;
        for (double v : many.row(r)) sum += v;
        CHECK(sum == 1.0);
        CHECK(many(r, static_cast<std::size_t>(labels[r])) == 1.0);
    }
}

TEST_CASE("evaluation view is the union of client test sets") {
    const Dataset ds = canonical_dataset();
    const auto shards = split_train_test(partition(ds, PartitionSpec{PartitionScheme::iid, 20, 2, 0.5, 7}), 0.8, 1);
    const auto idx = evaluation_indices(shards);
    CHECK(idx.size() == 800);
    CHECK(std::is_sorted(idx.begin(), idx.end()));
    CHECK(evaluation_view(ds, shards).size() == 800);
}
