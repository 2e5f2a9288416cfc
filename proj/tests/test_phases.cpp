#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <iomanip>

#include "fedsem/error.hpp"
#include "fedsem/metrics.hpp"
#include "fedsem/phases.hpp"
#include "federation_fixture.hpp"

using namespace fedsem;
using namespace fedsem::phases;
using fedsem::testing::make_setup;

namespace {

History accuracies(std::initializer_list<double> values) {
    History h;
    std::size_t r = 0;
    for (double v : values) h.push_back(RoundRecord{++r, Phase::phase1, v, 0.0, {}, 0});
    return h;
}

FedSemConfig small_config(std::size_t clients, std::size_t per_round, std::size_t rounds) {
    FedSemConfig c;
    auto& f = c.federation;
    f.num_clients = clients;
    f.clients_per_round = per_round;
    f.rounds = rounds;
    f.local_epochs = 2;
    f.learning_rate = 0.01;
    f.batch_size = 16;
    f.hidden_layers = {8};
    f.master_seed = 23;
    return c;
}

}  // namespace

TEST_CASE("converged") {
    CHECK_FALSE(converged(accuracies({0.5, 0.5}), 3, 1.0));
    CHECK(converged(accuracies({0.1, 0.6, 0.6, 0.6}), 3, 0.0));
    CHECK_FALSE(converged(accuracies({0.70, 0.74, 0.71}), 3, 0.03));
    CHECK(converged(accuracies({0.70, 0.74, 0.71}), 3, 0.04 + 1e-12));
    CHECK(converged(accuracies({0.2, 0.70, 0.71}), 2, 0.02));
    CHECK_FALSE(converged(History{}, 2, 1.0));
}

TEST_CASE("phase1_round_cap and validation") {
    FedSemConfig c = small_config(4, 2, 50);
    CHECK(phase1_round_cap(c) == 25);
    c.federation.rounds = 7;
    CHECK(phase1_round_cap(c) == 3);
    c.phase_switch = PhaseSwitch::on_convergence;
    CHECK(phase1_round_cap(c) == 6);
    c.convergence_window = 1;
    CHECK_THROWS_AS(c.validate(), InvalidConfig);
    c.convergence_window = 3;
    c.convergence_epsilon = -0.1;
    CHECK_THROWS_AS(c.validate(), InvalidConfig);
    c = small_config(4, 2, 1);
    CHECK_THROWS_AS(c.validate(), InvalidConfig);
    c = small_config(4, 2, 5);
    c.pseudo_label_threshold = 1.5;
    CHECK_THROWS_AS(c.validate(), InvalidConfig);
    CHECK(phase_switch_from_string(to_string(PhaseSwitch::on_convergence)) == PhaseSwitch::on_convergence);
    CHECK_THROWS_AS(phase_switch_from_string("sometimes"), InvalidConfig);
}

TEST_CASE("run_phase1") {
    const auto setup = make_setup(data::SyntheticSpec{400, 3, 5, 2.0, 31}, 4, data::PartitionScheme::iid, 0.3);

    SUBCASE("half rounds") {
        const auto cfg = small_config(4, 2, 10);
        const auto out = run_phase1(cfg, setup.shards, setup.dataset);
        CHECK(out.rounds_run == 5);
        CHECK(out.state.history.size() == 5);
        for (const auto& r : out.state.history) CHECK(r.phase == Phase::phase1);
        // Phase 1 is exactly labeled-only FedAvg for floor(R/2) rounds.
        auto plain = cfg.federation;
        plain.rounds = 5;
        const auto ref = federation::run_fedavg(plain, setup.shards, setup.dataset, true);
        CHECK(ref.global_params == out.state.global_params);
        CHECK(ref.history == out.state.history);
    }
    SUBCASE("huge epsilon stops at the window") {
        auto cfg = small_config(4, 2, 20);
        cfg.phase_switch = PhaseSwitch::on_convergence;
        cfg.convergence_window = 3;
        cfg.convergence_epsilon = 1.0;
        CHECK(run_phase1(cfg, setup.shards, setup.dataset).rounds_run == 3);
    }
    SUBCASE("zero epsilon runs to the cap unless accuracies freeze") {
        auto cfg = small_config(4, 2, 6);
        cfg.phase_switch = PhaseSwitch::on_convergence;
        cfg.convergence_window = 2;
        cfg.convergence_epsilon = 0.0;
        const auto out = run_phase1(cfg, setup.shards, setup.dataset);
        CHECK(out.rounds_run <= 5);
        CHECK(out.rounds_run >= 2);
    }
    SUBCASE("no visible labels") {
        data::Dataset ds = setup.dataset;
        for (const auto& sh : setup.shards)
            for (std::size_t i : sh.train_indices) ds.label_visible[i] = false;
        CHECK_THROWS_AS(run_phase1(small_config(4, 2, 6), setup.shards, ds), CannotTrain);
    }
}

TEST_CASE("pseudo_label") {
    const auto setup = make_setup(data::SyntheticSpec{300, 3, 5, 2.0, 32}, 3, data::PartitionScheme::iid, 0.25);
    const auto cfg = small_config(3, 3, 6);
    const auto model_p1 = run_phase1(cfg, setup.shards, setup.dataset).state.global_params;
    const auto hidden = data::hidden_indices(setup.dataset);
    REQUIRE(!hidden.empty());

    SUBCASE("threshold zero labels every hidden sample with the model's prediction") {
        const auto out = pseudo_label(model_p1, setup.dataset, 0.0);
        CHECK(out.labels == setup.dataset.labels);
        const auto pred = model::predict(model_p1, setup.dataset.features);
        for (std::size_t i = 0; i < out.size(); ++i) {
            if (setup.dataset.label_visible[i]) {
                CHECK(out.pseudo_labels[i] == -1);
                CHECK(out.label_visible[i]);
            } else {
                CHECK(out.label_visible[i]);
                CHECK(out.pseudo_labels[i] == pred[i]);
                CHECK(out.training_label(i) == pred[i]);
            }
        }
        CHECK(data::hidden_indices(out).empty());
        // Input dataset unchanged.
        CHECK(data::hidden_indices(setup.dataset) == hidden);
    }
    SUBCASE("threshold one labels nothing") {
        const auto out = pseudo_label(model_p1, setup.dataset, 1.0);
        CHECK(data::hidden_indices(out) == hidden);
        CHECK(std::all_of(out.pseudo_labels.begin(), out.pseudo_labels.end(), [](int v) { return v == -1; }));
    }
    SUBCASE("intermediate threshold follows the top probability") {
        const auto probs = model::forward(model_p1, setup.dataset.features);
        const auto out = pseudo_label(model_p1, setup.dataset, 0.8);
        for (std::size_t i : hidden) {
            const auto row = probs.row(i);
            const double top = *std::max_element(row.begin(), row.end());
            CHECK(out.label_visible[i] == (top >= 0.8));
        }
    }
    SUBCASE("shape mismatch") {
        const std::vector<std::size_t> dims{7, 4, 3};
        const auto wrong = model::init_params(dims, 1);
        CHECK_THROWS_AS(pseudo_label(wrong, setup.dataset, 0.0), ShapeError);
    }
}

TEST_CASE("run_fedsem structure") {
    const auto setup = make_setup(data::SyntheticSpec{600, 4, 6, 2.0, 33}, 6, data::PartitionScheme::shards, 0.2);
    const auto cfg = small_config(6, 3, 8);
    const auto res = run_fedsem(cfg, setup.shards, setup.dataset);

    CHECK(res.phase1_rounds == 4);
    CHECK(res.phase2_rounds == 4);
    REQUIRE(res.history.size() == 8);
    for (std::size_t i = 0; i < res.history.size(); ++i) {
        CHECK(res.history[i].round == i + 1);
        CHECK(res.history[i].phase == (i < 4 ? Phase::phase1 : Phase::phase2));
    }
    double best1 = 0.0;
    double best2 = 0.0;
    for (const auto& r : res.history) (r.phase == Phase::phase1 ? best1 : best2) = std::max(r.phase == Phase::phase1 ? best1 : best2, r.test_accuracy);
    CHECK(res.accuracy_phase1 == best1);
    CHECK(res.accuracy_phase2 == best2);
    CHECK(res.gain == metrics::gain(best1, best2));
    CHECK(res.pseudo_label_count == data::hidden_indices(setup.dataset).size());
    REQUIRE(res.pseudo_label_accuracy.has_value());
    CHECK(*res.pseudo_label_accuracy >= 0.0);
    CHECK(*res.pseudo_label_accuracy <= 1.0);
    CHECK(res.phase2_training_samples > res.phase1_training_samples);
    CHECK(res.phase2_training_samples == fedsem::phases::training_sample_count(setup.dataset, setup.shards, false) +
                                             res.pseudo_label_count);

    SUBCASE("deterministic") {
        const auto again = run_fedsem(cfg, setup.shards, setup.dataset);
        CHECK(again.history == res.history);
        CHECK(again.model_phase2 == res.model_phase2);
        CHECK(again.model_phase1 == res.model_phase1);
    }
    SUBCASE("model_phase1 is the phase-1 outcome") {
        CHECK(res.model_phase1 == run_phase1(cfg, setup.shards, setup.dataset).state.global_params);
    }
    SUBCASE("warm start") {
        // Recompute phase-2 round 1 by hand from model_phase1.
        const auto pseudo = pseudo_label(res.model_phase1, setup.dataset, cfg.pseudo_label_threshold);
        federation::ServerState s;
        s.global_params = res.model_phase1;
        s.round = 4;
        s = federation::run_round(std::move(s), setup.shards, pseudo, cfg.federation, false, Phase::phase2);
        CHECK(s.history.back() == res.history[4]);
        // Phase-2 round 1 is evaluated after aggregation, never a copy of the last phase-1 record.
        CHECK_FALSE(s.global_params == res.model_phase1);
    }
}

TEST_CASE("unreachable threshold leaves phase 2 on phase-1 data") {
    const auto setup = make_setup(data::SyntheticSpec{400, 3, 5, 2.0, 34}, 4, data::PartitionScheme::iid, 0.3);
    auto cfg = small_config(4, 2, 6);
    cfg.pseudo_label_threshold = 1.0;
    const auto res = run_fedsem(cfg, setup.shards, setup.dataset);
    CHECK(res.pseudo_label_count == 0);
    CHECK_FALSE(res.pseudo_label_accuracy.has_value());
    CHECK(res.phase1_training_samples == res.phase2_training_samples);
    // Same views and continuing round seeds: the whole run is labeled-only FedAvg.
    const auto plain = federation::run_fedavg(cfg.federation, setup.shards, setup.dataset, true);
    CHECK(plain.global_params == res.model_phase2);
    REQUIRE(plain.history.size() == res.history.size());
    for (std::size_t i = 0; i < plain.history.size(); ++i) {
        CHECK(plain.history[i].test_accuracy == res.history[i].test_accuracy);
        CHECK(plain.history[i].participant_ids == res.history[i].participant_ids);
    }
}

TEST_CASE("on_convergence budget") {
    const auto setup = make_setup(data::SyntheticSpec{400, 3, 5, 2.0, 35}, 4, data::PartitionScheme::iid, 0.3);
    auto cfg = small_config(4, 2, 12);
    cfg.phase_switch = PhaseSwitch::on_convergence;
    cfg.convergence_window = 2;
    cfg.convergence_epsilon = 1.0;
    const auto res = run_fedsem(cfg, setup.shards, setup.dataset);
    CHECK(res.phase1_rounds == 2);
    // Phase-2 convergence only looks at phase-2 records.
    CHECK(res.phase2_rounds == 2);
    CHECK(res.history.size() == 4);
}

TEST_CASE("fully labeled data gives near-zero gain") {
    const auto canon = make_setup(data::SyntheticSpec{2000, 4, 8, 3.0, 12}, 10, data::PartitionScheme::iid, 1.0);
    FedSemConfig cfg;
    cfg.federation.num_clients = 10;
    cfg.federation.clients_per_round = 5;
    cfg.federation.rounds = 30;
    cfg.federation.local_epochs = 5;
    cfg.federation.learning_rate = 0.001;
    cfg.federation.master_seed = 3;
    const auto res = run_fedsem(cfg, canon.shards, canon.dataset);
    MESSAGE("fully labeled gain " << std::setprecision(17) << res.gain);
    CHECK(res.pseudo_label_count == 0);
    CHECK(std::abs(res.gain) <= 0.02);
    CHECK(res.gain == doctest::Approx(0.008219178082191728).epsilon(1e-12));
}

TEST_CASE("pseudo-labeling never reads hidden ground truth") {
    const auto setup = make_setup(data::SyntheticSpec{500, 4, 6, 2.0, 36}, 5, data::PartitionScheme::shards, 0.2);
    const auto poisoned = fedsem::testing::poison_hidden_labels(setup.dataset);
    const auto cfg = small_config(5, 3, 6);
    const auto clean = run_fedsem(cfg, setup.shards, setup.dataset);
    const auto dirty = run_fedsem(cfg, setup.shards, poisoned, setup.dataset.labels);
    CHECK(clean.history == dirty.history);
    CHECK(clean.model_phase2 == dirty.model_phase2);
    CHECK(clean.pseudo_label_accuracy == dirty.pseudo_label_accuracy);
    CHECK_THROWS_AS(run_fedsem(cfg, setup.shards, poisoned, std::span<const int>(setup.dataset.labels).first(3)),
                    InvalidArgument);
}
