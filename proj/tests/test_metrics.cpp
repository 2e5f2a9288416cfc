#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "fedsem/error.hpp"
#include "fedsem/metrics.hpp"
#include "fedsem/rng.hpp"

using namespace fedsem;
using namespace fedsem::metrics;

namespace {

History sample_history() {
    return {
        RoundRecord{1, Phase::phase1, 0.5, 1.25, {0, 3, 4}, 0},
        RoundRecord{2, Phase::phase1, 0.6125, 0.987654321, {1, 2, 4}, 7},
        RoundRecord{3, Phase::phase2, 0.75, 0.5, {2}, 12},
    };
}

std::filesystem::path temp_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("fedsem_metrics_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("gain") {
    CHECK(std::abs(gain(0.73, 0.78) - 0.064103) <= 1e-6);
    CHECK(std::abs(gain(0.81, 0.847) - 0.043684) <= 1e-6);
    CHECK(gain(0.81, 0.847) == doctest::Approx(0.037 / 0.847));
    for (double x : {1e-6, 0.3, 0.5, 1.0}) CHECK(gain(x, x) == 0.0);
    CHECK_THROWS_AS(gain(0.5, 0.0), DomainError);
    CHECK_THROWS_AS(gain(0.5, -0.1), DomainError);

    Rng rng(4);
    for (int i = 0; i < 2000; ++i) {
        const double a = 1e-3 + rng.uniform() * (1.0 - 1e-3);
        const double b = 1e-3 + rng.uniform() * (1.0 - 1e-3);
        const double g = gain(a, b);
        CHECK(g < 1.0);
        CHECK((g > 0) == (b > a));
        CHECK((g < 0) == (b < a));
    }
}

TEST_CASE("gain_percent rounds half-up to one decimal") {
    CHECK(gain_percent(0.064103) == doctest::Approx(6.4));
    CHECK(gain_percent(0.043684) == doctest::Approx(4.4));
    CHECK(gain_percent(0.0125) == doctest::Approx(1.3));
    CHECK(gain_percent(-0.0125) == doctest::Approx(-1.2));
    CHECK(gain_percent(0.0) == 0.0);
}

TEST_CASE("history csv") {
    SUBCASE("empty history is a header line") {
        std::ostringstream out;
        write_history_csv(out, History{});
        CHECK(out.str() == std::string(kHistoryCsvHeader) + "\n");
    }
    SUBCASE("format") {
        std::ostringstream out;
        write_history_csv(out, sample_history());
        CHECK(out.str() ==
              "round,phase,test_accuracy,test_loss,participants,wall_ms\n"
              "1,phase1,0.500000,1.250000,0;3;4,0\n"
              "2,phase1,0.612500,0.987654,1;2;4,7\n"
              "3,phase2,0.750000,0.500000,2,12\n");
    }
    SUBCASE("round trip to printed precision") {
        std::ostringstream out;
        const auto h = sample_history();
        write_history_csv(out, h);
        std::istringstream in(out.str());
        const auto back = parse_history_csv(in);
        REQUIRE(back.size() == h.size());
        for (std::size_t i = 0; i < h.size(); ++i) {
            CHECK(back[i].round == h[i].round);
            CHECK(back[i].phase == h[i].phase);
            CHECK(std::abs(back[i].test_accuracy - h[i].test_accuracy) <= 5e-7);
            CHECK(std::abs(back[i].test_loss - h[i].test_loss) <= 5e-7);
            CHECK(back[i].participant_ids == h[i].participant_ids);
            CHECK(back[i].wall_ms == h[i].wall_ms);
        }
    }
    SUBCASE("parse errors carry line numbers") {
        std::istringstream bad_header("round,phase\n");
        CHECK_THROWS_AS(parse_history_csv(bad_header), ParseError);
        std::istringstream bad_row(std::string(kHistoryCsvHeader) + "\n1,phase1,0.5,0.1,0,0\n2,phase3,0.5,0.1,0,0\n");
        try {
            parse_history_csv(bad_row);
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(e.line() == 3);
        }
    }
}

TEST_CASE("history json") {
    const auto h = sample_history();
    CHECK(history_from_json(history_to_json(h)) == h);
    const History one{h[1]};
    CHECK(history_from_json(nlohmann::json::parse(history_to_json(one).dump())) == one);
    const auto j = history_to_json(h);
    CHECK(j[0].contains("participants"));
    CHECK(j[0]["phase"] == "phase1");
    CHECK_THROWS_AS(history_from_json(nlohmann::json::object()), InvalidArgument);
}

TEST_CASE("export_history") {
    const auto dir = temp_dir("export");
    const auto h = sample_history();
    for (auto fmt : {HistoryFormat::csv, HistoryFormat::json}) {
        export_history(h, dir / "a", fmt);
        export_history(h, dir / "b", fmt);
        CHECK(read_text_file(dir / "a") == read_text_file(dir / "b"));
    }
    export_history(h, dir / "h.json", HistoryFormat::json);
    CHECK(load_history_json(dir / "h.json") == h);
    try {
        export_history(h, dir / "missing" / "h.csv", HistoryFormat::csv);
        FAIL("expected IoError");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("missing") != std::string::npos);
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("summarize") {
    phases::FedSemConfig cfg;
    cfg.federation.rounds = 40;
    cfg.federation.local_epochs = 10;
    phases::ExperimentResult res;
    res.accuracy_phase1 = 0.73;
    res.accuracy_phase2 = 0.78;
    res.gain = gain(0.73, 0.78);
    const auto row = summarize(res, cfg, 0.2);
    CHECK(row.labeled_percent == doctest::Approx(20.0));
    CHECK(row.rounds == 40);
    CHECK(row.epochs == 10);
    CHECK(row.accuracy_phase1 == 0.73);
    CHECK(row.accuracy_phase2 == 0.78);
    CHECK(row.gain == gain(row.accuracy_phase1, row.accuracy_phase2));
    CHECK(summary_from_json(summary_to_json(row)) == row);

    res.accuracy_phase2 = 0.73;
    CHECK(summarize(res, cfg, 0.2).gain == 0.0);

    const SummaryRow rows[] = {row};
    const auto table = render_summary(rows);
    CHECK(table.find("half-up to one decimal") != std::string::npos);
    CHECK(table.find("% labeled") != std::string::npos);
    CHECK(table.find("# rounds") != std::string::npos);
    CHECK(table.find("# epochs") != std::string::npos);
    CHECK(table.find("6.4%") != std::string::npos);
    CHECK(table.find("73.00%") != std::string::npos);
}

TEST_CASE("params json") {
    const std::vector<std::size_t> dims{3, 4, 2};
    const auto p = model::init_params(dims, 5);
    CHECK(params_from_json(nlohmann::json::parse(params_to_json(p).dump())) == p);
    nlohmann::json bad = params_to_json(p);
    bad["values"].erase(0);
    CHECK_THROWS(params_from_json(bad));
}
