#include <doctest.h>

#include <filesystem>

#include "copal/error.hpp"
#include "copal/harness.hpp"
#include "copal/rng.hpp"

using namespace copal;
using namespace copal::harness;

namespace {

corpus::Corpus band_corpus(const std::string& name, std::uint64_t seed, std::size_t n = 3000,
                           double eval_fraction = 0.2) {
    Rng rng(seed);
    std::vector<model::TokenId> t(n);
    for (auto& v : t) v = static_cast<model::TokenId>((seed * 5 + rng.index(16)) % 32);
    return corpus::make_corpus(name, t, eval_fraction, 32);
}

GridConfig small_grid() {
    GridConfig cfg;
    cfg.n_samples = 4;
    cfg.seq_len = 24;
    cfg.seed = 3;
    cfg.max_eval_windows = 4;
    return cfg;
}

const model::Network& small_base() {
    static const auto net = model::make_network(model::ModelShape{32, 8, 12, 2}, 6);
    return net;
}

}  // namespace

TEST_CASE("three corpora give 54 cells per criterion") {
    const std::vector<corpus::Corpus> corpora{band_corpus("a", 1), band_corpus("b", 2), band_corpus("c", 3)};
    const auto reports = run_grid(small_base(), corpora, small_grid());
    REQUIRE(reports.size() == 4);
    for (const auto& r : reports) {
        CHECK(r.cells.size() == 54);
        CHECK(r.complete());
        CHECK(r.errors.empty());
    }
    const auto& dense = reports[0];
    CHECK(dense.dense());
    CHECK(dense.aggregates->a_bwt == 0.0);
    CHECK(dense.aggregates->m_bwt == 0.0);
    for (const auto& r : reports) CHECK(dense.aggregates->a_ppl <= r.aggregates->a_ppl);
    CHECK(reports[1].criterion == "copal");
    CHECK(reports[1].init_mode == "sequential");
    CHECK(reports[2].init_mode == "global");
    CHECK(reports[2].weight_stasis());  // magnitude does not see data
    CHECK_FALSE(reports[1].weight_stasis());
}

TEST_CASE("grid output is deterministic") {
    const std::vector<corpus::Corpus> corpora{band_corpus("a", 1), band_corpus("b", 2)};
    auto cfg = small_grid();
    cfg.sparsities = {0.5, pruner::NmPattern{2, 4}};
    const auto r1 = run_grid(small_base(), corpora, cfg);
    const auto r2 = run_grid(small_base(), corpora, cfg);
    REQUIRE(r1.size() == r2.size());
    for (std::size_t i = 0; i < r1.size(); ++i) {
        CHECK(metrics::to_json(r1[i]).dump() == metrics::to_json(r2[i]).dump());
    }
}

TEST_CASE("evaluator cache returns the direct value") {
    const std::vector<corpus::Corpus> corpora{band_corpus("a", 1)};
    Evaluator ev(corpora, 24, 3);
    const double first = ev.perplexity(small_base(), 0);
    CHECK(ev.perplexity(small_base(), 0) == first);
    CHECK(ev.cache_hits() == 1);
    CHECK(first == metrics::perplexity(small_base(), corpora[0], 24, 3));
}

TEST_CASE("a failing corpus marks its cells as errors and the grid proceeds") {
    // calibration split of 20 tokens cannot hold a 24-token window
    const std::vector<corpus::Corpus> corpora{band_corpus("a", 1), band_corpus("short", 2, 200, 0.9)};
    const auto reports = run_grid(small_base(), corpora, small_grid());
    REQUIRE(reports.size() == 4);
    CHECK(reports[0].complete());
    for (std::size_t i = 1; i < reports.size(); ++i) {
        CHECK_FALSE(reports[i].complete());
        CHECK(reports[i].errors.size() >= 2);
        CHECK(reports[i].errors[0].find("short") != std::string::npos);
    }
    const std::string table = report_table(reports);
    CHECK(table.find("incomplete") != std::string::npos);
    CHECK(table.find("errors") != std::string::npos);
}

TEST_CASE("table markers and CSV round trip") {
    const std::vector<corpus::Corpus> corpora{band_corpus("a", 1), band_corpus("b", 2)};
    const auto reports = run_grid(small_base(), corpora, small_grid());
    const std::string table = report_table(reports);
    CHECK(table.find("| -") != std::string::npos);
    CHECK(table.find("WS") != std::string::npos);
    const auto rows = parse_report_csv(report_csv(reports));
    REQUIRE(rows.size() == reports.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        CHECK(rows[i].criterion == reports[i].criterion);
        CHECK(rows[i].a_bwt == reports[i].aggregates->a_bwt);
        CHECK(rows[i].m_bwt == reports[i].aggregates->m_bwt);
        CHECK(rows[i].a_ppl == reports[i].aggregates->a_ppl);
        CHECK(rows[i].m_ppl == reports[i].aggregates->m_ppl);
    }
    CHECK(rows[0].a_bwt_cell == "-");
    CHECK(rows[2].a_bwt_cell == "WS");
    CHECK_THROWS_AS(parse_report_csv("nope\n"), FormatError);
}

TEST_CASE("reports survive a write and read") {
    const std::vector<corpus::Corpus> corpora{band_corpus("a", 1), band_corpus("b", 2)};
    const auto reports = run_grid(small_base(), corpora, small_grid());
    const auto dir = std::filesystem::temp_directory_path() / "copal_harness_test";
    std::filesystem::remove_all(dir);
    write_reports(reports, dir);
    CHECK(std::filesystem::exists(dir / "table.txt"));
    CHECK(std::filesystem::exists(dir / "copal_0.5.cells.csv"));
    const auto back = read_reports(dir);
    REQUIRE(back.size() == reports.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(metrics::to_json(back[i]).dump() == metrics::to_json(reports[i]).dump());
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("ablations produce one row per point") {
    const std::vector<corpus::Corpus> corpora{band_corpus("a", 1), band_corpus("b", 2)};
    auto cfg = small_grid();
    cfg.sparsities = {0.3};
    CHECK(run_ablation_sparsity(small_base(), corpora, cfg).size() == 3);
    const auto s = run_ablation_samples(small_base(), corpora, cfg, {4});
    REQUIRE(s.size() == 1);
    CHECK(s[0].complete);
    CHECK(samples_csv(s).find("4,") != std::string::npos);
    CHECK_THROWS_AS(run_ablation_samples(small_base(), corpora, cfg, {}), InputError);
}

TEST_CASE("grid validation") {
    auto cfg = small_grid();
    cfg.criteria.clear();
    CHECK_THROWS_AS(validate(cfg), InputError);
    cfg = small_grid();
    cfg.n_samples = 0;
    CHECK_THROWS_AS(validate(cfg), InputError);
}
