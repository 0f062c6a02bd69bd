#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "copal/error.hpp"
#include "copal/pruner.hpp"
#include "support.hpp"

using namespace copal;
using namespace copal::pruner;
using linalg::Matrix;

namespace {

Matrix random_scores(std::size_t r, std::size_t c, Rng& rng, bool ties) {
    Matrix m(r, c);
    for (double& v : m.values()) v = ties ? static_cast<double>(rng.index(3)) : rng.uniform();
    return m;
}

corpus::Corpus noise_corpus(const std::string& name, std::uint64_t seed, std::size_t vocab) {
    Rng rng(seed);
    std::vector<model::TokenId> t(4000);
    // each corpus favors its own band of the vocabulary
    for (auto& v : t) v = static_cast<model::TokenId>((seed * 7 + rng.index(vocab / 2)) % vocab);
    return corpus::make_corpus(name, t, 0.2, vocab);
}

}  // namespace

TEST_CASE("prune_count is floor(s N)") {
    CHECK(prune_count(0.5, 4) == 2);
    CHECK(prune_count(0.3, 10) == 3);
    CHECK(prune_count(0.7, 10) == 7);
    CHECK(prune_count(0.9, 7) == 6);
    CHECK(prune_count(0.0, 100) == 0);
    CHECK_THROWS_AS(prune_count(1.0, 4), UsageError);
    CHECK_THROWS_AS(prune_count(-0.1, 4), UsageError);
}

TEST_CASE("unstructured mask removes exactly floor(s N) lowest scores") {
    Rng rng(31);
    for (const double s : {0.1, 0.3, 0.5, 0.7, 0.9}) {
        for (int t = 0; t < 40; ++t) {
            const bool ties = t % 2 == 0;
            const Matrix sc = t % 10 == 9 ? Matrix(1 + rng.index(9), 1 + rng.index(9), 1.0)
                                          : random_scores(1 + rng.index(12), 1 + rng.index(12), rng, ties);
            const Mask m = build_mask_unstructured(sc, s);
            const auto n = sc.size();
            REQUIRE(m.zeros() == static_cast<std::size_t>(std::floor(s * n + 1e-9)));
            // every removed score is <= every kept score
            double max_removed = -1e300, min_kept = 1e300;
            for (std::size_t i = 0; i < n; ++i) {
                if (m.bits[i]) min_kept = std::min(min_kept, sc.values()[i]);
                else max_removed = std::max(max_removed, sc.values()[i]);
            }
            CHECK(max_removed <= min_kept);
        }
    }
}

TEST_CASE("ties are broken toward the lower flat index") {
    const Matrix sc(2, 2, 5.0);
    const Mask m = build_mask_unstructured(sc, 0.5);
    CHECK(m.bits == std::vector<std::uint8_t>{0, 0, 1, 1});
}

TEST_CASE("worked example: N = 4, s = 0.5") {
    const Matrix w{{0.1, -0.4}, {0.3, -0.2}};
    const Matrix sc = criterion_scores(Criterion::magnitude, w);
    const Mask m = build_mask_unstructured(sc, 0.5);
    CHECK(apply_mask(w, m) == Matrix{{0.0, -0.4}, {0.3, 0.0}});
    CHECK(threshold_for_sparsity(sc, 0.5) == doctest::Approx(0.3));
    // the literal percentile index under-prunes with a strict comparison
    const double th = percentile_threshold(sc, 0.5);
    std::size_t strict = 0;
    for (const double v : sc.values()) strict += v < th ? 1 : 0;
    CHECK(strict == 1);
}

TEST_CASE("sparsity 0 keeps everything") {
    Rng rng(32);
    const Matrix w = testsupport::random_matrix(5, 7, rng);
    const Mask m = build_mask_unstructured(criterion_scores(Criterion::magnitude, w), 0.0);
    CHECK(m.zeros() == 0);
    CHECK(apply_mask(w, m) == w);
}

TEST_CASE("N:M masks keep exactly n per complete group") {
    Rng rng(33);
    for (const auto [n, mm] : {std::array<std::size_t, 2>{2, 4}, {4, 8}}) {
        for (int t = 0; t < 100; ++t) {
            const std::size_t rows = 1 + rng.index(6);
            const std::size_t cols = mm * (1 + rng.index(4)) + (t % 3 == 0 ? rng.index(mm) : 0);
            const Matrix sc = random_scores(rows, cols, rng, t % 2 == 0);
            const Mask m = build_mask_nm(sc, n, mm);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t g = 0; g < cols; g += mm) {
                    const std::size_t len = std::min(mm, cols - g);
                    std::size_t kept = 0;
                    double min_kept = 1e300, max_dropped = -1e300;
                    for (std::size_t c = g; c < g + len; ++c) {
                        if (m.keep(r, c)) {
                            ++kept;
                            min_kept = std::min(min_kept, sc(r, c));
                        } else {
                            max_dropped = std::max(max_dropped, sc(r, c));
                        }
                    }
                    CHECK(kept == (len == mm ? n : (n * len + mm - 1) / mm));
                    CHECK(max_dropped <= min_kept);
                }
            }
            if (cols % mm == 0 && n * 2 == mm) {
                CHECK(m.sparsity() == 0.5);
            }
        }
    }
}

TEST_CASE("N:M worked example") {
    const Matrix sc{{0.9, 0.1, 0.5, 0.2}};
    CHECK(build_mask_nm(sc, 2, 4).bits == std::vector<std::uint8_t>{1, 0, 1, 0});
    CHECK_THROWS_AS(build_mask_nm(sc, 4, 2), UsageError);
    CHECK_THROWS_AS(build_mask_nm(sc, 0, 4), UsageError);
}

TEST_CASE("parse_sparsity and describe") {
    CHECK(std::get<double>(parse_sparsity("0.5")) == 0.5);
    CHECK(std::get<NmPattern>(parse_sparsity("2:4")) == NmPattern{2, 4});
    CHECK(describe(parse_sparsity("4:8")) == "4:8");
    CHECK(describe(parse_sparsity("0.3")) == "0.3");
    CHECK_THROWS_AS(parse_sparsity("1.0"), UsageError);
    CHECK_THROWS_AS(parse_sparsity("x"), UsageError);
    CHECK_THROWS_AS(parse_sparsity("3:2"), UsageError);
    CHECK(criterion_from_string("wanda") == Criterion::wanda_style);
}

TEST_CASE("criterion scores") {
    const Matrix w{{1.0, -2.0}, {-3.0, 4.0}};
    const Matrix act{{1.0, 0.0}, {0.0, 2.0}};
    const Matrix norms{{1.0, 2.0}};
    CHECK(criterion_scores(Criterion::wanda_style, w, nullptr, &norms) == Matrix{{1.0, 4.0}, {3.0, 8.0}});
    const Matrix imp{{0.5, 0.1}, {0.2, 0.3}};
    CHECK(criterion_scores(Criterion::copal, w, &imp) == imp);
    CHECK_THROWS_AS(criterion_scores(Criterion::copal, w), UsageError);
    CHECK_THROWS_AS(criterion_scores(Criterion::wanda_style, w), UsageError);
    (void)act;
}

TEST_CASE("stasis detection") {
    Mask a = Mask::ones(2, 2);
    Mask b = a;
    CHECK(detect_stasis(a, b).is_stasis);
    b.bits[3] = 0;
    const auto c = detect_stasis(a, b);
    CHECK_FALSE(c.is_stasis);
    CHECK(c.hamming == 1);
    CHECK_THROWS_AS(detect_stasis(a, Mask::ones(1, 4)), ShapeError);
}

TEST_CASE("sequential baselines stall while copal keeps moving") {
    const auto base = model::make_network(model::ModelShape{32, 8, 16, 2}, 9);
    const auto a = corpus::sample_calibration(noise_corpus("a", 1, 32), 8, 32, 1);
    const auto b = corpus::sample_calibration(noise_corpus("b", 2, 32), 8, 32, 1);
    for (const auto crit : {Criterion::magnitude, Criterion::wanda_style}) {
        ContinualPruner p(base, PruneConfig{crit, 0.5, InitMode::sequential, 1});
        p.step(a);
        const auto& second = p.step(b);
        CHECK(second.stasis());
        for (const auto& st : second.stats) CHECK(*st.hamming_vs_previous == 0);
    }
    ContinualPruner c(base, PruneConfig{Criterion::copal, 0.5, InitMode::sequential, 1});
    c.step(a);
    const auto& second = c.step(b);
    CHECK_FALSE(second.stasis());
    std::size_t moved = 0;
    for (const auto& st : second.stats) moved += *st.hamming_vs_previous;
    CHECK(moved > 0);
}

TEST_CASE("copal masks the base weights with exact sparsity") {
    const auto base = model::make_network(model::ModelShape{32, 8, 16, 2}, 9);
    const auto a = corpus::sample_calibration(noise_corpus("a", 1, 32), 4, 32, 1);
    ContinualPruner p(base, PruneConfig{Criterion::copal, 0.5, InitMode::sequential, 1});
    const auto& r = p.step(a);
    for (const auto idx : base.prunable_indices()) {
        const Matrix& pruned = r.pruned.layer(idx).weight();
        const Matrix& orig = base.layer(idx).weight();
        std::size_t zeros = 0;
        for (std::size_t k = 0; k < pruned.size(); ++k) {
            if (pruned.values()[k] == 0.0) ++zeros;
            else CHECK(pruned.values()[k] == orig.values()[k]);
        }
        CHECK(zeros == orig.size() / 2);
    }
    CHECK(p.state().datasets_seen == std::vector<std::string>{"a"});
    CHECK(model::frozen_fingerprint(r.pruned) == model::frozen_fingerprint(base));
}

TEST_CASE("global baselines ignore the running network") {
    const auto base = model::make_network(model::ModelShape{32, 8, 16, 1}, 3);
    const auto a = corpus::sample_calibration(noise_corpus("a", 1, 32), 4, 16, 1);
    const auto b = corpus::sample_calibration(noise_corpus("b", 2, 32), 4, 16, 1);
    ContinualPruner p(base, PruneConfig{Criterion::wanda_style, 0.5, InitMode::global, 1});
    p.step(a);
    const auto& r = p.step(b);
    importance::ImportanceState unused = importance::init_state(base);
    const auto fresh = prune_step(base, base, unused, PruneConfig{Criterion::wanda_style, 0.5, InitMode::global, 1}, b);
    CHECK(r.masks == fresh.masks);
}

TEST_CASE("mask file round trip") {
    Rng rng(34);
    MaskSet set;
    set[0] = build_mask_unstructured(random_scores(5, 7, rng, false), 0.3);
    set[2] = build_mask_nm(random_scores(3, 8, rng, false), 2, 4);
    const auto bytes = encode_masks(set);
    CHECK(decode_masks(bytes) == set);
    auto cut = bytes;
    cut.pop_back();
    CHECK_THROWS_AS(decode_masks(cut), FormatError);
    const auto summary = mask_summary(set, &set);
    CHECK(summary.size() == 2);
}

TEST_CASE("small criterion and mask examples") {
    CHECK(criterion_scores(Criterion::magnitude, Matrix{{-2, 1}}) == Matrix{{2, 1}});

    Rng rng(14);
    const Matrix w = testsupport::random_matrix(6, 5, rng);
    const Matrix ones(1, 5, 1.0);
    CHECK(criterion_scores(Criterion::wanda_style, w, nullptr, &ones) == criterion_scores(Criterion::magnitude, w));

    const Matrix row{{0.1, 0.2, 0.3, 0.4}};
    const Mask m = build_mask_unstructured(row, 0.5);
    CHECK(m.bits == std::vector<std::uint8_t>{0, 0, 1, 1});

    const Mask sq = build_mask_unstructured(Matrix{{4, 3}, {2, 1}}, 0.5);
    CHECK(sq.bits == std::vector<std::uint8_t>{1, 1, 0, 0});

    const Matrix scores = random_scores(9, 13, rng, true);
    CHECK(build_mask_unstructured(scores, 0.4) == build_mask_unstructured(scores, 0.4));
    CHECK(build_mask_nm(scores, 2, 4) == build_mask_nm(scores, 2, 4));
}

TEST_CASE("4:8 on equal scores keeps the first four of each group") {
    const Matrix flat(3, 16, 1.0);
    const Mask m = build_mask_nm(flat, 4, 8);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 16; ++c) CHECK(m.keep(r, c) == (c % 8 < 4));
}

TEST_CASE("apply_mask with all-ones and all-zeros masks") {
    Rng rng(15);
    const Matrix w = testsupport::random_matrix(4, 7, rng);
    CHECK(apply_mask(w, Mask::ones(4, 7)) == w);
    Mask zeros = Mask::ones(4, 7);
    std::fill(zeros.bits.begin(), zeros.bits.end(), std::uint8_t{0});
    CHECK(apply_mask(w, zeros) == Matrix(4, 7));
}

TEST_CASE("sequential magnitude on 64x64 layers reaches stasis on the second corpus") {
    const auto base = model::make_network(model::ModelShape{64, 64, 64, 1}, 21);
    const auto a = corpus::sample_calibration(noise_corpus("a", 1, 64), 4, 32, 1);
    const auto b = corpus::sample_calibration(noise_corpus("b", 2, 64), 4, 32, 1);
    ContinualPruner p(base, PruneConfig{Criterion::magnitude, 0.5, InitMode::sequential, 1});
    p.step(a);
    const auto& second = p.step(b);
    for (const auto& st : second.stats) {
        REQUIRE(st.hamming_vs_previous.has_value());
        CHECK(*st.hamming_vs_previous == 0);
    }
    CHECK(second.stasis());
}

TEST_CASE("prune_step at sparsity 0 returns the network unchanged") {
    const auto base = model::make_network(model::ModelShape{32, 8, 16, 2}, 4);
    const auto a = corpus::sample_calibration(noise_corpus("a", 1, 32), 4, 16, 1);
    for (const auto crit : {Criterion::copal, Criterion::magnitude, Criterion::wanda_style}) {
        auto state = importance::init_state(base);
        const auto r = prune_step(base, base, state, PruneConfig{crit, 0.0, InitMode::sequential, 1}, a);
        CHECK(r.pruned == base);
    }
}

TEST_CASE("overall sparsity is within one weight per layer of the target") {
    const auto base = model::make_network(model::ModelShape{32, 10, 14, 2}, 4);
    const auto a = corpus::sample_calibration(noise_corpus("a", 1, 32), 4, 16, 1);
    for (const double s : {0.1, 0.3, 0.55, 0.9}) {
        auto state = importance::init_state(base);
        const auto r = prune_step(base, base, state, PruneConfig{Criterion::magnitude, s, InitMode::sequential, 1}, a);
        std::size_t zeros = 0, total = 0;
        for (const auto& st : r.stats) {
            zeros += st.zeros;
            total += st.total;
        }
        CHECK(std::abs(static_cast<double>(zeros) - s * static_cast<double>(total)) <=
              static_cast<double>(r.stats.size()));
    }
}
