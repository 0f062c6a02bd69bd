#include <doctest.h>

#include <cmath>
#include <omp.h>

#include "copal/error.hpp"
#include "copal/importance.hpp"
#include "support.hpp"

using namespace copal;
using namespace copal::importance;
using linalg::Matrix;

namespace {

model::Network small_net(std::uint64_t seed = 2) {
    return model::make_network(model::ModelShape{32, 8, 12, 2, model::Activation::gelu}, seed);
}

corpus::Corpus small_corpus(const std::string& name, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<model::TokenId> t(3000);
    for (auto& v : t) v = static_cast<model::TokenId>(rng.index(32));
    return corpus::make_corpus(name, t, 0.2, 32);
}

ImportanceState run_order(const model::Network& net, const std::vector<corpus::CalibrationSet>& sets,
                          const SensitivityOptions& opts) {
    ImportanceState s = init_state(net);
    for (const auto& c : sets) {
        merge(s, dataset_contribution(net, c, opts));
        finish_dataset(s, c.corpus_name, c.segments.size());
    }
    return s;
}

}  // namespace

TEST_CASE("accumulate adds |W (.) G|") {
    const auto net = small_net();
    auto s = init_state(net);
    const std::size_t idx = net.prunable_indices().front();
    const Matrix& w = net.layer(idx).weight();
    Rng rng(1);
    const Matrix g = testsupport::random_matrix(w.rows(), w.cols(), rng);
    accumulate(s, idx, w, g);
    accumulate(s, idx, w, g);
    for (std::size_t k = 0; k < w.size(); ++k) {
        CHECK(s.per_layer.at(idx).values()[k] == doctest::Approx(2 * std::fabs(w.values()[k] * g.values()[k])));
    }
    CHECK_THROWS_AS(accumulate(s, idx, w, Matrix(1, 1)), ShapeError);
    CHECK_THROWS_AS(accumulate(s, 999, w, g), ShapeError);
}

TEST_CASE("dataset contribution matches a per-sample oracle") {
    const auto net = small_net();
    const auto calib = corpus::sample_calibration(small_corpus("a", 1), 4, 16, 3);
    const SensitivityOptions opts{1e-3, 77, Granularity::segment_mean};
    const auto got = dataset_contribution(net, calib, opts);

    std::map<std::size_t, Matrix> expect;
    for (const auto idx : net.prunable_indices()) {
        expect[idx] = Matrix(net.layer(idx).out_dim(), net.layer(idx).in_dim());
    }
    for (std::size_t s = 0; s < calib.segments.size(); ++s) {
        const auto cap = model::forward_capture(net, calib.segments[s]);
        for (const auto& rec : cap.records) {
            const Matrix& w = net.layer(rec.layer_index).weight();
            Matrix x(w.cols(), 1);
            for (std::size_t r = 0; r < rec.input.rows(); ++r)
                for (std::size_t c = 0; c < w.cols(); ++c) x(c, 0) += rec.input(r, c) / rec.input.rows();
            const auto p = sensitivity::make_perturbation(w, x, 1e-3, perturbation_seed(77, "a", rec.layer_index, s));
            // y = W x for a linear layer, so dy = dW x + W dx + dW dx... computed directly
            const Matrix y = testsupport::naive_matmul(w, x);
            const Matrix yw = testsupport::naive_matmul(linalg::add(w, p.delta_w), x);
            const Matrix yx = testsupport::naive_matmul(w, linalg::add(x, p.delta_x));
            for (std::size_t o = 0; o < w.rows(); ++o) {
                const double dy = (yw(o, 0) - y(o, 0)) + (yx(o, 0) - y(o, 0));
                for (std::size_t i = 0; i < w.cols(); ++i) {
                    expect[rec.layer_index](o, i) += std::fabs(w(o, i) * 2.0 * dy * x(i, 0));
                }
            }
        }
    }
    for (const auto& [idx, m] : expect) {
        CHECK(testsupport::rel_err(got.per_layer.at(idx), m) < 1e-10);
    }
}

TEST_CASE("final importance does not depend on dataset order") {
    const auto net = small_net();
    const SensitivityOptions opts{1e-3, 5, Granularity::segment_mean};
    const auto a = corpus::sample_calibration(small_corpus("a", 1), 8, 32, 1);
    const auto b = corpus::sample_calibration(small_corpus("b", 2), 8, 32, 1);
    const auto c = corpus::sample_calibration(small_corpus("c", 3), 8, 32, 1);
    const auto abc = run_order(net, {a, b, c}, opts);
    const auto cba = run_order(net, {c, b, a}, opts);
    for (const auto& [idx, m] : abc.per_layer) {
        CHECK(linalg::max_abs_diff(m, cba.per_layer.at(idx)) < 1e-12);
    }
    CHECK(abc.sample_count == cba.sample_count);
}

TEST_CASE("partial contributions merge to the full sum") {
    const auto net = small_net();
    const SensitivityOptions opts{1e-3, 6, Granularity::per_token};
    const auto calib = corpus::sample_calibration(small_corpus("a", 4), 10, 24, 2);
    auto parts = partial_contribution(net, calib, opts, 0, 4);
    merge(parts, partial_contribution(net, calib, opts, 4, 10));
    const auto full = dataset_contribution(net, calib, opts);
    for (const auto& [idx, m] : full.per_layer) {
        CHECK(testsupport::rel_err(parts.per_layer.at(idx), m) < 1e-13);
    }
}

TEST_CASE("contribution is identical for any thread count") {
    const auto net = small_net();
    const SensitivityOptions opts{1e-3, 7, Granularity::segment_mean};
    const auto calib = corpus::sample_calibration(small_corpus("a", 5), 12, 24, 2);
    const int saved = omp_get_max_threads();
    omp_set_num_threads(1);
    const auto one = dataset_contribution(net, calib, opts);
    omp_set_num_threads(4);
    const auto four = dataset_contribution(net, calib, opts);
    omp_set_num_threads(saved);
    CHECK(one == four);
}

TEST_CASE("repeating the previous dataset is a usage error") {
    auto s = init_state(small_net());
    finish_dataset(s, "a", 4);
    CHECK_THROWS_AS(finish_dataset(s, "a", 4), UsageError);
    finish_dataset(s, "b", 4);
    CHECK_NOTHROW(finish_dataset(s, "a", 4));
    CHECK(s.sample_count.at("a") == 8);
}

TEST_CASE("state round trip and validation") {
    const auto net = small_net();
    auto s = dataset_contribution(net, corpus::sample_calibration(small_corpus("a", 1), 3, 16, 1), {});
    finish_dataset(s, "a", 3);
    const auto bytes = encode_state(s);
    CHECK(decode_state(bytes) == s);
    auto cut = bytes;
    cut.pop_back();
    CHECK_THROWS_AS(decode_state(cut), FormatError);
    auto extra = bytes;
    extra.push_back(1);
    CHECK_THROWS_AS(decode_state(extra), FormatError);
    CHECK_NOTHROW(validate_against(s, net));
    const auto other = model::make_network(model::ModelShape{32, 8, 16, 2}, 1);
    CHECK_THROWS_AS(validate_against(s, other), ShapeError);
}

TEST_CASE("init_state: one zero matrix per linear layer, reproducible") {
    const auto net = small_net();
    const auto s = init_state(net);
    CHECK(s.per_layer.size() == net.prunable_indices().size());
    for (const auto idx : net.prunable_indices()) {
        const Matrix& w = net.layer(idx).weight();
        CHECK(s.per_layer.at(idx) == Matrix(w.rows(), w.cols()));
    }
    CHECK(s.datasets_seen.empty());
    CHECK(init_state(net) == s);
}

TEST_CASE("accumulate worked example and zero gradient") {
    ImportanceState s;
    s.per_layer[0] = Matrix{{1, 1}};
    accumulate(s, 0, Matrix{{2, -1}}, Matrix{{-3, 4}});
    CHECK(s.per_layer.at(0) == Matrix{{7, 5}});
    accumulate(s, 0, Matrix{{2, -1}}, Matrix{{0, 0}});
    CHECK(s.per_layer.at(0) == Matrix{{7, 5}});
}

TEST_CASE("folding two datasets adds their contributions; entries never decrease") {
    const auto net = small_net();
    const auto ca = corpus::sample_calibration(small_corpus("A", 1), 4, 16, 3);
    const auto cb = corpus::sample_calibration(small_corpus("B", 2), 4, 16, 4);
    const SensitivityOptions opts{1e-3, 5, Granularity::segment_mean};
    const auto contrib_a = dataset_contribution(net, ca, opts);
    const auto contrib_b = dataset_contribution(net, cb, opts);

    auto s = init_state(net);
    merge(s, contrib_a);
    finish_dataset(s, "A", 4);
    const auto after_a = s;
    merge(s, contrib_b);
    finish_dataset(s, "B", 4);
    CHECK(s.datasets_seen == std::vector<std::string>{"A", "B"});
    for (const auto& [idx, m] : s.per_layer) {
        const Matrix& a = contrib_a.per_layer.at(idx);
        const Matrix& b = contrib_b.per_layer.at(idx);
        for (std::size_t k = 0; k < m.size(); ++k) {
            CHECK(m.values()[k] == a.values()[k] + b.values()[k]);
            CHECK(m.values()[k] >= after_a.per_layer.at(idx).values()[k]);
            CHECK(after_a.per_layer.at(idx).values()[k] >= 0.0);
        }
    }

    auto doubled = init_state(net);
    merge(doubled, contrib_a);
    merge(doubled, contrib_a);
    for (const auto& [idx, m] : doubled.per_layer)
        for (std::size_t k = 0; k < m.size(); ++k)
            CHECK(m.values()[k] == 2.0 * contrib_a.per_layer.at(idx).values()[k]);
}

TEST_CASE("state size does not grow with corpus size") {
    const auto net = small_net();
    Rng rng(6);
    std::vector<model::TokenId> small(500), large(50000);
    for (auto& v : small) v = static_cast<model::TokenId>(rng.index(32));
    for (auto& v : large) v = static_cast<model::TokenId>(rng.index(32));
    auto s1 = dataset_contribution(net, corpus::sample_calibration(corpus::make_corpus("a", small, 0.2, 32), 4, 16, 1), {});
    auto s2 = dataset_contribution(net, corpus::sample_calibration(corpus::make_corpus("a", large, 0.2, 32), 4, 16, 1), {});
    finish_dataset(s1, "a", 4);
    finish_dataset(s2, "a", 4);
    CHECK(encode_state(s1).size() == encode_state(s2).size());
}
