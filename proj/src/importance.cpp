// SPDX-License-Identifier: Apache-2.0

#include "copal/importance.hpp"
#include "copal/parallel.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <utility>

#include "copal/binio.hpp"
#include "copal/error.hpp"
#include "copal/rng.hpp"

namespace copal::importance {

namespace {

constexpr std::string_view kStateMagic = "COPALIMP";

Matrix& layer_entry(ImportanceState& state, std::size_t layer_index) {
    const auto it = state.per_layer.find(layer_index);
    if (it == state.per_layer.end()) {
        throw ShapeError("importance: layer " + std::to_string(layer_index) + " is not tracked");
    }
    return it->second;
}

// |W (.) grad| summed into `into`, one sample (column) at a time.
void add_sample_importance(Matrix& into, const Matrix& weight, const Matrix& dy, const Matrix& x) {
    const std::size_t out = weight.rows();
    const std::size_t in = weight.cols();
    for (std::size_t s = 0; s < dy.cols(); ++s) {
        for (std::size_t o = 0; o < out; ++o) {
            const double g_row = 2.0 * dy(o, s);
            const auto w = weight.row(o);
            auto acc = into.row(o);
            for (std::size_t i = 0; i < in; ++i) {
                acc[i] += std::fabs(w[i] * (g_row * x(i, s)));
            }
        }
    }
}

}  // namespace

ImportanceState init_state(const model::Network& net) {
    ImportanceState state;
    for (const std::size_t idx : net.prunable_indices()) {
        const Matrix& w = net.layer(idx).weight();
        state.per_layer.emplace(idx, Matrix(w.rows(), w.cols()));
    }
    if (state.per_layer.empty()) {
        throw UsageError("init_state: network has no prunable layers");
    }
    return state;
}

ImportanceState& accumulate(ImportanceState& state, std::size_t layer_index, const Matrix& weight, const Matrix& grad) {
    Matrix& acc = layer_entry(state, layer_index);
    if (!weight.same_shape(acc) || !grad.same_shape(acc)) {
        throw ShapeError("accumulate: layer " + std::to_string(layer_index) + " expects " + acc.shape_string() +
                         ", got weight " + weight.shape_string() + " and grad " + grad.shape_string());
    }
    auto a = acc.values();
    const auto w = weight.values();
    const auto g = grad.values();
    for (std::size_t i = 0; i < a.size(); ++i) {
        a[i] += std::fabs(w[i] * g[i]);
    }
    linalg::ensure_finite(acc, "importance accumulate");
    return state;
}

ImportanceState& finish_dataset(ImportanceState& state, const std::string& corpus_name, std::size_t n_samples) {
    if (!state.datasets_seen.empty() && state.datasets_seen.back() == corpus_name) {
        throw UsageError("finish_dataset: '" + corpus_name + "' repeats the previous dataset");
    }
    state.datasets_seen.push_back(corpus_name);
    state.sample_count[corpus_name] += n_samples;
    return state;
}

ImportanceState& merge(ImportanceState& state, const ImportanceState& partial) {
    if (state.per_layer.size() != partial.per_layer.size()) {
        throw ShapeError("merge: layer sets differ");
    }
    for (const auto& [idx, m] : partial.per_layer) {
        linalg::add_inplace(layer_entry(state, idx), m);
    }
    return state;
}

void validate_against(const ImportanceState& state, const model::Network& net) {
    const auto prunable = net.prunable_indices();
    if (prunable.size() != state.per_layer.size()) {
        throw ShapeError("importance state tracks " + std::to_string(state.per_layer.size()) +
                         " layers but the network has " + std::to_string(prunable.size()) + " prunable layers");
    }
    for (const std::size_t idx : prunable) {
        const auto it = state.per_layer.find(idx);
        if (it == state.per_layer.end()) {
            throw ShapeError("importance state has no entry for layer " + std::to_string(idx));
        }
        if (!it->second.same_shape(net.layer(idx).weight())) {
            throw ShapeError("importance state layer " + std::to_string(idx) + " is " + it->second.shape_string() +
                             " but the weight is " + net.layer(idx).weight().shape_string());
        }
    }
}

std::uint64_t perturbation_seed(std::uint64_t seed, const std::string& corpus_name, std::size_t layer_index,
                                std::size_t sample_index) {
    return mix_seed(mix_seed(mix_seed(seed, stable_hash(corpus_name)), layer_index), sample_index);
}

ImportanceState partial_contribution(const model::Network& base, const corpus::CalibrationSet& calib,
                                     const SensitivityOptions& options, std::size_t begin, std::size_t end) {
    end = std::min(end, calib.segments.size());
    const auto prunable = base.prunable_indices();
    const std::size_t count = end > begin ? end - begin : 0;

    // One buffer per segment so the reduction below runs in a fixed order.
    std::vector<std::vector<Matrix>> per_segment(count);
    ErrorSlot errors;
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t k = 0; k < static_cast<std::ptrdiff_t>(count); ++k) {
        errors.run(static_cast<std::size_t>(k), [&] {
            const std::size_t seg = begin + static_cast<std::size_t>(k);
            const auto captured = model::forward_capture(base, calib.segments[seg]);
            auto& out = per_segment[static_cast<std::size_t>(k)];
            for (const auto& rec : captured.records) {
                const auto f = sensitivity::WeightedMap::from_layer(base.layer(rec.layer_index));
                const Matrix x = options.granularity == Granularity::segment_mean
                                     ? linalg::column_mean_of_rows(rec.input)
                                     : linalg::transpose(rec.input);
                const auto seed = perturbation_seed(options.seed, calib.corpus_name, rec.layer_index, seg);
                const auto p = sensitivity::make_perturbation(f.weight, x, options.epsilon, seed);
                const Matrix y = f.apply(x);
                const Matrix s_w = sensitivity::sensitivity_w(f, x, y, p);
                const Matrix dy = linalg::add(s_w, sensitivity::sensitivity_x(f, x, y, p));
                const Matrix dfdw = sensitivity::dfdw_surrogate(f, x, s_w, p);
                Matrix contribution(f.weight.rows(), f.weight.cols());
                add_sample_importance(contribution, f.weight, dy, dfdw);
                out.push_back(std::move(contribution));
            }
        });
    }
    errors.rethrow();

    ImportanceState delta = init_state(base);
    for (const auto& seg : per_segment) {
        for (std::size_t l = 0; l < prunable.size(); ++l) {
            linalg::add_inplace(delta.per_layer.at(prunable[l]), seg[l]);
        }
    }
    return delta;
}

ImportanceState dataset_contribution(const model::Network& base, const corpus::CalibrationSet& calib,
                                     const SensitivityOptions& options) {
    return partial_contribution(base, calib, options, 0, calib.segments.size());
}

// Layout (little-endian):
//   "COPALIMP" u32 version
//   manifest: u32 n, n x str dataset; u32 m, m x (str name, u64 samples)
//   table: u32 layers, per layer (u32 index, u32 rows, u32 cols)
//   payload: per layer rows*cols f64, row-major
std::vector<std::uint8_t> encode_state(const ImportanceState& state) {
    binio::Writer w;
    w.magic(kStateMagic);
    w.u32(kStateVersion);
    w.u32(static_cast<std::uint32_t>(state.datasets_seen.size()));
    for (const auto& name : state.datasets_seen) {
        w.str(name);
    }
    w.u32(static_cast<std::uint32_t>(state.sample_count.size()));
    for (const auto& [name, n] : state.sample_count) {
        w.str(name);
        w.u64(n);
    }
    w.u32(static_cast<std::uint32_t>(state.per_layer.size()));
    for (const auto& [idx, m] : state.per_layer) {
        w.u32(static_cast<std::uint32_t>(idx));
        w.u32(static_cast<std::uint32_t>(m.rows()));
        w.u32(static_cast<std::uint32_t>(m.cols()));
    }
    for (const auto& [idx, m] : state.per_layer) {
        w.f64s(m.values());
    }
    return w.buffer();
}

ImportanceState decode_state(std::vector<std::uint8_t> bytes) {
    binio::Reader r(std::move(bytes));
    r.expect_magic(kStateMagic, "state magic");
    const std::uint32_t version = r.u32("state version");
    if (version != kStateVersion) {
        throw FormatError("importance state version " + std::to_string(version) + " is not supported");
    }
    ImportanceState state;
    const std::uint32_t n_seen = r.u32("datasets_seen count");
    for (std::uint32_t i = 0; i < n_seen; ++i) {
        state.datasets_seen.push_back(r.str("datasets_seen entry"));
    }
    const std::uint32_t n_counts = r.u32("sample_count size");
    for (std::uint32_t i = 0; i < n_counts; ++i) {
        std::string name = r.str("sample_count name");
        state.sample_count[std::move(name)] = r.u64("sample_count value");
    }
    const std::uint32_t n_layers = r.u32("layer table size");
    std::vector<std::array<std::uint32_t, 3>> table;
    for (std::uint32_t i = 0; i < n_layers; ++i) {
        table.push_back({r.u32("layer index"), r.u32("layer rows"), r.u32("layer cols")});
        if (table.back()[1] == 0 || table.back()[2] == 0) {
            throw FormatError("importance state: zero dimension for layer " + std::to_string(table.back()[0]));
        }
    }
    for (const auto& [idx, rows, cols] : table) {
        auto values = r.f64s(static_cast<std::size_t>(rows) * cols, "importance payload");
        for (const double v : values) {
            if (!std::isfinite(v) || v < 0.0) {
                throw FormatError("importance state: negative or non-finite W* entry in layer " + std::to_string(idx));
            }
        }
        if (!state.per_layer.emplace(idx, Matrix(rows, cols, std::move(values))).second) {
            throw FormatError("importance state: duplicate layer " + std::to_string(idx));
        }
    }
    r.expect_end("importance state");
    return state;
}

void save_state(const ImportanceState& state, const std::filesystem::path& path) {
    binio::write_file(path, encode_state(state));
}

ImportanceState load_state(const std::filesystem::path& path) { return decode_state(binio::read_file(path)); }

ImportanceState load_state(const std::filesystem::path& path, const model::Network& net) {
    ImportanceState state = load_state(path);
    validate_against(state, net);
    return state;
}

}  // namespace copal::importance
