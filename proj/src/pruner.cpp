// SPDX-License-Identifier: Apache-2.0

#include "copal/pruner.hpp"
#include "copal/parallel.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <utility>

#include "copal/binio.hpp"
#include "copal/error.hpp"

namespace copal::pruner {

namespace {

constexpr std::string_view kMaskMagic = "COPALMSK";

void validate_ratio(double s) {
    if (!(s >= 0.0 && s < 1.0)) {
        throw UsageError("sparsity ratio must lie in [0, 1), got " + std::to_string(s));
    }
}

void validate_pattern(std::size_t n, std::size_t m) {
    if (m == 0 || n == 0 || n > m) {
        throw UsageError("invalid N:M pattern " + std::to_string(n) + ":" + std::to_string(m));
    }
}

}  // namespace

const char* to_string(Criterion c) {
    switch (c) {
        case Criterion::copal: return "copal";
        case Criterion::magnitude: return "magnitude";
        case Criterion::wanda_style: return "wanda_style";
    }
    return "?";
}

const char* to_string(InitMode m) { return m == InitMode::sequential ? "sequential" : "global"; }

Criterion criterion_from_string(std::string_view s) {
    if (s == "copal") return Criterion::copal;
    if (s == "magnitude") return Criterion::magnitude;
    if (s == "wanda_style" || s == "wanda") return Criterion::wanda_style;
    throw UsageError("unknown criterion '" + std::string(s) + "'");
}

InitMode init_mode_from_string(std::string_view s) {
    if (s == "sequential") return InitMode::sequential;
    if (s == "global") return InitMode::global;
    throw UsageError("unknown init mode '" + std::string(s) + "'");
}

std::string describe(const SparsitySpec& spec) {
    if (const auto* nm = std::get_if<NmPattern>(&spec)) {
        return std::to_string(nm->n) + ":" + std::to_string(nm->m);
    }
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", std::get<double>(spec));
    return buf;
}

SparsitySpec parse_sparsity(std::string_view text) {
    const auto colon = text.find(':');
    if (colon != std::string_view::npos) {
        NmPattern p;
        const auto a = std::from_chars(text.data(), text.data() + colon, p.n);
        const auto b = std::from_chars(text.data() + colon + 1, text.data() + text.size(), p.m);
        if (a.ec != std::errc{} || b.ec != std::errc{} || b.ptr != text.data() + text.size()) {
            throw UsageError("cannot parse N:M pattern '" + std::string(text) + "'");
        }
        validate_pattern(p.n, p.m);
        return p;
    }
    try {
        std::size_t used = 0;
        const double s = std::stod(std::string(text), &used);
        if (used != text.size()) {
            throw UsageError("trailing characters");
        }
        validate_ratio(s);
        return s;
    } catch (const std::logic_error&) {
        throw UsageError("cannot parse sparsity '" + std::string(text) + "'");
    }
}

Mask Mask::ones(std::size_t rows, std::size_t cols) {
    Mask m;
    m.rows = rows;
    m.cols = cols;
    m.bits.assign(rows * cols, 1);
    return m;
}

std::size_t Mask::zeros() const {
    return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{0}));
}

double Mask::sparsity() const {
    return bits.empty() ? 0.0 : static_cast<double>(zeros()) / static_cast<double>(bits.size());
}

std::size_t prune_count(double s, std::size_t n) {
    validate_ratio(s);
    // The small offset keeps e.g. 0.29 * 100 from flooring to 28.
    const auto k = static_cast<std::size_t>(std::floor(s * static_cast<double>(n) + 1e-9));
    return std::min(k, n);
}

Matrix criterion_scores(Criterion criterion, const Matrix& weight, const Matrix* importance, const Matrix* activations) {
    switch (criterion) {
        case Criterion::magnitude:
            return linalg::elementwise_abs(weight);
        case Criterion::copal:
            if (importance == nullptr) {
                throw UsageError("copal scores need an importance state");
            }
            if (!importance->same_shape(weight)) {
                throw ShapeError("copal scores: importance " + importance->shape_string() + " vs weight " +
                                 weight.shape_string());
            }
            return *importance;
        case Criterion::wanda_style: {
            if (activations == nullptr) {
                throw UsageError("wanda_style scores need captured activations");
            }
            if (activations->cols() != weight.cols()) {
                throw ShapeError("wanda_style scores: activations " + activations->shape_string() +
                                 " do not match weight inputs " + weight.shape_string());
            }
            std::vector<double> norms(weight.cols(), 0.0);
            for (std::size_t r = 0; r < activations->rows(); ++r) {
                const auto row = activations->row(r);
                for (std::size_t c = 0; c < norms.size(); ++c) {
                    norms[c] += row[c] * row[c];
                }
            }
            Matrix out(weight.rows(), weight.cols());
            for (std::size_t r = 0; r < weight.rows(); ++r) {
                for (std::size_t c = 0; c < weight.cols(); ++c) {
                    out(r, c) = std::fabs(weight(r, c)) * std::sqrt(norms[c]);
                }
            }
            return out;
        }
    }
    throw UsageError("unknown criterion");
}

double threshold_for_sparsity(const Matrix& scores, double s) {
    if (scores.empty()) {
        throw ShapeError("threshold_for_sparsity: empty scores");
    }
    const std::size_t k = prune_count(s, scores.size());
    const auto order = linalg::argsort_ascending(scores.values());
    return scores.values()[order[std::min(k, order.size() - 1)]];
}

double percentile_threshold(const Matrix& scores, double s) {
    if (scores.empty()) {
        throw ShapeError("percentile_threshold: empty scores");
    }
    validate_ratio(s);
    std::vector<double> sorted(scores.values().begin(), scores.values().end());
    std::sort(sorted.begin(), sorted.end());
    const double n = static_cast<double>(sorted.size());
    auto idx = static_cast<std::size_t>(std::ceil((1.0 - s) * n));
    idx = std::clamp<std::size_t>(idx, 1, sorted.size());
    return sorted[idx - 1];
}

Mask build_mask_unstructured(const Matrix& scores, double s) {
    if (scores.empty()) {
        throw ShapeError("build_mask_unstructured: empty scores");
    }
    Mask mask = Mask::ones(scores.rows(), scores.cols());
    for (const std::size_t i : linalg::lowest_k(scores.values(), prune_count(s, scores.size()))) {
        mask.bits[i] = 0;
    }
    return mask;
}

Mask build_mask_nm(const Matrix& scores, std::size_t n, std::size_t m) {
    validate_pattern(n, m);
    if (scores.empty()) {
        throw ShapeError("build_mask_nm: empty scores");
    }
    Mask mask;
    mask.rows = scores.rows();
    mask.cols = scores.cols();
    mask.bits.assign(scores.size(), 0);
    mask.structure = MaskStructure::nm;
    mask.pattern = NmPattern{n, m};
    std::vector<std::size_t> idx;
    for (std::size_t r = 0; r < scores.rows(); ++r) {
        const auto row = scores.row(r);
        for (std::size_t start = 0; start < scores.cols(); start += m) {
            const std::size_t len = std::min(m, scores.cols() - start);
            const std::size_t keep = len == m ? n : (n * len + m - 1) / m;
            idx.resize(len);
            std::iota(idx.begin(), idx.end(), start);
            std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
            for (std::size_t k = 0; k < keep; ++k) {
                mask.bits[r * scores.cols() + idx[k]] = 1;
            }
        }
    }
    return mask;
}

Mask build_mask(const Matrix& scores, const SparsitySpec& spec) {
    if (const auto* nm = std::get_if<NmPattern>(&spec)) {
        return build_mask_nm(scores, nm->n, nm->m);
    }
    return build_mask_unstructured(scores, std::get<double>(spec));
}

Matrix apply_mask(const Matrix& weight, const Mask& mask) {
    if (weight.rows() != mask.rows || weight.cols() != mask.cols) {
        throw ShapeError("apply_mask: weight " + weight.shape_string() + " vs mask " + std::to_string(mask.rows) +
                         "x" + std::to_string(mask.cols));
    }
    Matrix out = weight;
    auto v = out.values();
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (mask.bits[i] == 0) {
            v[i] = 0.0;
        }
    }
    return out;
}

StasisCheck detect_stasis(const Mask& previous, const Mask& next) {
    if (previous.rows != next.rows || previous.cols != next.cols) {
        throw ShapeError("detect_stasis: masks have different shapes");
    }
    StasisCheck out;
    for (std::size_t i = 0; i < previous.bits.size(); ++i) {
        out.hamming += (previous.bits[i] != next.bits[i]) ? 1 : 0;
    }
    out.is_stasis = out.hamming == 0;
    return out;
}

bool StepResult::stasis() const {
    if (stats.empty()) {
        return false;
    }
    return std::all_of(stats.begin(), stats.end(),
                       [](const LayerStats& s) { return s.hamming_vs_previous && *s.hamming_vs_previous == 0; });
}

std::map<std::size_t, Matrix> feature_norms(const Network& net, const corpus::CalibrationSet& calib) {
    const auto prunable = net.prunable_indices();
    std::vector<std::vector<std::vector<double>>> per_segment(calib.segments.size());
    ErrorSlot errors;
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t s = 0; s < static_cast<std::ptrdiff_t>(calib.segments.size()); ++s) {
        errors.run(static_cast<std::size_t>(s), [&] {
            const auto captured = model::forward_capture(net, calib.segments[static_cast<std::size_t>(s)]);
            auto& sums = per_segment[static_cast<std::size_t>(s)];
            for (const auto& rec : captured.records) {
                std::vector<double> sq(rec.input.cols(), 0.0);
                for (std::size_t r = 0; r < rec.input.rows(); ++r) {
                    const auto row = rec.input.row(r);
                    for (std::size_t c = 0; c < sq.size(); ++c) {
                        sq[c] += row[c] * row[c];
                    }
                }
                sums.push_back(std::move(sq));
            }
        });
    }
    errors.rethrow();
    std::map<std::size_t, Matrix> out;
    for (std::size_t l = 0; l < prunable.size(); ++l) {
        const std::size_t in = net.layer(prunable[l]).in_dim();
        Matrix norms(1, in);
        for (const auto& seg : per_segment) {
            for (std::size_t c = 0; c < in; ++c) {
                norms(0, c) += seg[l][c];
            }
        }
        for (double& v : norms.values()) {
            v = std::sqrt(v);
        }
        out.emplace(prunable[l], std::move(norms));
    }
    return out;
}

StepResult prune_step(const Network& base, const Network& current, importance::ImportanceState& state,
                      const PruneConfig& config, const corpus::CalibrationSet& calib, const MaskSet* previous) {
    if (const auto* s = std::get_if<double>(&config.sparsity)) {
        validate_ratio(*s);
    }
    const auto prunable = base.prunable_indices();
    if (current.prunable_indices() != prunable) {
        throw ShapeError("prune_step: base and current networks differ in structure");
    }

    // copal always ranks and masks the base weights; baselines work on
    // whichever network the init mode designates.
    const bool from_base = config.criterion == Criterion::copal || config.init_mode == InitMode::global;
    const Network& source = from_base ? base : current;

    std::map<std::size_t, Matrix> activations;
    if (config.criterion == Criterion::copal) {
        importance::SensitivityOptions opts{config.epsilon, config.seed, config.granularity};
        importance::ImportanceState delta = importance::dataset_contribution(base, calib, opts);
        if (config.normalize_per_dataset) {
            const double inv = 1.0 / static_cast<double>(calib.segments.size());
            for (auto& [idx, m] : delta.per_layer) {
                m = linalg::scale(m, inv);
            }
        }
        importance::merge(state, delta);
        importance::finish_dataset(state, calib.corpus_name, calib.segments.size());
    } else if (config.criterion == Criterion::wanda_style) {
        activations = feature_norms(source, calib);
    }

    std::vector<Mask> masks(prunable.size());
    ErrorSlot errors;
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t l = 0; l < static_cast<std::ptrdiff_t>(prunable.size()); ++l) {
        const auto li = static_cast<std::size_t>(l);
        errors.run(li, [&] {
            const std::size_t idx = prunable[li];
            const Matrix& w = source.layer(idx).weight();
            const Matrix* imp = config.criterion == Criterion::copal ? &state.per_layer.at(idx) : nullptr;
            const Matrix* act = config.criterion == Criterion::wanda_style ? &activations.at(idx) : nullptr;
            masks[li] = build_mask(criterion_scores(config.criterion, w, imp, act), config.sparsity);
        });
    }
    errors.rethrow();

    StepResult out{source, {}, {}};
    for (std::size_t l = 0; l < prunable.size(); ++l) {
        const std::size_t idx = prunable[l];
        out.pruned.set_linear_weight(idx, apply_mask(source.layer(idx).weight(), masks[l]));
        LayerStats st{idx, masks[l].zeros(), masks[l].bits.size(), std::nullopt};
        if (previous != nullptr) {
            const auto it = previous->find(idx);
            if (it != previous->end()) {
                st.hamming_vs_previous = detect_stasis(it->second, masks[l]).hamming;
            }
        }
        out.stats.push_back(st);
        out.masks.emplace(idx, std::move(masks[l]));
    }
    return out;
}

ContinualPruner::ContinualPruner(Network base, PruneConfig config)
    : base_(base), current_(std::move(base)), config_(config), state_(importance::init_state(base_)) {}

const StepResult& ContinualPruner::step(const corpus::CalibrationSet& calib) {
    const MaskSet* previous = history_.empty() ? nullptr : &history_.back().masks;
    StepResult result = prune_step(base_, current_, state_, config_, calib, previous);
    current_ = result.pruned;
    history_.push_back(std::move(result));
    return history_.back();
}

std::vector<std::uint8_t> encode_masks(const MaskSet& masks) {
    binio::Writer w;
    w.magic(kMaskMagic);
    w.u32(kMaskFileVersion);
    w.u32(static_cast<std::uint32_t>(masks.size()));
    for (const auto& [idx, m] : masks) {
        w.u32(static_cast<std::uint32_t>(idx));
        w.u32(static_cast<std::uint32_t>(m.rows));
        w.u32(static_cast<std::uint32_t>(m.cols));
        w.u8(static_cast<std::uint8_t>(m.structure));
        w.u32(static_cast<std::uint32_t>(m.pattern.n));
        w.u32(static_cast<std::uint32_t>(m.pattern.m));
        std::vector<std::uint8_t> packed((m.bits.size() + 7) / 8, 0);
        for (std::size_t i = 0; i < m.bits.size(); ++i) {
            if (m.bits[i] != 0) {
                packed[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
            }
        }
        w.bytes(packed);
    }
    return w.buffer();
}

MaskSet decode_masks(std::vector<std::uint8_t> bytes) {
    binio::Reader r(std::move(bytes));
    r.expect_magic(kMaskMagic, "mask magic");
    if (const auto v = r.u32("mask version"); v != kMaskFileVersion) {
        throw FormatError("mask file version " + std::to_string(v) + " is not supported");
    }
    MaskSet out;
    const std::uint32_t count = r.u32("mask count");
    for (std::uint32_t k = 0; k < count; ++k) {
        const std::uint32_t idx = r.u32("mask layer");
        Mask m;
        m.rows = r.u32("mask rows");
        m.cols = r.u32("mask cols");
        const std::uint8_t structure = r.u8("mask structure");
        if (structure > static_cast<std::uint8_t>(MaskStructure::nm)) {
            throw FormatError("mask structure " + std::to_string(structure) + " is unknown");
        }
        m.structure = static_cast<MaskStructure>(structure);
        m.pattern.n = r.u32("mask pattern n");
        m.pattern.m = r.u32("mask pattern m");
        m.bits.resize(m.rows * m.cols);
        std::vector<std::uint8_t> packed((m.bits.size() + 7) / 8);
        for (auto& b : packed) {
            b = r.u8("mask bits");
        }
        for (std::size_t i = 0; i < m.bits.size(); ++i) {
            m.bits[i] = (packed[i / 8] >> (i % 8)) & 1u;
        }
        out.emplace(idx, std::move(m));
    }
    r.expect_end("mask file");
    return out;
}

void save_masks(const MaskSet& masks, const std::filesystem::path& path) { binio::write_file(path, encode_masks(masks)); }

MaskSet load_masks(const std::filesystem::path& path) { return decode_masks(binio::read_file(path)); }

nlohmann::json mask_summary(const MaskSet& masks, const MaskSet* previous) {
    nlohmann::json layers = nlohmann::json::array();
    std::size_t zeros = 0;
    std::size_t total = 0;
    for (const auto& [idx, m] : masks) {
        nlohmann::json entry = {
            {"layer", idx},
            {"rows", m.rows},
            {"cols", m.cols},
            {"structure", m.structure == MaskStructure::nm ? "nm" : "unstructured"},
            {"zeros", m.zeros()},
            {"sparsity", m.sparsity()},
        };
        if (m.structure == MaskStructure::nm) {
            entry["pattern"] = std::to_string(m.pattern.n) + ":" + std::to_string(m.pattern.m);
        }
        if (previous != nullptr) {
            if (const auto it = previous->find(idx); it != previous->end()) {
                entry["hamming_vs_previous"] = detect_stasis(it->second, m).hamming;
            }
        }
        zeros += m.zeros();
        total += m.bits.size();
        layers.push_back(std::move(entry));
    }
    return {{"layers", layers},
            {"overall_sparsity", total == 0 ? 0.0 : static_cast<double>(zeros) / static_cast<double>(total)}};
}

}  // namespace copal::pruner
