// SPDX-License-Identifier: Apache-2.0
//
// Pruning criteria, exact-sparsity mask construction (unstructured and
// N:M), mask application, weight-stasis detection and the per-dataset
// pruning step in sequential or global initialization.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "copal/corpus.hpp"
#include "copal/importance.hpp"
#include "copal/linalg.hpp"
#include "copal/model.hpp"

namespace copal::pruner {

using linalg::Matrix;
using model::Network;

enum class Criterion : std::uint8_t { copal, magnitude, wanda_style };
enum class InitMode : std::uint8_t { sequential, global };
enum class MaskStructure : std::uint8_t { unstructured, nm };

const char* to_string(Criterion c);
const char* to_string(InitMode m);
Criterion criterion_from_string(std::string_view s);
InitMode init_mode_from_string(std::string_view s);

struct NmPattern {
    std::size_t n = 2;
    std::size_t m = 4;

    bool operator==(const NmPattern&) const = default;
};

/// Either an unstructured ratio in [0, 1) or an N:M pattern.
using SparsitySpec = std::variant<double, NmPattern>;

std::string describe(const SparsitySpec& spec);
/// Parses "0.5", "2:4" or "4:8".
SparsitySpec parse_sparsity(std::string_view text);

struct PruneConfig {
    Criterion criterion = Criterion::copal;
    SparsitySpec sparsity = 0.5;
    InitMode init_mode = InitMode::sequential;
    std::uint64_t seed = 0;
    double epsilon = sensitivity::kDefaultEpsilon;
    importance::Granularity granularity = importance::Granularity::segment_mean;
    /// Divide each dataset's importance contribution by its sample count.
    bool normalize_per_dataset = false;
};

/// Binary keep-mask congruent to a weight matrix (1 = keep).
struct Mask {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint8_t> bits;
    MaskStructure structure = MaskStructure::unstructured;
    NmPattern pattern{};  // meaningful only for MaskStructure::nm

    static Mask ones(std::size_t rows, std::size_t cols);

    bool keep(std::size_t r, std::size_t c) const { return bits[r * cols + c] != 0; }
    std::size_t zeros() const;
    double sparsity() const;

    bool operator==(const Mask&) const = default;
};

/// Number of entries removed for ratio s over n entries: floor(s * n).
std::size_t prune_count(double s, std::size_t n);

/// Scores for one layer. copal needs `importance` (the layer's W*);
/// wanda_style needs `activations` (positions x in_dim), whose column L2
/// norms scale |W| column-wise. Throws UsageError when an input is missing.
Matrix criterion_scores(Criterion criterion, const Matrix& weight, const Matrix* importance = nullptr,
                        const Matrix* activations = nullptr);

/// Smallest retained score under rank selection: exactly prune_count(s, N)
/// entries are removed, and all of them score <= the returned value.
double threshold_for_sparsity(const Matrix& scores, double s);

/// Sorted-ascending scores at the 1-based index ceil((1 - s) * N).
/// Cross-check only: with strict-less masking it under-prunes (N = 4,
/// s = 0.5 removes a single entry).
double percentile_threshold(const Matrix& scores, double s);

/// Zeros exactly the prune_count(s, N) lowest scores (ties: lower flat index).
Mask build_mask_unstructured(const Matrix& scores, double s);

/// Keeps the n highest scores in each run of m consecutive inputs of a row
/// (ties: lower index). A trailing group of length L < m keeps ceil(n L / m).
Mask build_mask_nm(const Matrix& scores, std::size_t n, std::size_t m);

Mask build_mask(const Matrix& scores, const SparsitySpec& spec);

Matrix apply_mask(const Matrix& weight, const Mask& mask);

struct StasisCheck {
    bool is_stasis = false;
    std::size_t hamming = 0;
};

StasisCheck detect_stasis(const Mask& previous, const Mask& next);

using MaskSet = std::map<std::size_t, Mask>;  // layer index -> mask

struct LayerStats {
    std::size_t layer_index = 0;
    std::size_t zeros = 0;
    std::size_t total = 0;
    std::optional<std::size_t> hamming_vs_previous;
};

struct StepResult {
    Network pruned;
    MaskSet masks;
    std::vector<LayerStats> stats;

    /// True when a previous step exists and no layer's mask changed.
    bool stasis() const;
};

/// Column L2 norms (1 x in_dim) of every prunable layer's input over all
/// calibration segments, evaluated on `net`.
std::map<std::size_t, Matrix> feature_norms(const Network& net, const corpus::CalibrationSet& calib);

/// One pruning step on one calibration set.
///
/// copal folds the dataset into `state` (computed on `base`) and masks the
/// base weights. Baselines score `current` under sequential init or `base`
/// under global init, and mask that same source.
StepResult prune_step(const Network& base, const Network& current, importance::ImportanceState& state,
                      const PruneConfig& config, const corpus::CalibrationSet& calib,
                      const MaskSet* previous = nullptr);

/// Holds base weights, the evolving pruned network, the importance state
/// and the previous masks across a sequence of datasets.
class ContinualPruner {
public:
    ContinualPruner(Network base, PruneConfig config);

    const StepResult& step(const corpus::CalibrationSet& calib);

    const Network& base() const noexcept { return base_; }
    const Network& current() const noexcept { return current_; }
    const importance::ImportanceState& state() const noexcept { return state_; }
    const PruneConfig& config() const noexcept { return config_; }
    const std::vector<StepResult>& history() const noexcept { return history_; }

private:
    Network base_;
    Network current_;
    PruneConfig config_;
    importance::ImportanceState state_;
    std::vector<StepResult> history_;
};

inline constexpr std::uint32_t kMaskFileVersion = 1;

/// "COPALMSK" u32 version u32 count, then per mask: u32 layer, u32 rows,
/// u32 cols, u8 structure, u32 n, u32 m, ceil(rows*cols/8) bytes of bits
/// packed LSB-first in row-major order.
std::vector<std::uint8_t> encode_masks(const MaskSet& masks);
MaskSet decode_masks(std::vector<std::uint8_t> bytes);
void save_masks(const MaskSet& masks, const std::filesystem::path& path);
MaskSet load_masks(const std::filesystem::path& path);

/// Per-layer sparsity, structure and hamming distance to `previous`.
nlohmann::json mask_summary(const MaskSet& masks, const MaskSet* previous = nullptr);

}  // namespace copal::pruner
