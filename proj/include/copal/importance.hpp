// SPDX-License-Identifier: Apache-2.0
//
// Continual weight-importance accumulator.
//
// For every prunable layer the state holds W*, the running sum over all
// calibration samples of all datasets seen so far of |W (.) grad|, where
// grad is the closed-form sensitivity-loss gradient. Only this state is
// carried from one dataset to the next; past calibration data is never
// revisited.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "copal/corpus.hpp"
#include "copal/linalg.hpp"
#include "copal/model.hpp"
#include "copal/sensitivity.hpp"

namespace copal::importance {

using linalg::Matrix;

struct ImportanceState {
    std::map<std::size_t, Matrix> per_layer;  // layer index -> W*
    std::vector<std::string> datasets_seen;
    std::map<std::string, std::size_t> sample_count;

    bool operator==(const ImportanceState&) const = default;
};

ImportanceState init_state(const model::Network& net);

/// W* += |weight (.) grad| for one layer. `weight` is the unmasked base weight.
ImportanceState& accumulate(ImportanceState& state, std::size_t layer_index, const Matrix& weight, const Matrix& grad);

/// Records that `corpus_name` (with n_samples samples) has been folded in.
/// Throws UsageError if it repeats the most recent dataset.
ImportanceState& finish_dataset(ImportanceState& state, const std::string& corpus_name, std::size_t n_samples);

/// Adds another state's W* into `state` (same layer set). Used to combine
/// partial sums computed over disjoint sample subsets.
ImportanceState& merge(ImportanceState& state, const ImportanceState& partial);

/// Throws ShapeError unless the state's layers match the network's
/// prunable layers exactly.
void validate_against(const ImportanceState& state, const model::Network& net);

enum class Granularity : std::uint8_t {
    segment_mean,  // one sample per segment: x is the mean input over positions
    per_token,     // one sample per position
};

struct SensitivityOptions {
    double epsilon = sensitivity::kDefaultEpsilon;
    std::uint64_t seed = 0;
    Granularity granularity = Granularity::segment_mean;
};

/// Seed of the perturbation for (dataset, layer, sample). Independent of
/// dataset order, so contributions commute across permutations.
std::uint64_t perturbation_seed(std::uint64_t seed, const std::string& corpus_name, std::size_t layer_index,
                                std::size_t sample_index);

/// This dataset's own W* contribution, computed on the base network.
/// Segments are processed in parallel and reduced in segment order.
ImportanceState dataset_contribution(const model::Network& base, const corpus::CalibrationSet& calib,
                                     const SensitivityOptions& options);

/// Same sum as dataset_contribution, restricted to segments [begin, end).
ImportanceState partial_contribution(const model::Network& base, const corpus::CalibrationSet& calib,
                                     const SensitivityOptions& options, std::size_t begin, std::size_t end);

inline constexpr std::uint32_t kStateVersion = 1;

std::vector<std::uint8_t> encode_state(const ImportanceState& state);
ImportanceState decode_state(std::vector<std::uint8_t> bytes);
void save_state(const ImportanceState& state, const std::filesystem::path& path);
ImportanceState load_state(const std::filesystem::path& path);
/// Loads and validates against `net`.
ImportanceState load_state(const std::filesystem::path& path, const model::Network& net);

}  // namespace copal::importance
