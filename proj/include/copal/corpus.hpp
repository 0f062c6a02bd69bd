// SPDX-License-Identifier: Apache-2.0
//
// Token corpora, calibration sampling and dataset-order permutations.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "copal/model.hpp"

namespace copal::corpus {

using model::TokenId;

inline constexpr double kDefaultEvalFraction = 0.2;

/// A token stream split into a calibration prefix and an evaluation suffix.
struct Corpus {
    std::string name;
    std::vector<TokenId> tokens;
    std::size_t calibration_end = 0;  // tokens[calibration_end..] is the eval split

    std::span<const TokenId> calibration() const { return std::span(tokens).first(calibration_end); }
    std::span<const TokenId> evaluation() const { return std::span(tokens).subspan(calibration_end); }

    bool operator==(const Corpus&) const = default;
};

/// Builds a corpus holding back floor(size * eval_fraction) trailing tokens.
Corpus make_corpus(std::string name, std::vector<TokenId> tokens, double eval_fraction = kDefaultEvalFraction,
                   std::size_t vocab_size = 256);

/// Raw byte files map byte b to token b. Files ending in ".tok" hold
/// little-endian 16-bit token ids.
Corpus load_corpus(const std::filesystem::path& path, std::string name, double eval_fraction = kDefaultEvalFraction,
                   std::size_t vocab_size = 256);

struct CalibrationSet {
    std::string corpus_name;
    std::size_t seq_len = 0;
    std::uint64_t seed = 0;
    std::vector<std::size_t> offsets;  // into the calibration range
    std::vector<std::vector<TokenId>> segments;
};

/// Draws n_samples windows of seq_len tokens (overlap allowed) from the
/// calibration range only.
CalibrationSet sample_calibration(const Corpus& c, std::size_t n_samples, std::size_t seq_len, std::uint64_t seed);

/// Every ordering of `names`, lexicographically sorted. 1 <= |names| <= 5.
std::vector<std::vector<std::string>> permutations(std::vector<std::string> names);

/// Procedural text sources with deliberately different byte statistics.
std::string generate_prose(std::size_t bytes, std::uint64_t seed);
std::string generate_structured(std::size_t bytes, std::uint64_t seed);
std::string generate_tabular(std::size_t bytes, std::uint64_t seed);

struct GeneratedCorpus {
    std::string name;
    std::filesystem::path path;
};

/// Writes prose.txt, structured.txt and tabular.txt into dir.
std::vector<GeneratedCorpus> write_synthetic_corpora(const std::filesystem::path& dir, std::size_t bytes_each,
                                                     std::uint64_t seed);

}  // namespace copal::corpus
