// SPDX-License-Identifier: Apache-2.0
//
// Continual-pruning experiment grid: every permutation of the corpora,
// prune on each dataset in turn, evaluate on all of them after each step.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "copal/corpus.hpp"
#include "copal/metrics.hpp"
#include "copal/model.hpp"
#include "copal/pruner.hpp"

namespace copal::harness {

struct GridConfig {
    std::vector<pruner::Criterion> criteria{pruner::Criterion::copal, pruner::Criterion::magnitude,
                                            pruner::Criterion::wanda_style};
    std::vector<pruner::SparsitySpec> sparsities{0.5};
    std::size_t n_samples = 16;
    std::size_t seq_len = 128;
    std::uint64_t seed = 0;
    double epsilon = sensitivity::kDefaultEpsilon;
    importance::Granularity granularity = importance::Granularity::segment_mean;
    pruner::InitMode copal_init = pruner::InitMode::sequential;
    pruner::InitMode baseline_init = pruner::InitMode::global;
    /// 0 evaluates every full window of each eval split.
    std::size_t max_eval_windows = 0;
    bool include_dense = true;
};

void validate(const GridConfig& cfg);

/// Init mode used for `criterion` under `cfg`.
pruner::InitMode init_mode_for(const GridConfig& cfg, pruner::Criterion criterion);

/// One calibration set per corpus, shared by every permutation.
std::vector<corpus::CalibrationSet> calibration_sets(const std::vector<corpus::Corpus>& corpora,
                                                     std::size_t n_samples, std::size_t seq_len,
                                                     std::uint64_t seed);

/// Evaluation with memoization on (weights, dataset). Results are identical
/// to calling metrics::perplexity directly.
class Evaluator {
public:
    Evaluator(const std::vector<corpus::Corpus>& corpora, std::size_t seq_len, std::size_t max_windows);

    double perplexity(const model::Network& net, std::size_t corpus_index);
    std::size_t cache_hits() const noexcept { return hits_; }

private:
    const std::vector<corpus::Corpus>& corpora_;
    std::size_t seq_len_;
    std::size_t max_windows_;
    std::map<std::pair<std::uint64_t, std::size_t>, double> cache_;
    std::size_t hits_ = 0;
};

/// Weight fingerprint used as the evaluation cache key.
std::uint64_t weights_hash(const model::Network& net);

/// All permutations for one (criterion, sparsity). A failing permutation
/// contributes an error entry and no cells; the rest proceed.
metrics::RunReport run_continual(const model::Network& base, const std::vector<corpus::Corpus>& corpora,
                                 const GridConfig& cfg, pruner::Criterion criterion,
                                 const pruner::SparsitySpec& sparsity, Evaluator& eval);

/// Unpruned reference: P[pi][i][j] = dense perplexity on j for every i.
metrics::RunReport run_dense(const model::Network& base, const std::vector<corpus::Corpus>& corpora,
                             const GridConfig& cfg, Evaluator& eval);

/// Dense row (if enabled) followed by every (criterion, sparsity).
std::vector<metrics::RunReport> run_grid(const model::Network& base, const std::vector<corpus::Corpus>& corpora,
                                         const GridConfig& cfg);

struct SparsityPoint {
    std::string criterion;
    std::string sparsity;
    double a_bwt = 0.0;
    double m_bwt = 0.0;
    double a_ppl = 0.0;
    double m_ppl = 0.0;
    bool weight_stasis = false;
    bool complete = false;
};

std::vector<SparsityPoint> run_ablation_sparsity(const model::Network& base,
                                                 const std::vector<corpus::Corpus>& corpora,
                                                 const GridConfig& cfg);

struct SamplesPoint {
    std::size_t n_samples = 0;
    double a_bwt = 0.0;
    double m_bwt = 0.0;
    bool complete = false;
};

/// COPAL at cfg.sparsities.front() (0.5 by default) for each sample count.
std::vector<SamplesPoint> run_ablation_samples(const model::Network& base,
                                               const std::vector<corpus::Corpus>& corpora, const GridConfig& cfg,
                                               const std::vector<std::size_t>& n_samples);

std::string sparsity_csv(const std::vector<SparsityPoint>& points);
std::string samples_csv(const std::vector<SamplesPoint>& points);

/// Aligned text table: criterion | init | sparsity | a-bwt | m-bwt | a-ppl |
/// m-ppl, then per-dataset mean +- std blocks.
std::string report_table(const std::vector<metrics::RunReport>& reports);

/// Summary CSV with the same columns; BWT cells hold "-" for dense rows and
/// "WS" under stasis, with the numeric values in trailing columns.
std::string report_csv(const std::vector<metrics::RunReport>& reports);

struct SummaryRow {
    std::string criterion;
    std::string init_mode;
    std::string sparsity;
    std::string a_bwt_cell;
    std::string m_bwt_cell;
    double a_bwt = 0.0;
    double m_bwt = 0.0;
    double a_ppl = 0.0;
    double m_ppl = 0.0;
};

std::vector<SummaryRow> parse_report_csv(const std::string& text);

/// File name stem for one report, e.g. "copal_0.5" or "magnitude_2-4".
std::string report_stem(const metrics::RunReport& report);

/// Writes <stem>.json and <stem>.cells.csv per report, plus summary.csv,
/// table.txt and manifest.json (listing errors and incomplete reports).
void write_reports(const std::vector<metrics::RunReport>& reports, const std::filesystem::path& dir);

std::vector<metrics::RunReport> read_reports(const std::filesystem::path& dir);

}  // namespace copal::harness
