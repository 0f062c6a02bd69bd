// SPDX-License-Identifier: Apache-2.0
//
// Perplexity, backward transfer and permutation-level aggregates.
//
// A grid run over permutations pi of D datasets produces one perplexity
// cell P[pi][i][j] per (permutation, prune step i, evaluated dataset j).
// BWT[pi][i][j] = P[pi][i][j] - P[pi][k][j] where k < i is the step at
// which dataset j itself was pruned on. Positive BWT means forgetting.

#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "copal/corpus.hpp"
#include "copal/model.hpp"

namespace copal::metrics {

struct EvalCell {
    std::size_t permutation = 0;
    std::size_t step = 0;
    std::string eval_dataset;
    double perplexity = 0.0;

    bool operator==(const EvalCell&) const = default;
};

struct BwtCell {
    std::size_t permutation = 0;
    std::size_t step = 0;
    std::string eval_dataset;
    std::size_t immediate_step = 0;  // where eval_dataset was pruned on
    double value = 0.0;
};

struct Summary {
    double mean = 0.0;
    double stddev = 0.0;  // population standard deviation
    std::size_t count = 0;
};

struct DatasetSummary {
    Summary bwt;
    Summary ppl;
};

struct Aggregates {
    double a_bwt = 0.0;
    double m_bwt = 0.0;
    double a_ppl = 0.0;
    double m_ppl = 0.0;
    std::size_t bwt_count = 0;
    std::map<std::string, DatasetSummary> per_dataset;
};

using Permutations = std::vector<std::vector<std::string>>;

/// Mean over non-overlapping seq_len windows of the eval split of
/// exp(mean next-token negative log-likelihood); a trailing partial window
/// is dropped. max_windows > 0 keeps only the first max_windows windows.
double perplexity(const model::Network& net, const corpus::Corpus& corpus, std::size_t seq_len,
                  std::size_t max_windows = 0);

/// Same, over an explicit token range.
double perplexity(const model::Network& net, std::span<const model::TokenId> tokens, std::size_t seq_len,
                  std::size_t max_windows = 0);

/// exp(mean NLL) of one window.
double window_perplexity(const model::Network& net, std::span<const model::TokenId> window);

double bwt_cell(double p_after, double p_immediate);

/// BWT entries for every (pi, i, j) with j pruned on strictly before step i.
/// Throws CompletenessError if a required cell is missing.
std::vector<BwtCell> bwt_cells(const Permutations& perms, const std::vector<EvalCell>& cells);

/// Throws CompletenessError listing every absent (pi, i, j) coordinate.
Aggregates aggregate(const Permutations& perms, const std::vector<EvalCell>& cells);

/// Coordinates of the grid that have no cell, as "pi=0 step=1 eval=x".
std::vector<std::string> missing_cells(const Permutations& perms, const std::vector<EvalCell>& cells);

inline constexpr int kReportSchemaVersion = 1;

struct RunReport {
    std::string criterion;  // "dense" for the unpruned reference
    std::string init_mode;
    std::string sparsity;
    std::size_t n_samples = 0;
    std::vector<std::string> datasets;
    Permutations permutations;
    std::vector<EvalCell> cells;
    /// Per permutation: every step transition left every mask unchanged.
    std::vector<bool> stasis;
    std::vector<std::string> errors;
    std::optional<Aggregates> aggregates;

    bool dense() const { return criterion == "dense"; }
    bool complete() const { return aggregates.has_value(); }
    /// True when every permutation is in weight stasis.
    bool weight_stasis() const;
};

/// Sorts cells by coordinates and fills aggregates, or records the missing
/// coordinates in `errors` and leaves aggregates empty.
void finalize(RunReport& report);

nlohmann::json to_json(const RunReport& report);
RunReport report_from_json(const nlohmann::json& j);

/// One row per cell: permutation,order,step,pruned_on,eval_dataset,perplexity
std::string cells_csv(const RunReport& report);

}  // namespace copal::metrics
