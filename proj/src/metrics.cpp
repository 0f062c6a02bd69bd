// SPDX-License-Identifier: Apache-2.0

#include "copal/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <tuple>

#include "copal/error.hpp"
#include "copal/parallel.hpp"

namespace copal::metrics {

namespace {

using Key = std::tuple<std::size_t, std::size_t, std::string>;

std::map<Key, double> index_cells(const std::vector<EvalCell>& cells) {
    std::map<Key, double> out;
    for (const auto& c : cells) {
        out[{c.permutation, c.step, c.eval_dataset}] = c.perplexity;
    }
    return out;
}

std::string coordinate(std::size_t pi, std::size_t step, const std::string& eval) {
    return "pi=" + std::to_string(pi) + " step=" + std::to_string(step) + " eval=" + eval;
}

Summary summarize(const std::vector<double>& values) {
    Summary s;
    s.count = values.size();
    if (values.empty()) {
        return s;
    }
    for (const double v : values) s.mean += v;
    s.mean /= static_cast<double>(values.size());
    double var = 0.0;
    for (const double v : values) var += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(var / static_cast<double>(values.size()));
    return s;
}

std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

double window_perplexity(const model::Network& net, std::span<const model::TokenId> window) {
    const linalg::Matrix logits = model::forward(net, window);
    double nll = 0.0;
    for (std::size_t t = 0; t < logits.rows(); ++t) {
        const auto row = logits.row(t);
        const double mx = *std::max_element(row.begin(), row.end());
        double sum = 0.0;
        for (const double v : row) {
            sum += std::exp(v - mx);
        }
        nll += (mx + std::log(sum)) - row[window[t + 1]];
    }
    const double ppl = std::exp(nll / static_cast<double>(logits.rows()));
    if (!std::isfinite(ppl)) {
        throw NumericalError("perplexity: non-finite value");
    }
    return ppl;
}

double perplexity(const model::Network& net, std::span<const model::TokenId> tokens, std::size_t seq_len,
                  std::size_t max_windows) {
    if (seq_len < 2) {
        throw InputError("perplexity: window length must be at least 2");
    }
    std::size_t windows = tokens.size() / seq_len;
    if (max_windows > 0) {
        windows = std::min(windows, max_windows);
    }
    if (windows == 0) {
        throw InputError("perplexity: evaluation range of " + std::to_string(tokens.size()) +
                         " tokens holds no full window of " + std::to_string(seq_len));
    }
    std::vector<double> per_window(windows);
    ErrorSlot errors;
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t w = 0; w < static_cast<std::ptrdiff_t>(windows); ++w) {
        const auto i = static_cast<std::size_t>(w);
        errors.run(i, [&] { per_window[i] = window_perplexity(net, tokens.subspan(i * seq_len, seq_len)); });
    }
    errors.rethrow();
    double sum = 0.0;
    for (const double p : per_window) {
        sum += p;
    }
    return sum / static_cast<double>(windows);
}

double perplexity(const model::Network& net, const corpus::Corpus& corpus, std::size_t seq_len,
                  std::size_t max_windows) {
    return perplexity(net, corpus.evaluation(), seq_len, max_windows);
}

double bwt_cell(double p_after, double p_immediate) { return p_after - p_immediate; }

std::vector<std::string> missing_cells(const Permutations& perms, const std::vector<EvalCell>& cells) {
    const auto idx = index_cells(cells);
    std::vector<std::string> missing;
    for (std::size_t pi = 0; pi < perms.size(); ++pi) {
        for (std::size_t i = 0; i < perms[pi].size(); ++i) {
            for (const auto& j : perms[pi]) {
                if (!idx.contains({pi, i, j})) {
                    missing.push_back(coordinate(pi, i, j));
                }
            }
        }
    }
    return missing;
}

std::vector<BwtCell> bwt_cells(const Permutations& perms, const std::vector<EvalCell>& cells) {
    const auto idx = index_cells(cells);
    std::vector<BwtCell> out;
    for (std::size_t pi = 0; pi < perms.size(); ++pi) {
        const auto& order = perms[pi];
        for (std::size_t i = 1; i < order.size(); ++i) {
            for (std::size_t k = 0; k < i; ++k) {
                const std::string& j = order[k];
                const auto after = idx.find({pi, i, j});
                const auto immediate = idx.find({pi, k, j});
                if (after == idx.end() || immediate == idx.end()) {
                    throw CompletenessError("bwt: missing cell " +
                                            coordinate(pi, after == idx.end() ? i : k, j));
                }
                out.push_back(BwtCell{pi, i, j, k, bwt_cell(after->second, immediate->second)});
            }
        }
    }
    return out;
}

Aggregates aggregate(const Permutations& perms, const std::vector<EvalCell>& cells) {
    if (perms.empty()) {
        throw CompletenessError("aggregate: no permutations");
    }
    if (const auto missing = missing_cells(perms, cells); !missing.empty()) {
        std::string msg = "aggregate: missing cells:";
        for (const auto& m : missing) {
            msg += " [" + m + "]";
        }
        throw CompletenessError(msg);
    }
    // Fold in a canonical order so the result never depends on input order.
    std::vector<EvalCell> sorted = cells;
    std::sort(sorted.begin(), sorted.end(), [](const EvalCell& a, const EvalCell& b) {
        return std::tie(a.permutation, a.step, a.eval_dataset) < std::tie(b.permutation, b.step, b.eval_dataset);
    });
    std::set<Key> required;
    for (std::size_t pi = 0; pi < perms.size(); ++pi) {
        for (std::size_t i = 0; i < perms[pi].size(); ++i) {
            for (const auto& j : perms[pi]) required.insert({pi, i, j});
        }
    }

    Aggregates agg;
    std::map<std::string, std::vector<double>> ppl_by_dataset;
    std::map<std::string, std::vector<double>> bwt_by_dataset;
    std::vector<double> ppl;
    for (const auto& c : sorted) {
        if (!required.contains({c.permutation, c.step, c.eval_dataset})) {
            continue;
        }
        ppl.push_back(c.perplexity);
        ppl_by_dataset[c.eval_dataset].push_back(c.perplexity);
    }
    std::vector<double> bwt;
    for (const auto& b : bwt_cells(perms, sorted)) {
        bwt.push_back(b.value);
        bwt_by_dataset[b.eval_dataset].push_back(b.value);
    }
    const Summary ps = summarize(ppl);
    agg.a_ppl = ps.mean;
    agg.m_ppl = *std::max_element(ppl.begin(), ppl.end());
    agg.bwt_count = bwt.size();
    if (!bwt.empty()) {
        agg.a_bwt = summarize(bwt).mean;
        agg.m_bwt = *std::max_element(bwt.begin(), bwt.end());
    }
    for (const auto& [name, values] : ppl_by_dataset) {
        agg.per_dataset[name].ppl = summarize(values);
        agg.per_dataset[name].bwt = summarize(bwt_by_dataset[name]);
    }
    return agg;
}

bool RunReport::weight_stasis() const {
    return !stasis.empty() && std::all_of(stasis.begin(), stasis.end(), [](bool b) { return b; });
}

void finalize(RunReport& report) {
    std::sort(report.cells.begin(), report.cells.end(), [](const EvalCell& a, const EvalCell& b) {
        return std::tie(a.permutation, a.step, a.eval_dataset) < std::tie(b.permutation, b.step, b.eval_dataset);
    });
    try {
        report.aggregates = aggregate(report.permutations, report.cells);
    } catch (const CompletenessError& e) {
        report.aggregates.reset();
        report.errors.push_back(e.what());
    }
}

namespace {

nlohmann::json summary_json(const Summary& s) {
    return {{"mean", s.mean}, {"std", s.stddev}, {"count", s.count}};
}

Summary summary_from(const nlohmann::json& j) {
    return Summary{j.at("mean").get<double>(), j.at("std").get<double>(), j.at("count").get<std::size_t>()};
}

}  // namespace

nlohmann::json to_json(const RunReport& report) {
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& c : report.cells) {
        cells.push_back({{"permutation", c.permutation},
                         {"step", c.step},
                         {"eval", c.eval_dataset},
                         {"perplexity", c.perplexity}});
    }
    nlohmann::json j = {
        {"schema", "copal.run_report"},
        {"version", kReportSchemaVersion},
        {"criterion", report.criterion},
        {"init_mode", report.init_mode},
        {"sparsity", report.sparsity},
        {"n_samples", report.n_samples},
        {"datasets", report.datasets},
        {"permutations", report.permutations},
        {"stasis", report.stasis},
        {"weight_stasis", report.weight_stasis()},
        {"cells", cells},
        {"errors", report.errors},
        {"complete", report.complete()},
    };
    if (report.aggregates) {
        const auto& a = *report.aggregates;
        nlohmann::json bwt = nlohmann::json::array();
        for (const auto& b : bwt_cells(report.permutations, report.cells)) {
            bwt.push_back({{"permutation", b.permutation},
                           {"step", b.step},
                           {"eval", b.eval_dataset},
                           {"immediate_step", b.immediate_step},
                           {"bwt", b.value}});
        }
        nlohmann::json per = nlohmann::json::object();
        for (const auto& [name, d] : a.per_dataset) {
            per[name] = {{"bwt", summary_json(d.bwt)}, {"ppl", summary_json(d.ppl)}};
        }
        j["bwt_cells"] = bwt;
        j["aggregates"] = {{"a_bwt", a.a_bwt}, {"m_bwt", a.m_bwt},       {"a_ppl", a.a_ppl},
                           {"m_ppl", a.m_ppl}, {"bwt_count", a.bwt_count}, {"per_dataset", per}};
    } else {
        j["aggregates"] = nullptr;
    }
    return j;
}

RunReport report_from_json(const nlohmann::json& j) {
    if (j.value("schema", "") != "copal.run_report") {
        throw FormatError("report: unexpected schema tag");
    }
    if (j.at("version").get<int>() != kReportSchemaVersion) {
        throw FormatError("report: unsupported schema version");
    }
    RunReport r;
    r.criterion = j.at("criterion").get<std::string>();
    r.init_mode = j.at("init_mode").get<std::string>();
    r.sparsity = j.at("sparsity").get<std::string>();
    r.n_samples = j.at("n_samples").get<std::size_t>();
    r.datasets = j.at("datasets").get<std::vector<std::string>>();
    r.permutations = j.at("permutations").get<Permutations>();
    r.stasis = j.at("stasis").get<std::vector<bool>>();
    r.errors = j.at("errors").get<std::vector<std::string>>();
    for (const auto& c : j.at("cells")) {
        r.cells.push_back(EvalCell{c.at("permutation").get<std::size_t>(), c.at("step").get<std::size_t>(),
                                   c.at("eval").get<std::string>(), c.at("perplexity").get<double>()});
    }
    if (!j.at("aggregates").is_null()) {
        const auto& a = j.at("aggregates");
        Aggregates agg;
        agg.a_bwt = a.at("a_bwt").get<double>();
        agg.m_bwt = a.at("m_bwt").get<double>();
        agg.a_ppl = a.at("a_ppl").get<double>();
        agg.m_ppl = a.at("m_ppl").get<double>();
        agg.bwt_count = a.at("bwt_count").get<std::size_t>();
        for (const auto& [name, d] : a.at("per_dataset").items()) {
            agg.per_dataset[name] = DatasetSummary{summary_from(d.at("bwt")), summary_from(d.at("ppl"))};
        }
        r.aggregates = agg;
    }
    return r;
}

std::string cells_csv(const RunReport& report) {
    std::ostringstream os;
    os << "criterion,init_mode,sparsity,permutation,order,step,pruned_on,eval_dataset,perplexity\n";
    for (const auto& c : report.cells) {
        std::string order;
        std::string pruned_on = "-";
        if (c.permutation < report.permutations.size()) {
            const auto& p = report.permutations[c.permutation];
            for (std::size_t k = 0; k < p.size(); ++k) {
                order += (k ? ">" : "") + p[k];
            }
            if (c.step < p.size() && !report.dense()) {
                pruned_on = p[c.step];
            }
        }
        os << report.criterion << ',' << report.init_mode << ',' << report.sparsity << ',' << c.permutation << ','
           << order << ',' << c.step << ',' << pruned_on << ',' << c.eval_dataset << ',' << fmt17(c.perplexity)
           << '\n';
    }
    return os.str();
}

}  // namespace copal::metrics
