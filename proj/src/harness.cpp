// SPDX-License-Identifier: Apache-2.0

#include "copal/harness.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>

#include "copal/binio.hpp"
#include "copal/error.hpp"
#include "copal/rng.hpp"

namespace copal::harness {

using metrics::EvalCell;
using metrics::RunReport;

namespace {

std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
    return buf;
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        out += (i ? sep : "") + parts[i];
    }
    return out;
}

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (const char ch : line) {
        if (ch == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    out.push_back(cur);
    return out;
}

std::vector<std::string> names_of(const std::vector<corpus::Corpus>& corpora) {
    std::vector<std::string> names;
    for (const auto& c : corpora) names.push_back(c.name);
    return names;
}

std::size_t index_of(const std::vector<corpus::Corpus>& corpora, const std::string& name) {
    for (std::size_t i = 0; i < corpora.size(); ++i) {
        if (corpora[i].name == name) return i;
    }
    throw InputError("harness: unknown corpus '" + name + "'");
}

}  // namespace

void validate(const GridConfig& cfg) {
    if (cfg.criteria.empty()) {
        throw InputError("grid: at least one criterion is required");
    }
    if (cfg.sparsities.empty()) {
        throw InputError("grid: at least one sparsity is required");
    }
    if (cfg.n_samples == 0) {
        throw InputError("grid: n_samples must be at least 1");
    }
    if (cfg.seq_len < 2) {
        throw InputError("grid: seq_len must be at least 2");
    }
    if (!(cfg.epsilon > 0.0)) {
        throw InputError("grid: epsilon must be positive");
    }
}

pruner::InitMode init_mode_for(const GridConfig& cfg, pruner::Criterion criterion) {
    return criterion == pruner::Criterion::copal ? cfg.copal_init : cfg.baseline_init;
}

std::vector<corpus::CalibrationSet> calibration_sets(const std::vector<corpus::Corpus>& corpora,
                                                     std::size_t n_samples, std::size_t seq_len,
                                                     std::uint64_t seed) {
    std::vector<corpus::CalibrationSet> out;
    out.reserve(corpora.size());
    for (const auto& c : corpora) {
        out.push_back(corpus::sample_calibration(c, n_samples, seq_len, seed));
    }
    return out;
}

std::uint64_t weights_hash(const model::Network& net) {
    const auto bytes = model::encode_checkpoint(net);
    return stable_hash(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

Evaluator::Evaluator(const std::vector<corpus::Corpus>& corpora, std::size_t seq_len, std::size_t max_windows)
    : corpora_(corpora), seq_len_(seq_len), max_windows_(max_windows) {}

double Evaluator::perplexity(const model::Network& net, std::size_t corpus_index) {
    const auto key = std::make_pair(weights_hash(net), corpus_index);
    if (const auto it = cache_.find(key); it != cache_.end()) {
        ++hits_;
        return it->second;
    }
    const double p = metrics::perplexity(net, corpora_.at(corpus_index), seq_len_, max_windows_);
    cache_.emplace(key, p);
    return p;
}

RunReport run_continual(const model::Network& base, const std::vector<corpus::Corpus>& corpora,
                        const GridConfig& cfg, pruner::Criterion criterion, const pruner::SparsitySpec& sparsity,
                        Evaluator& eval) {
    validate(cfg);
    RunReport report;
    report.criterion = pruner::to_string(criterion);
    report.init_mode = pruner::to_string(init_mode_for(cfg, criterion));
    report.sparsity = pruner::describe(sparsity);
    report.n_samples = cfg.n_samples;
    report.datasets = names_of(corpora);
    report.permutations = corpus::permutations(report.datasets);
    report.stasis.assign(report.permutations.size(), false);

    std::vector<std::optional<corpus::CalibrationSet>> calib(corpora.size());
    std::vector<std::string> calib_error(corpora.size());
    for (std::size_t c = 0; c < corpora.size(); ++c) {
        try {
            calib[c] = corpus::sample_calibration(corpora[c], cfg.n_samples, cfg.seq_len, cfg.seed);
        } catch (const Error& e) {
            calib_error[c] = e.what();
        }
    }
    pruner::PruneConfig pc;
    pc.criterion = criterion;
    pc.sparsity = sparsity;
    pc.init_mode = init_mode_for(cfg, criterion);
    pc.seed = cfg.seed;
    pc.epsilon = cfg.epsilon;
    pc.granularity = cfg.granularity;

    for (std::size_t pi = 0; pi < report.permutations.size(); ++pi) {
        const auto& order = report.permutations[pi];
        std::vector<EvalCell> cells;
        try {
            pruner::ContinualPruner runner(base, pc);
            bool stasis = order.size() > 1;
            for (std::size_t i = 0; i < order.size(); ++i) {
                const std::size_t c = index_of(corpora, order[i]);
                if (!calib[c]) {
                    throw InputError(calib_error[c]);
                }
                const auto& step = runner.step(*calib[c]);
                if (i > 0 && !step.stasis()) {
                    stasis = false;
                }
                for (const auto& name : order) {
                    cells.push_back(EvalCell{pi, i, name, eval.perplexity(step.pruned, index_of(corpora, name))});
                }
            }
            report.stasis[pi] = stasis;
            report.cells.insert(report.cells.end(), cells.begin(), cells.end());
        } catch (const Error& e) {
            report.errors.push_back("criterion=" + report.criterion + " sparsity=" + report.sparsity +
                                    " pi=" + std::to_string(pi) + " order=" + join(order, ">") + ": " + e.what());
        }
    }
    metrics::finalize(report);
    return report;
}

RunReport run_dense(const model::Network& base, const std::vector<corpus::Corpus>& corpora, const GridConfig& cfg,
                    Evaluator& eval) {
    validate(cfg);
    RunReport report;
    report.criterion = "dense";
    report.init_mode = "-";
    report.sparsity = "0";
    report.n_samples = 0;
    report.datasets = names_of(corpora);
    report.permutations = corpus::permutations(report.datasets);
    report.stasis.assign(report.permutations.size(), false);
    std::vector<double> ppl;
    try {
        for (std::size_t j = 0; j < corpora.size(); ++j) {
            ppl.push_back(eval.perplexity(base, j));
        }
    } catch (const Error& e) {
        report.errors.push_back(std::string("criterion=dense: ") + e.what());
        metrics::finalize(report);
        return report;
    }
    for (std::size_t pi = 0; pi < report.permutations.size(); ++pi) {
        const auto& order = report.permutations[pi];
        for (std::size_t i = 0; i < order.size(); ++i) {
            for (const auto& name : order) {
                report.cells.push_back(EvalCell{pi, i, name, ppl[index_of(corpora, name)]});
            }
        }
    }
    metrics::finalize(report);
    return report;
}

std::vector<RunReport> run_grid(const model::Network& base, const std::vector<corpus::Corpus>& corpora,
                                const GridConfig& cfg) {
    validate(cfg);
    Evaluator eval(corpora, cfg.seq_len, cfg.max_eval_windows);
    std::vector<RunReport> out;
    if (cfg.include_dense) {
        out.push_back(run_dense(base, corpora, cfg, eval));
    }
    for (const auto& s : cfg.sparsities) {
        for (const auto c : cfg.criteria) {
            out.push_back(run_continual(base, corpora, cfg, c, s, eval));
        }
    }
    return out;
}

std::vector<SparsityPoint> run_ablation_sparsity(const model::Network& base,
                                                 const std::vector<corpus::Corpus>& corpora,
                                                 const GridConfig& cfg) {
    validate(cfg);
    Evaluator eval(corpora, cfg.seq_len, cfg.max_eval_windows);
    std::vector<SparsityPoint> out;
    for (const auto c : cfg.criteria) {
        for (const auto& s : cfg.sparsities) {
            const RunReport r = run_continual(base, corpora, cfg, c, s, eval);
            SparsityPoint p{r.criterion, r.sparsity};
            p.weight_stasis = r.weight_stasis();
            if (r.aggregates) {
                p.a_bwt = r.aggregates->a_bwt;
                p.m_bwt = r.aggregates->m_bwt;
                p.a_ppl = r.aggregates->a_ppl;
                p.m_ppl = r.aggregates->m_ppl;
                p.complete = true;
            }
            out.push_back(p);
        }
    }
    return out;
}

std::vector<SamplesPoint> run_ablation_samples(const model::Network& base,
                                               const std::vector<corpus::Corpus>& corpora, const GridConfig& cfg,
                                               const std::vector<std::size_t>& n_samples) {
    validate(cfg);
    if (n_samples.empty()) {
        throw InputError("ablate-samples: empty n_samples sweep");
    }
    Evaluator eval(corpora, cfg.seq_len, cfg.max_eval_windows);
    std::vector<SamplesPoint> out;
    for (const std::size_t n : n_samples) {
        GridConfig c = cfg;
        c.n_samples = n;
        const RunReport r = run_continual(base, corpora, c, pruner::Criterion::copal, cfg.sparsities.front(), eval);
        SamplesPoint p{n};
        if (r.aggregates) {
            p.a_bwt = r.aggregates->a_bwt;
            p.m_bwt = r.aggregates->m_bwt;
            p.complete = true;
        }
        out.push_back(p);
    }
    return out;
}

std::string sparsity_csv(const std::vector<SparsityPoint>& points) {
    std::ostringstream os;
    os << "criterion,sparsity,a_bwt,m_bwt,a_ppl,m_ppl,weight_stasis,complete\n";
    for (const auto& p : points) {
        os << p.criterion << ',' << p.sparsity << ',' << fmt17(p.a_bwt) << ',' << fmt17(p.m_bwt) << ','
           << fmt17(p.a_ppl) << ',' << fmt17(p.m_ppl) << ',' << (p.weight_stasis ? 1 : 0) << ','
           << (p.complete ? 1 : 0) << '\n';
    }
    return os.str();
}

std::string samples_csv(const std::vector<SamplesPoint>& points) {
    std::ostringstream os;
    os << "n_samples,a_bwt,m_bwt,complete\n";
    for (const auto& p : points) {
        os << p.n_samples << ',' << fmt17(p.a_bwt) << ',' << fmt17(p.m_bwt) << ',' << (p.complete ? 1 : 0) << '\n';
    }
    return os.str();
}

namespace {

struct Row {
    std::vector<std::string> cells;
};

std::vector<std::string> summary_cells(const RunReport& r, int digits) {
    auto num = [digits](double v) { return digits < 0 ? fmt17(v) : fixed(v, digits); };
    std::vector<std::string> out{r.criterion, r.init_mode, r.sparsity};
    if (!r.aggregates) {
        out.insert(out.end(), {"incomplete", "incomplete", "incomplete", "incomplete"});
        return out;
    }
    const auto& a = *r.aggregates;
    if (r.dense()) {
        out.insert(out.end(), {"-", "-"});
    } else if (r.weight_stasis()) {
        out.insert(out.end(), {"WS", "WS"});
    } else {
        out.push_back(num(a.a_bwt));
        out.push_back(num(a.m_bwt));
    }
    out.push_back(num(a.a_ppl));
    out.push_back(num(a.m_ppl));
    return out;
}

std::string render(const std::vector<std::vector<std::string>>& rows, std::size_t left_aligned) {
    std::vector<std::size_t> width;
    for (const auto& r : rows) {
        width.resize(std::max(width.size(), r.size()), 0);
        for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
    }
    std::ostringstream os;
    for (const auto& r : rows) {
        std::string line;
        for (std::size_t c = 0; c < r.size(); ++c) {
            if (c) line += " | ";
            const std::size_t pad = width[c] - r[c].size();
            line += c < left_aligned ? r[c] + std::string(pad, ' ') : std::string(pad, ' ') + r[c];
        }
        while (!line.empty() && line.back() == ' ') line.pop_back();
        os << line << '\n';
    }
    return os.str();
}

}  // namespace

std::string report_table(const std::vector<RunReport>& reports) {
    std::vector<std::vector<std::string>> rows{{"criterion", "init", "sparsity", "a-bwt", "m-bwt", "a-ppl", "m-ppl"}};
    for (const auto& r : reports) rows.push_back(summary_cells(r, 4));
    std::ostringstream os;
    os << render(rows, 3);

    for (const auto& r : reports) {
        if (!r.aggregates) continue;
        os << '\n' << r.criterion << ' ' << r.sparsity << " per dataset\n";
        std::vector<std::vector<std::string>> block{{"dataset", "bwt mean+-std", "ppl mean+-std"}};
        for (const auto& [name, d] : r.aggregates->per_dataset) {
            std::string bwt = "-";
            if (r.weight_stasis()) {
                bwt = "WS";
            } else if (!r.dense() && d.bwt.count > 0) {
                bwt = fixed(d.bwt.mean, 4) + " +- " + fixed(d.bwt.stddev, 4);
            }
            block.push_back({name, bwt, fixed(d.ppl.mean, 4) + " +- " + fixed(d.ppl.stddev, 4)});
        }
        os << render(block, 1);
    }
    std::vector<std::string> errors;
    for (const auto& r : reports) errors.insert(errors.end(), r.errors.begin(), r.errors.end());
    if (!errors.empty()) {
        os << "\nerrors\n";
        for (const auto& e : errors) os << "  " << e << '\n';
    }
    return os.str();
}

std::string report_csv(const std::vector<RunReport>& reports) {
    std::ostringstream os;
    os << "criterion,init,sparsity,a_bwt_cell,m_bwt_cell,a_bwt,m_bwt,a_ppl,m_ppl\n";
    for (const auto& r : reports) {
        if (!r.aggregates) continue;
        const auto cells = summary_cells(r, -1);
        const auto& a = *r.aggregates;
        os << cells[0] << ',' << cells[1] << ',' << cells[2] << ',' << cells[3] << ',' << cells[4] << ','
           << fmt17(a.a_bwt) << ',' << fmt17(a.m_bwt) << ',' << fmt17(a.a_ppl) << ',' << fmt17(a.m_ppl) << '\n';
    }
    return os.str();
}

std::vector<SummaryRow> parse_report_csv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line.rfind("criterion,", 0) != 0) {
        throw FormatError("summary csv: missing header");
    }
    std::vector<SummaryRow> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto f = split(line, ',');
        if (f.size() != 9) {
            throw FormatError("summary csv: expected 9 fields, got " + std::to_string(f.size()));
        }
        try {
            rows.push_back(SummaryRow{f[0], f[1], f[2], f[3], f[4], std::stod(f[5]), std::stod(f[6]),
                                      std::stod(f[7]), std::stod(f[8])});
        } catch (const std::logic_error&) {
            throw FormatError("summary csv: malformed number in '" + line + "'");
        }
    }
    return rows;
}

std::string report_stem(const RunReport& report) {
    std::string s = report.criterion + "_" + report.sparsity;
    std::replace(s.begin(), s.end(), ':', '-');
    return s;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
    binio::write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace

void write_reports(const std::vector<RunReport>& reports, const std::filesystem::path& dir) {
    nlohmann::json manifest = {{"reports", nlohmann::json::array()},
                               {"incomplete", nlohmann::json::array()},
                               {"errors", nlohmann::json::array()}};
    std::set<std::string> stems;
    for (const auto& r : reports) {
        const std::string stem = report_stem(r);
        if (!stems.insert(stem).second) {
            throw UsageError("write_reports: duplicate report " + stem);
        }
        write_text(dir / (stem + ".json"), metrics::to_json(r).dump(2) + "\n");
        write_text(dir / (stem + ".cells.csv"), metrics::cells_csv(r));
        manifest["reports"].push_back(stem);
        if (!r.complete()) manifest["incomplete"].push_back(stem);
        for (const auto& e : r.errors) manifest["errors"].push_back(e);
    }
    manifest["complete"] = manifest["incomplete"].empty();
    write_text(dir / "summary.csv", report_csv(reports));
    write_text(dir / "table.txt", report_table(reports));
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

std::vector<RunReport> read_reports(const std::filesystem::path& dir) {
    const auto bytes = binio::read_file(dir / "manifest.json");
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("manifest.json: ") + e.what());
    }
    std::vector<RunReport> out;
    for (const auto& stem : manifest.at("reports")) {
        const auto rb = binio::read_file(dir / (stem.get<std::string>() + ".json"));
        try {
            out.push_back(metrics::report_from_json(nlohmann::json::parse(rb.begin(), rb.end())));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(stem.get<std::string>() + ".json: " + e.what());
        }
    }
    return out;
}

}  // namespace copal::harness
