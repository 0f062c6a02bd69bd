// Acceptance suite: one PASS/FAIL line per criterion. Tolerances are fixed
// here and are not configurable.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "copal/binio.hpp"
#include "copal/corpus.hpp"
#include "copal/error.hpp"
#include "copal/harness.hpp"
#include "copal/importance.hpp"
#include "copal/linalg.hpp"
#include "copal/metrics.hpp"
#include "copal/model.hpp"
#include "copal/pruner.hpp"
#include "copal/rng.hpp"
#include "copal/sensitivity.hpp"
#include "copal/trainer.hpp"

namespace fs = std::filesystem;
using namespace copal;
using linalg::Matrix;

namespace {

constexpr double kPenroseTol = 1e-6;
constexpr double kPenroseBudget = 5.0;
constexpr double kGradTol = 1e-4;
constexpr double kGradBudget = 10.0;
constexpr double kLinearTol = 1e-12;
constexpr double kStasisBudget = 60.0;
constexpr double kBwtRatio = 0.25;
constexpr double kGridBudget = 600.0;
constexpr double kSampleSpread = 2.0;
constexpr double kGapSpread = 3.0;
constexpr double kCommuteTol = 1e-12;
constexpr double kAggregateTol = 1e-12;
constexpr std::uint64_t kSeed = 20240;

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string num(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*g", digits, v);
    return buf;
}

// Naive products so the checks do not lean on the library's own GEMM.
Matrix mul(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
            out(i, j) = acc;
        }
    return out;
}

Matrix tr(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

double rel(const Matrix& a, const Matrix& b) {
    double n = 0.0, d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double e = a.values()[i] - b.values()[i];
        n += e * e;
        d += b.values()[i] * b.values()[i];
    }
    return std::sqrt(n) / std::max(std::sqrt(d), 1e-300);
}

Matrix gaussian(std::size_t r, std::size_t c, Rng& rng) {
    Matrix m(r, c);
    for (double& v : m.values()) v = rng.normal();
    return m;
}

// ---------------------------------------------------------------- desk setup

struct Desk {
    fs::path work;
    fs::path model_path;
    std::vector<fs::path> corpus_paths;
    std::vector<corpus::Corpus> corpora;
    model::Network base;
};

Desk make_desk(const fs::path& work, const fs::path& model_path) {
    std::vector<fs::path> paths;
    for (const auto& g : corpus::write_synthetic_corpora(work / "corpora", 200000, 0)) paths.push_back(g.path);
    std::vector<corpus::Corpus> corpora;
    for (const auto& p : paths) corpora.push_back(corpus::load_corpus(p, p.stem().string()));
    fs::path mp = model_path;
    if (mp.empty()) {
        mp = work / "desk_model.ckpt";
        if (!fs::exists(mp)) {
            std::fprintf(stderr, "training desk model (%zu steps)\n", trainer::TrainConfig{}.steps);
            const auto r = trainer::train(model::make_network(model::ModelShape{}, 0), corpora, trainer::TrainConfig{});
            model::save_checkpoint(r.net, mp);
        }
    }
    return Desk{work, mp, paths, corpora, model::load_checkpoint(mp)};
}

harness::GridConfig desk_grid() {
    harness::GridConfig cfg;
    cfg.seed = kSeed;
    cfg.sparsities = {0.5};
    cfg.n_samples = 16;
    cfg.seq_len = 128;
    return cfg;
}

// ---------------------------------------------------------------- criteria

Outcome penrose() {
    const auto t0 = Clock::now();
    Rng rng(kSeed);
    const std::size_t shapes[4][2] = {{3, 2}, {2, 3}, {8, 8}, {16, 4}};
    double worst = 0.0;
    for (int i = 0; i < 50; ++i) {
        const auto* s = shapes[i % 4];
        const Matrix a = gaussian(s[0], s[1], rng);
        const Matrix p = linalg::pseudoinverse(a);
        const Matrix ap = mul(a, p), pa = mul(p, a);
        worst = std::max({worst, rel(mul(ap, a), a), rel(mul(pa, p), p), rel(tr(ap), ap), rel(tr(pa), pa)});
    }
    const double t = seconds_since(t0);
    return {worst < kPenroseTol && t < kPenroseBudget,
            "50 matrices, worst rel err " + num(worst) + " (< " + num(kPenroseTol) + "), " + num(t, 3) + "s"};
}

double surrogate_loss(const Matrix& s_x, const Matrix& dw, const Matrix& dfdw) {
    const Matrix u = linalg::add(s_x, mul(dw, dfdw));
    double l = 0.0;
    for (const double v : u.values()) l += v * v;
    return l;
}

Outcome gradient() {
    const auto t0 = Clock::now();
    Rng rng(kSeed + 1);
    const std::optional<model::Activation> kinds[3] = {std::nullopt, model::Activation::relu,
                                                        model::Activation::tanh};
    double worst = 0.0;
    int instances = 0;
    for (const auto& act : kinds) {
        for (int i = 0; i < 20; ++i) {
            const std::size_t out = 3 + rng.index(4);
            const Matrix w = gaussian(out, out + rng.index(3), rng);
            const Matrix x = gaussian(w.cols(), 1 + rng.index(3), rng);
            const sensitivity::WeightedMap f{w, act};
            const auto p = sensitivity::make_perturbation(w, x, sensitivity::kDefaultEpsilon, kSeed + i);
            const auto rec = sensitivity::record(f, x, f.apply(x), p);
            Matrix fd(w.rows(), w.cols());
            const double h = 1e-6 * linalg::rms(p.delta_w);
            for (std::size_t r = 0; r < w.rows(); ++r)
                for (std::size_t c = 0; c < w.cols(); ++c) {
                    Matrix a = p.delta_w, b = p.delta_w;
                    a(r, c) += h;
                    b(r, c) -= h;
                    fd(r, c) = (surrogate_loss(rec.s_x, a, rec.dfdw) - surrogate_loss(rec.s_x, b, rec.dfdw)) / (2 * h);
                }
            worst = std::max(worst, rel(rec.grad, fd));
            ++instances;
        }
    }
    const double t = seconds_since(t0);
    return {worst < kGradTol && t < kGradBudget, std::to_string(instances) + " instances (linear, relu, tanh), worst rel err " +
                                                     num(worst) + " (< " + num(kGradTol) + "), " + num(t, 3) + "s"};
}

Outcome linearity() {
    Rng rng(kSeed + 2);
    double worst_sw = 0.0, worst_dfdw = 0.0;
    for (int i = 0; i < 20; ++i) {
        const Matrix w = gaussian(4 + rng.index(8), 2 + rng.index(8), rng);
        const Matrix x = gaussian(w.cols(), 1 + rng.index(4), rng);
        const sensitivity::WeightedMap f{w, std::nullopt};
        const auto p = sensitivity::make_perturbation(w, x, sensitivity::kDefaultEpsilon, kSeed + i);
        const auto rec = sensitivity::record(f, x, f.apply(x), p);
        worst_sw = std::max(worst_sw, linalg::max_abs_diff(rec.s_w, mul(p.delta_w, x)));
        worst_dfdw = std::max(worst_dfdw, linalg::max_abs_diff(rec.dfdw, x));
    }
    return {worst_sw < kLinearTol && worst_dfdw < kLinearTol,
            "max |S_W - dW x| " + num(worst_sw) + ", max |dfdw - x| " + num(worst_dfdw)};
}

Outcome exact_sparsity() {
    Rng rng(kSeed + 3);
    int checked = 0, bad = 0;
    for (const double s : {0.1, 0.3, 0.5, 0.7, 0.9}) {
        for (int i = 0; i < 100; ++i) {
            const std::size_t r = 1 + rng.index(32), c = 1 + rng.index(32);
            Matrix sc(r, c);
            const int mode = i % 4;  // 0: all ties, 1: few levels, 2-3: continuous
            for (double& v : sc.values()) v = mode == 0 ? 0.25 : mode == 1 ? double(rng.index(3)) : rng.uniform();
            const auto m = pruner::build_mask_unstructured(sc, s);
            const auto expect = static_cast<std::size_t>(std::floor(s * static_cast<double>(sc.size()) + 1e-9));
            bad += m.zeros() != expect ? 1 : 0;
            ++checked;
        }
    }
    return {bad == 0, std::to_string(checked) + " masks, " + std::to_string(bad) + " with zeros != floor(s N)"};
}

Outcome nm_validity() {
    Rng rng(kSeed + 4);
    int bad_groups = 0, groups = 0, bad_overall = 0;
    for (const auto [n, m] : {std::pair<std::size_t, std::size_t>{2, 4}, {4, 8}}) {
        for (int i = 0; i < 100; ++i) {
            const std::size_t rows = 1 + rng.index(16);
            const std::size_t cols = m * (1 + rng.index(16)) + (i % 4 == 3 ? 1 + rng.index(m - 1) : 0);
            const Matrix sc = gaussian(rows, cols, rng);
            const auto mask = pruner::build_mask_nm(sc, n, m);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t g = 0; g + m <= cols; g += m) {
                    std::size_t kept = 0;
                    for (std::size_t c = g; c < g + m; ++c) kept += mask.keep(r, c) ? 1 : 0;
                    bad_groups += kept != n ? 1 : 0;
                    ++groups;
                }
            if (n == 2 && cols % m == 0 && mask.zeros() * 2 != mask.bits.size()) ++bad_overall;
        }
    }
    return {bad_groups == 0 && bad_overall == 0, std::to_string(groups) + " complete groups over 200 layers, " +
                                                     std::to_string(bad_groups) + " wrong; " +
                                                     std::to_string(bad_overall) + " divisible 2:4 layers off 50%"};
}

Outcome stasis(const Desk& d) {
    const auto t0 = Clock::now();
    const auto a = corpus::sample_calibration(d.corpora[0], 16, 128, kSeed);
    const auto b = corpus::sample_calibration(d.corpora[1], 16, 128, kSeed);
    std::string detail;
    bool ok = true;
    for (const auto crit : {pruner::Criterion::magnitude, pruner::Criterion::wanda_style}) {
        pruner::ContinualPruner p(d.base, {crit, 0.5, pruner::InitMode::sequential, kSeed});
        p.step(a);
        const auto& r = p.step(b);
        std::size_t h = 0;
        for (const auto& st : r.stats) h += *st.hamming_vs_previous;
        ok = ok && r.stasis() && h == 0;
        detail += std::string(pruner::to_string(crit)) + " hamming " + std::to_string(h) + (r.stasis() ? " (WS)" : "") + "; ";
    }
    pruner::ContinualPruner c(d.base, {pruner::Criterion::copal, 0.5, pruner::InitMode::sequential, kSeed});
    c.step(a);
    const auto& r = c.step(b);
    std::size_t moved_layers = 0, h = 0;
    for (const auto& st : r.stats) {
        moved_layers += *st.hamming_vs_previous > 0 ? 1 : 0;
        h += *st.hamming_vs_previous;
    }
    ok = ok && moved_layers > 0;
    const double t = seconds_since(t0);
    detail += "copal hamming " + std::to_string(h) + " on " + std::to_string(moved_layers) + " layers, " + num(t, 3) + "s";
    return {ok && t < kStasisBudget, detail};
}

struct GridResult {
    std::vector<metrics::RunReport> reports;
    double seconds = 0.0;
};

const metrics::RunReport* find(const std::vector<metrics::RunReport>& rs, const std::string& crit) {
    for (const auto& r : rs)
        if (r.criterion == crit) return &r;
    return nullptr;
}

Outcome bwt_ordering(const GridResult& g) {
    const auto* copal = find(g.reports, "copal");
    const auto* mag = find(g.reports, "magnitude");
    const auto* wanda = find(g.reports, "wanda_style");
    if (!copal || !mag || !wanda || !copal->complete() || !mag->complete() || !wanda->complete()) {
        return {false, "grid incomplete"};
    }
    const double c = copal->aggregates->a_bwt;
    const double m = mag->aggregates->a_bwt;
    const double w = wanda->aggregates->a_bwt;
    const double best = std::min(m, w);
    const bool lower = c < m && c < w;
    const bool ratio = c <= kBwtRatio * best;
    return {lower && ratio && g.seconds < kGridBudget,
            "A-BWT copal " + num(c) + ", magnitude " + num(m) + (mag->weight_stasis() ? " (WS)" : "") +
                ", wanda_style " + num(w) + "; lower than both: " + (lower ? "yes" : "no") + "; <= " + num(kBwtRatio) +
                " x best (" + num(best) + "): " + (ratio ? "yes" : "no") + "; grid " + num(g.seconds, 3) + "s"};
}

Outcome dense_sanity(const GridResult& g) {
    const auto* dense = find(g.reports, "dense");
    if (!dense || !dense->complete()) return {false, "dense row missing"};
    bool zero = true;
    for (const auto& b : metrics::bwt_cells(dense->permutations, dense->cells)) zero = zero && b.value == 0.0;
    bool lowest = true;
    std::string worst;
    for (const auto& r : g.reports) {
        if (!r.complete()) return {false, r.criterion + " incomplete"};
        if (&r != dense && !(dense->aggregates->a_ppl < r.aggregates->a_ppl)) {
            lowest = false;
            worst = r.criterion;
        }
    }
    return {zero && lowest, std::string("dense BWT cells all 0: ") + (zero ? "yes" : "no") + "; dense A-PPL " +
                                num(dense->aggregates->a_ppl) + " lowest: " + (lowest ? "yes" : "no (" + worst + ")")};
}

Outcome sample_trend(const Desk& d) {
    auto cfg = desk_grid();
    const std::vector<std::size_t> sweep{16, 32, 64};
    const auto pts = harness::run_ablation_samples(d.base, d.corpora, cfg, sweep);
    std::vector<double> a, gap;
    std::string detail;
    for (const auto& p : pts) {
        if (!p.complete) return {false, "incomplete at n=" + std::to_string(p.n_samples)};
        a.push_back(p.a_bwt);
        gap.push_back(p.m_bwt - p.a_bwt);
        detail += "n=" + std::to_string(p.n_samples) + " A " + num(p.a_bwt) + " M " + num(p.m_bwt) + "; ";
    }
    const auto [amin, amax] = std::minmax_element(a.begin(), a.end());
    const auto [gmin, gmax] = std::minmax_element(gap.begin(), gap.end());
    const bool same_sign = *amin > 0.0 || *amax < 0.0;
    double abs_min = INFINITY, abs_max = 0.0;
    for (const double v : a) {
        abs_min = std::min(abs_min, std::fabs(v));
        abs_max = std::max(abs_max, std::fabs(v));
    }
    const double spread = same_sign ? abs_max / abs_min : INFINITY;
    const double gspread = *gmin > 0.0 ? *gmax / *gmin : INFINITY;
    detail += "A-BWT spread " + num(spread) + " (< " + num(kSampleSpread) + "), M-A gap spread " + num(gspread) +
              " (<= " + num(kGapSpread) + ")";
    return {spread < kSampleSpread && gspread <= kGapSpread, detail};
}

Outcome commutativity(const Desk& d) {
    std::vector<corpus::CalibrationSet> cal;
    for (const auto& c : d.corpora) cal.push_back(corpus::sample_calibration(c, 16, 128, kSeed));
    auto run = [&](const std::vector<std::size_t>& order) {
        pruner::ContinualPruner p(d.base, {pruner::Criterion::copal, 0.5, pruner::InitMode::sequential, kSeed});
        for (const auto i : order) p.step(cal[i]);
        return p.state();
    };
    const auto abc = run({0, 1, 2});
    const auto cba = run({2, 1, 0});
    double worst = 0.0, scale = 0.0;
    for (const auto& [idx, m] : abc.per_layer) {
        worst = std::max(worst, linalg::max_abs_diff(m, cba.per_layer.at(idx)));
        for (const double v : m.values()) scale = std::max(scale, std::fabs(v));
    }
    return {worst < kCommuteTol, "max |W*_ABC - W*_CBA| " + num(worst) + " (< " + num(kCommuteTol) +
                                     "), max |W*| " + num(scale)};
}

Outcome determinism(const Desk& d, const fs::path& cli) {
    if (cli.empty() || !fs::exists(cli)) return {false, "cli binary not found: " + cli.string()};
    const fs::path cfg = d.work / "determinism.ini";
    {
        std::ofstream out(cfg);
        out << "[run-grid]\n";
        out << "model = \"" << d.model_path.string() << "\"\n";
        out << "corpora = [";
        for (std::size_t i = 0; i < d.corpus_paths.size(); ++i) out << (i ? ", " : "") << '"' << d.corpus_paths[i].string() << '"';
        out << "]\n";
        out << "sparsities = [\"0.5\", \"2:4\"]\nn-samples = 8\nmax-eval-windows = 8\n";
    }
    std::vector<fs::path> dirs{d.work / "det_a", d.work / "det_b"};
    for (const auto& dir : dirs) {
        fs::remove_all(dir);
        const std::string cmd = "\"" + cli.string() + "\" --config \"" + cfg.string() + "\" run-grid --seed " +
                                std::to_string(kSeed) + " --out-dir \"" + dir.string() + "\" > \"" +
                                (dir.string() + ".log") + "\" 2>&1";
        if (std::system(cmd.c_str()) != 0) return {false, "run-grid failed; see " + dir.string() + ".log"};
    }
    std::size_t files = 0, differ = 0;
    for (const auto& e : fs::directory_iterator(dirs[0])) {
        if (e.path().extension() != ".json") continue;
        ++files;
        const fs::path other = dirs[1] / e.path().filename();
        if (!fs::exists(other) || binio::read_file(e.path()) != binio::read_file(other)) ++differ;
    }
    return {files > 0 && differ == 0,
            std::to_string(files) + " JSON reports compared, " + std::to_string(differ) + " differ"};
}

Outcome aggregate_oracle(const fs::path& fixture) {
    std::ifstream in(fixture);
    if (!in) return {false, "fixture missing: " + fixture.string()};
    const auto j = nlohmann::json::parse(in);
    const auto perms = j.at("permutations").get<metrics::Permutations>();
    std::vector<metrics::EvalCell> cells;
    for (const auto& c : j.at("cells")) cells.push_back({c.at("permutation"), c.at("step"), c.at("eval"), c.at("perplexity")});
    const auto a = metrics::aggregate(perms, cells);
    const auto& e = j.at("expected");
    const double err = std::max({std::fabs(a.a_bwt - e.at("a_bwt").get<double>()),
                                 std::fabs(a.m_bwt - e.at("m_bwt").get<double>()),
                                 std::fabs(a.a_ppl - e.at("a_ppl").get<double>()),
                                 std::fabs(a.m_ppl - e.at("m_ppl").get<double>())});
    return {err < kAggregateTol, "A-BWT " + num(a.a_bwt, 17) + " M-BWT " + num(a.m_bwt, 17) + " A-PPL " +
                                     num(a.a_ppl, 17) + " M-PPL " + num(a.m_ppl, 17) + ", max err " + num(err)};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    std::string work = "acceptance_work";
    std::string model_path;
    std::string cli = COPAL_CLI_PATH;
    std::string fixtures = COPAL_FIXTURE_DIR;
    std::vector<int> only;
    app.add_option("--work-dir", work, "Scratch directory for corpora and runs");
    app.add_option("--model", model_path, "Desk checkpoint; trained into the work dir when omitted");
    app.add_option("--cli", cli, "Path to the copal CLI");
    app.add_option("--fixtures", fixtures, "Fixture directory");
    app.add_option("--only", only, "Run only these criteria");
    CLI11_PARSE(app, argc, argv);

    auto wanted = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };
    std::optional<Desk> desk;
    auto get_desk = [&]() -> const Desk& {
        if (!desk) desk = make_desk(work, model_path);
        return *desk;
    };
    std::optional<GridResult> grid;
    auto get_grid = [&]() -> const GridResult& {
        if (!grid) {
            const auto& d = get_desk();
            const auto t0 = Clock::now();
            GridResult g;
            g.reports = harness::run_grid(d.base, d.corpora, desk_grid());
            g.seconds = seconds_since(t0);
            harness::write_reports(g.reports, fs::path(work) / "desk_grid");
            grid = std::move(g);
        }
        return *grid;
    };

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"penrose conditions", penrose},
        {"loss gradient vs finite differences", gradient},
        {"linear-layer exactness", linearity},
        {"exact unstructured sparsity", exact_sparsity},
        {"N:M validity", nm_validity},
        {"weight stasis reproduction", [&] { return stasis(get_desk()); }},
        {"BWT ordering on the desk grid", [&] { return bwt_ordering(get_grid()); }},
        {"dense baseline sanity", [&] { return dense_sanity(get_grid()); }},
        {"sample-count stability", [&] { return sample_trend(get_desk()); }},
        {"order-invariant importance", [&] { return commutativity(get_desk()); }},
        {"run-grid determinism", [&] { return determinism(get_desk(), cli); }},
        {"aggregate oracle fixture", [&] { return aggregate_oracle(fs::path(fixtures) / "aggregate_2x2.json"); }},
    };

    int passed = 0, run = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!wanted(id)) continue;
        ++run;
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        passed += o.pass ? 1 : 0;
        std::printf("[%s] %2d %-38s %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(), o.detail.c_str());
        std::fflush(stdout);
    }
    if (grid) std::cout << "\n" << harness::report_table(grid->reports);
    std::printf("\n%d/%d criteria passed\n", passed, run);
    return passed == run ? 0 : 1;
}
