// SPDX-License-Identifier: Apache-2.0
//
// copal: corpus generation, training, continual pruning, evaluation and
// experiment grids. Every option can also be given in a key-value config
// file (--config), with one [subcommand] section per subcommand.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "copal/binio.hpp"
#include "copal/corpus.hpp"
#include "copal/error.hpp"
#include "copal/harness.hpp"
#include "copal/importance.hpp"
#include "copal/metrics.hpp"
#include "copal/model.hpp"
#include "copal/pruner.hpp"
#include "copal/trainer.hpp"

namespace fs = std::filesystem;
using namespace copal;

namespace {

struct CorpusArgs {
    std::vector<std::string> paths;
    double eval_fraction = corpus::kDefaultEvalFraction;
    std::size_t vocab = 256;

    void add(CLI::App* app) {
        app->add_option("--corpora", paths, "Corpus files; the name is the file stem")->required();
        app->add_option("--eval-fraction", eval_fraction, "Trailing fraction held out for evaluation");
        app->add_option("--vocab", vocab, "Vocabulary size");
    }

    std::vector<corpus::Corpus> load() const {
        std::vector<corpus::Corpus> out;
        for (const auto& p : paths) {
            out.push_back(corpus::load_corpus(p, fs::path(p).stem().string(), eval_fraction, vocab));
        }
        return out;
    }
};

struct GridArgs {
    CorpusArgs corpora;
    std::string model;
    std::string out_dir = "results";
    std::vector<std::string> criteria{"copal", "magnitude", "wanda_style"};
    std::vector<std::string> sparsities{"0.5"};
    std::size_t n_samples = 16;
    std::size_t seq_len = 128;
    std::uint64_t seed = 0;
    double epsilon = sensitivity::kDefaultEpsilon;
    std::string granularity = "segment_mean";
    std::string copal_init = "sequential";
    std::string baseline_init = "global";
    std::size_t max_eval_windows = 0;
    bool no_dense = false;

    void add(CLI::App* app, bool seed_required) {
        corpora.add(app);
        app->add_option("--model", model, "Base checkpoint")->required()->check(CLI::ExistingFile);
        app->add_option("--out-dir", out_dir, "Output directory");
        app->add_option("--criteria", criteria, "copal, magnitude, wanda_style");
        app->add_option("--sparsities", sparsities, "Ratios such as 0.5 or patterns such as 2:4");
        app->add_option("--n-samples", n_samples, "Calibration segments per dataset");
        app->add_option("--seq-len", seq_len, "Calibration and evaluation window length");
        auto* s = app->add_option("--seed", seed, "Seed for calibration sampling and perturbations");
        if (seed_required) s->required();
        app->add_option("--epsilon", epsilon, "Relative perturbation scale");
        app->add_option("--granularity", granularity, "segment_mean or per_token")
            ->check(CLI::IsMember({"segment_mean", "per_token"}));
        app->add_option("--copal-init", copal_init, "Init mode for copal")
            ->check(CLI::IsMember({"sequential", "global"}));
        app->add_option("--baseline-init", baseline_init, "Init mode for magnitude and wanda_style")
            ->check(CLI::IsMember({"sequential", "global"}));
        app->add_option("--max-eval-windows", max_eval_windows, "Cap on evaluation windows per dataset (0 = all)");
        app->add_flag("--no-dense", no_dense, "Skip the unpruned reference row");
    }

    harness::GridConfig config() const {
        harness::GridConfig cfg;
        cfg.criteria.clear();
        for (const auto& c : criteria) cfg.criteria.push_back(pruner::criterion_from_string(c));
        cfg.sparsities.clear();
        for (const auto& s : sparsities) cfg.sparsities.push_back(pruner::parse_sparsity(s));
        cfg.n_samples = n_samples;
        cfg.seq_len = seq_len;
        cfg.seed = seed;
        cfg.epsilon = epsilon;
        cfg.granularity = granularity == "per_token" ? importance::Granularity::per_token
                                                     : importance::Granularity::segment_mean;
        cfg.copal_init = pruner::init_mode_from_string(copal_init);
        cfg.baseline_init = pruner::init_mode_from_string(baseline_init);
        cfg.max_eval_windows = max_eval_windows;
        cfg.include_dense = !no_dense;
        harness::validate(cfg);
        return cfg;
    }
};

void write_text(const fs::path& path, const std::string& text) {
    binio::write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Continual pruning of small language models"};
    app.set_config("--config", "", "Key-value config file");
    app.require_subcommand(1);

    // gen-corpora
    auto* gen = app.add_subcommand("gen-corpora", "Write the synthetic prose, structured and tabular corpora");
    std::string gen_dir = "corpora";
    std::size_t gen_bytes = 200000;
    std::uint64_t gen_seed = 0;
    gen->add_option("--out-dir", gen_dir, "Output directory");
    gen->add_option("--bytes", gen_bytes, "Bytes per corpus");
    gen->add_option("--seed", gen_seed, "Generator seed");

    // train
    auto* tr = app.add_subcommand("train", "Train a base checkpoint on a uniform mixture of corpora");
    CorpusArgs tr_corpora;
    tr_corpora.add(tr);
    model::ModelShape shape;
    trainer::TrainConfig tcfg;
    std::string tr_out = "model.ckpt";
    std::string activation = "gelu";
    std::uint64_t init_seed = 0;
    tr->add_option("--out", tr_out, "Checkpoint path");
    tr->add_option("--dim", shape.model_dim, "Model width");
    tr->add_option("--hidden", shape.hidden_dim, "Hidden width of each block");
    tr->add_option("--blocks", shape.blocks, "Number of blocks");
    tr->add_option("--activation", activation, "relu, gelu or tanh")->check(CLI::IsMember({"relu", "gelu", "tanh"}));
    tr->add_option("--steps", tcfg.steps, "SGD steps");
    tr->add_option("--batch", tcfg.batch, "Windows per step");
    tr->add_option("--seq-len", tcfg.seq_len, "Window length");
    tr->add_option("--lr", tcfg.learning_rate, "Learning rate");
    tr->add_option("--clip", tcfg.clip_norm, "Global gradient norm clip");
    tr->add_option("--seed", tcfg.seed, "Batch sampling seed");
    tr->add_option("--init-seed", init_seed, "Weight initialization seed");
    std::size_t log_every = 100;
    tr->add_option("--log-every", log_every, "Print the moving-average loss every N steps (0 = quiet)");

    // prune
    auto* pr = app.add_subcommand("prune", "Prune on corpora in the given order");
    CorpusArgs pr_corpora;
    pr_corpora.add(pr);
    std::string pr_model;
    std::string pr_out = "pruned";
    std::string pr_criterion = "copal";
    std::string pr_sparsity = "0.5";
    std::string pr_init = "sequential";
    std::string pr_granularity = "segment_mean";
    std::size_t pr_samples = 16;
    std::size_t pr_seq = 128;
    std::uint64_t pr_seed = 0;
    double pr_eps = sensitivity::kDefaultEpsilon;
    bool pr_normalize = false;
    pr->add_option("--model", pr_model, "Base checkpoint")->required()->check(CLI::ExistingFile);
    pr->add_option("--out-dir", pr_out, "Output directory");
    pr->add_option("--criterion", pr_criterion, "copal, magnitude, wanda_style");
    pr->add_option("--sparsity", pr_sparsity, "Ratio or N:M pattern");
    pr->add_option("--init-mode", pr_init, "sequential or global")->check(CLI::IsMember({"sequential", "global"}));
    pr->add_option("--granularity", pr_granularity, "segment_mean or per_token")
        ->check(CLI::IsMember({"segment_mean", "per_token"}));
    pr->add_option("--n-samples", pr_samples, "Calibration segments per dataset");
    pr->add_option("--seq-len", pr_seq, "Calibration window length");
    pr->add_option("--seed", pr_seed, "Seed");
    pr->add_option("--epsilon", pr_eps, "Relative perturbation scale");
    pr->add_flag("--normalize", pr_normalize, "Divide each dataset's importance by its sample count");

    // eval
    auto* ev = app.add_subcommand("eval", "Perplexity of a checkpoint on each corpus' evaluation split");
    CorpusArgs ev_corpora;
    ev_corpora.add(ev);
    std::string ev_model;
    std::size_t ev_seq = 128;
    std::size_t ev_windows = 0;
    ev->add_option("--model", ev_model, "Checkpoint")->required()->check(CLI::ExistingFile);
    ev->add_option("--seq-len", ev_seq, "Window length");
    ev->add_option("--max-eval-windows", ev_windows, "Cap on windows per dataset (0 = all)");

    // run-grid, ablations
    auto* grid = app.add_subcommand("run-grid", "All permutations x criteria x sparsities");
    GridArgs grid_args;
    grid_args.add(grid, true);

    auto* abs = app.add_subcommand("ablate-sparsity", "A-BWT and M-BWT per criterion across sparsities");
    GridArgs abs_args;
    abs_args.sparsities = {"0.3", "0.5", "0.7"};
    abs_args.add(abs, false);

    auto* abn = app.add_subcommand("ablate-samples", "COPAL A-BWT and M-BWT across calibration sample counts");
    GridArgs abn_args;
    std::vector<std::size_t> sweep{16, 32, 64};
    abn_args.add(abn, false);
    abn->add_option("--sweep", sweep, "Sample counts");

    auto* rep = app.add_subcommand("report", "Render the table for a run-grid output directory");
    std::string rep_dir = "results";
    bool rep_csv = false;
    rep->add_option("--in-dir", rep_dir, "Directory written by run-grid")->check(CLI::ExistingDirectory);
    rep->add_flag("--csv", rep_csv, "Print the summary CSV instead of the table");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) {
            for (const auto& g : corpus::write_synthetic_corpora(gen_dir, gen_bytes, gen_seed)) {
                std::cout << g.name << ' ' << g.path.string() << '\n';
            }
        } else if (tr->parsed()) {
            shape.vocab_size = tr_corpora.vocab;
            shape.activation = model::activation_from_string(activation);
            const auto corpora = tr_corpora.load();
            const auto net = model::make_network(shape, init_seed);
            const auto held = trainer::heldout_batch(corpora, 4, tcfg.seq_len);
            const double before = held.empty() ? 0.0 : trainer::loss(net, held);
            double window = 0.0;
            auto progress = [&](std::size_t step, double loss) {
                window += loss;
                if (log_every > 0 && (step + 1) % log_every == 0) {
                    std::fprintf(stderr, "step %zu loss %.4f\n", step + 1, window / static_cast<double>(log_every));
                    window = 0.0;
                }
            };
            const auto result = trainer::train(net, corpora, tcfg, progress);
            model::save_checkpoint(result.net, tr_out);
            if (!held.empty()) {
                std::printf("heldout loss %.6f -> %.6f\n", before, trainer::loss(result.net, held));
            }
            std::printf("wrote %s\n", tr_out.c_str());
        } else if (pr->parsed()) {
            const auto corpora = pr_corpora.load();
            pruner::PruneConfig pc;
            pc.criterion = pruner::criterion_from_string(pr_criterion);
            pc.sparsity = pruner::parse_sparsity(pr_sparsity);
            pc.init_mode = pruner::init_mode_from_string(pr_init);
            pc.seed = pr_seed;
            pc.epsilon = pr_eps;
            pc.granularity = pr_granularity == "per_token" ? importance::Granularity::per_token
                                                           : importance::Granularity::segment_mean;
            pc.normalize_per_dataset = pr_normalize;
            pruner::ContinualPruner runner(model::load_checkpoint(pr_model), pc);
            nlohmann::json steps = nlohmann::json::array();
            const pruner::MaskSet* previous = nullptr;
            for (const auto& c : corpora) {
                const auto& step = runner.step(corpus::sample_calibration(c, pr_samples, pr_seq, pr_seed));
                steps.push_back({{"dataset", c.name},
                                 {"stasis", step.stasis()},
                                 {"layers", pruner::mask_summary(step.masks, previous)}});
                previous = &step.masks;
            }
            const fs::path out(pr_out);
            model::save_checkpoint(runner.current(), out / "model.ckpt");
            pruner::save_masks(runner.history().back().masks, out / "masks.bin");
            if (pc.criterion == pruner::Criterion::copal) {
                importance::save_state(runner.state(), out / "importance.bin");
            }
            write_text(out / "prune.json", steps.dump(2) + "\n");
            std::cout << steps.dump(2) << '\n';
        } else if (ev->parsed()) {
            const auto corpora = ev_corpora.load();
            const auto net = model::load_checkpoint(ev_model);
            nlohmann::json out = nlohmann::json::object();
            for (const auto& c : corpora) {
                out[c.name] = metrics::perplexity(net, c, ev_seq, ev_windows);
            }
            std::cout << out.dump(2) << '\n';
        } else if (grid->parsed()) {
            const auto cfg = grid_args.config();
            const auto corpora = grid_args.corpora.load();
            const auto reports = harness::run_grid(model::load_checkpoint(grid_args.model), corpora, cfg);
            harness::write_reports(reports, grid_args.out_dir);
            std::cout << harness::report_table(reports);
            for (const auto& r : reports) {
                if (!r.complete()) return 3;
            }
        } else if (abs->parsed()) {
            const auto cfg = abs_args.config();
            const auto points =
                harness::run_ablation_sparsity(model::load_checkpoint(abs_args.model), abs_args.corpora.load(), cfg);
            const std::string csv = harness::sparsity_csv(points);
            write_text(fs::path(abs_args.out_dir) / "ablate_sparsity.csv", csv);
            std::cout << csv;
        } else if (abn->parsed()) {
            const auto cfg = abn_args.config();
            const auto points = harness::run_ablation_samples(model::load_checkpoint(abn_args.model),
                                                              abn_args.corpora.load(), cfg, sweep);
            const std::string csv = harness::samples_csv(points);
            write_text(fs::path(abn_args.out_dir) / "ablate_samples.csv", csv);
            std::cout << csv;
        } else if (rep->parsed()) {
            const auto reports = harness::read_reports(rep_dir);
            std::cout << (rep_csv ? harness::report_csv(reports) : harness::report_table(reports));
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
