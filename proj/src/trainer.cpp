// SPDX-License-Identifier: Apache-2.0

#include "copal/trainer.hpp"

#include <algorithm>
#include <cmath>

#include "copal/error.hpp"

namespace copal::trainer {

using linalg::Matrix;
using model::LayerKind;
using model::TokenId;

void validate(const TrainConfig& cfg) {
    if (cfg.batch == 0) {
        throw InputError("train: batch must be at least 1");
    }
    if (cfg.seq_len < 2) {
        throw InputError("train: seq_len must be at least 2");
    }
    if (!(cfg.learning_rate > 0.0 && cfg.learning_rate < 1.0)) {
        throw InputError("train: learning_rate must lie in (0, 1)");
    }
    if (!(cfg.clip_norm > 0.0)) {
        throw InputError("train: clip_norm must be positive");
    }
}

double Gradients::norm() const {
    double sq = 0.0;
    auto add = [&sq](std::span<const double> v) {
        for (const double x : v) sq += x * x;
    };
    add(embed.values());
    for (const auto& w : weights) add(w.values());
    for (const auto& g : gain) add(g);
    for (const auto& b : bias) add(b);
    return std::sqrt(sq);
}

void Gradients::scale(double factor) {
    auto mul = [factor](std::span<double> v) {
        for (double& x : v) x *= factor;
    };
    mul(embed.values());
    for (auto& w : weights) mul(w.values());
    for (auto& g : gain) mul(g);
    for (auto& b : bias) mul(b);
}

namespace {

struct Stacked {
    Matrix hidden;                 // positions x model_dim
    std::vector<TokenId> inputs;   // token feeding each position
    std::vector<TokenId> targets;  // token predicted at each position
};

Stacked stack_windows(const model::Network& net, const std::vector<std::span<const TokenId>>& windows) {
    if (windows.empty()) {
        throw InputError("train: empty batch");
    }
    std::size_t positions = 0;
    for (const auto& w : windows) {
        if (w.size() < 2) {
            throw InputError("train: window shorter than 2 tokens");
        }
        positions += w.size() - 1;
    }
    Stacked s;
    s.hidden = Matrix(positions, net.model_dim());
    s.inputs.reserve(positions);
    s.targets.reserve(positions);
    std::size_t r = 0;
    for (const auto& w : windows) {
        for (std::size_t t = 0; t + 1 < w.size(); ++t, ++r) {
            if (w[t] >= net.vocab_size() || w[t + 1] >= net.vocab_size()) {
                throw InputError("train: token id out of vocabulary");
            }
            const auto src = net.embed().row(w[t]);
            std::copy(src.begin(), src.end(), s.hidden.row(r).begin());
            s.inputs.push_back(w[t]);
            s.targets.push_back(w[t + 1]);
        }
    }
    return s;
}

// Softmax cross-entropy; replaces logits with d(mean loss)/d(logits).
double cross_entropy_inplace(Matrix& logits, const std::vector<TokenId>& targets) {
    const double inv_n = 1.0 / static_cast<double>(logits.rows());
    double total = 0.0;
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        auto row = logits.row(r);
        const double mx = *std::max_element(row.begin(), row.end());
        double sum = 0.0;
        for (double& v : row) {
            v = std::exp(v - mx);
            sum += v;
        }
        total += std::log(sum) - std::log(row[targets[r]]);
        for (double& v : row) {
            v = v / sum * inv_n;
        }
        row[targets[r]] -= inv_n;
    }
    return total * inv_n;
}

Matrix layer_norm_backward(const model::LayerNormParams& p, const Matrix& x, const Matrix& dy,
                           std::vector<double>& dgain, std::vector<double>& dbias) {
    const std::size_t n = x.cols();
    const double dn = static_cast<double>(n);
    Matrix dx(x.rows(), n);
    std::vector<double> xhat(n);
    std::vector<double> dxhat(n);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const auto in = x.row(r);
        const auto g = dy.row(r);
        double mean = 0.0;
        for (const double v : in) mean += v;
        mean /= dn;
        double var = 0.0;
        for (const double v : in) var += (v - mean) * (v - mean);
        var /= dn;
        const double inv = 1.0 / std::sqrt(var + model::kLayerNormEpsilon);
        double sum_dxhat = 0.0;
        double sum_dxhat_xhat = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
            xhat[c] = (in[c] - mean) * inv;
            dgain[c] += g[c] * xhat[c];
            dbias[c] += g[c];
            dxhat[c] = g[c] * p.gain[c];
            sum_dxhat += dxhat[c];
            sum_dxhat_xhat += dxhat[c] * xhat[c];
        }
        auto out = dx.row(r);
        for (std::size_t c = 0; c < n; ++c) {
            out[c] = inv / dn * (dn * dxhat[c] - sum_dxhat - xhat[c] * sum_dxhat_xhat);
        }
    }
    return dx;
}

}  // namespace

double loss(const model::Network& net, const std::vector<std::span<const TokenId>>& windows) {
    Stacked s = stack_windows(net, windows);
    Matrix logits = linalg::matmul_bt(model::run_layers(net, std::move(s.hidden)), net.embed());
    return cross_entropy_inplace(logits, s.targets);
}

LossAndGrad loss_and_gradient(const model::Network& net, const std::vector<std::span<const TokenId>>& windows) {
    Stacked s = stack_windows(net, windows);
    const auto& layers = net.layers();
    std::vector<Matrix> inputs;
    inputs.reserve(layers.size());
    Matrix hidden = std::move(s.hidden);
    for (const auto& layer : layers) {
        Matrix next = model::layer_forward(layer, hidden);
        inputs.push_back(std::move(hidden));
        hidden = std::move(next);
    }
    Matrix dlogits = linalg::matmul_bt(hidden, net.embed());

    LossAndGrad out;
    out.loss = cross_entropy_inplace(dlogits, s.targets);
    Gradients& g = out.grad;
    g.weights.resize(layers.size());
    g.gain.resize(layers.size());
    g.bias.resize(layers.size());

    // logits = h E^T
    g.embed = linalg::matmul_at(dlogits, hidden);
    Matrix dh = linalg::matmul(dlogits, net.embed());

    for (std::size_t i = layers.size(); i-- > 0;) {
        const auto& layer = layers[i];
        const Matrix& x = inputs[i];
        switch (layer.kind()) {
            case LayerKind::linear:
                g.weights[i] = linalg::matmul_at(dh, x);
                dh = linalg::matmul(dh, layer.weight());
                break;
            case LayerKind::activation: {
                const auto act = layer.activation_kind();
                auto dv = dh.values();
                const auto xv = x.values();
                for (std::size_t k = 0; k < dv.size(); ++k) {
                    dv[k] *= model::activate_derivative(act, xv[k]);
                }
                break;
            }
            case LayerKind::layer_norm:
                g.gain[i].assign(layer.in_dim(), 0.0);
                g.bias[i].assign(layer.in_dim(), 0.0);
                dh = layer_norm_backward(layer.norm(), x, dh, g.gain[i], g.bias[i]);
                break;
        }
    }
    for (std::size_t r = 0; r < dh.rows(); ++r) {
        auto dst = g.embed.row(s.inputs[r]);
        const auto src = dh.row(r);
        for (std::size_t c = 0; c < src.size(); ++c) {
            dst[c] += src[c];
        }
    }
    return out;
}

void apply_update(model::Network& net, const Gradients& grad, double lr) {
    Matrix embed = net.embed();
    linalg::add_inplace(embed, linalg::scale(grad.embed, -lr));
    net.set_embed(std::move(embed));
    for (std::size_t i = 0; i < net.layers().size(); ++i) {
        const auto& layer = net.layer(i);
        if (layer.is_linear()) {
            Matrix w = layer.weight();
            linalg::add_inplace(w, linalg::scale(grad.weights[i], -lr));
            net.set_linear_weight(i, std::move(w));
        } else if (layer.kind() == LayerKind::layer_norm) {
            auto p = layer.norm();
            for (std::size_t c = 0; c < p.gain.size(); ++c) {
                p.gain[c] -= lr * grad.gain[i][c];
                p.bias[c] -= lr * grad.bias[i][c];
            }
            net.set_norm(i, std::move(p));
        }
    }
}

std::vector<std::span<const TokenId>> sample_batch(const std::vector<corpus::Corpus>& corpora, std::size_t batch,
                                                    std::size_t seq_len, Rng& rng) {
    if (corpora.empty()) {
        throw InputError("train: no corpora");
    }
    std::vector<std::span<const TokenId>> out;
    out.reserve(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        const auto& c = corpora[rng.index(corpora.size())];
        const auto cal = c.calibration();
        if (cal.size() < seq_len) {
            throw InputError("train: corpus '" + c.name + "' calibration split is shorter than seq_len");
        }
        const std::size_t offset = rng.index(cal.size() - seq_len + 1);
        out.push_back(cal.subspan(offset, seq_len));
    }
    return out;
}

std::vector<std::span<const TokenId>> heldout_batch(const std::vector<corpus::Corpus>& corpora,
                                                     std::size_t per_corpus, std::size_t seq_len) {
    std::vector<std::span<const TokenId>> out;
    for (const auto& c : corpora) {
        const auto ev = c.evaluation();
        for (std::size_t w = 0; w < per_corpus && (w + 1) * seq_len <= ev.size(); ++w) {
            out.push_back(ev.subspan(w * seq_len, seq_len));
        }
    }
    return out;
}

TrainResult train(model::Network net, const std::vector<corpus::Corpus>& corpora, const TrainConfig& cfg,
                  const ProgressFn& progress) {
    validate(cfg);
    if (corpora.empty()) {
        throw InputError("train: no corpora");
    }
    Rng rng(mix_seed(cfg.seed, stable_hash("trainer")));
    TrainResult result{std::move(net), {}};
    result.loss_history.reserve(cfg.steps);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const auto batch = sample_batch(corpora, cfg.batch, cfg.seq_len, rng);
        LossAndGrad lg;
        try {
            lg = loss_and_gradient(result.net, batch);
        } catch (const NumericalError& e) {
            throw TrainingError("train: diverged at step " + std::to_string(step) + " (" + e.what() +
                                "); try a smaller learning_rate");
        }
        const double gn = lg.grad.norm();
        if (!std::isfinite(lg.loss) || !std::isfinite(gn)) {
            throw TrainingError("train: non-finite loss at step " + std::to_string(step) +
                                "; try a smaller learning_rate");
        }
        if (gn > cfg.clip_norm) {
            lg.grad.scale(cfg.clip_norm / gn);
        }
        try {
            apply_update(result.net, lg.grad, cfg.learning_rate);
        } catch (const NumericalError& e) {
            throw TrainingError("train: non-finite weights at step " + std::to_string(step) +
                                "; try a smaller learning_rate");
        }
        result.loss_history.push_back(lg.loss);
        if (progress) {
            progress(step, lg.loss);
        }
    }
    return result;
}

}  // namespace copal::trainer
