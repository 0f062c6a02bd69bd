// SPDX-License-Identifier: Apache-2.0

#include "copal/model.hpp"

#include <bit>
#include <cmath>
#include <numbers>
#include <string>
#include <utility>

#include "copal/binio.hpp"
#include "copal/error.hpp"
#include "copal/rng.hpp"

namespace copal::model {

namespace {

constexpr std::string_view kCheckpointMagic = "COPALNET";
constexpr std::uint8_t kNoActivation = 0xff;

const double kGeluScale = std::sqrt(2.0 / std::numbers::pi);

}  // namespace

const char* to_string(LayerKind kind) {
    switch (kind) {
        case LayerKind::linear: return "linear";
        case LayerKind::activation: return "activation";
        case LayerKind::layer_norm: return "layer_norm";
    }
    return "?";
}

const char* to_string(Activation act) {
    switch (act) {
        case Activation::relu: return "relu";
        case Activation::gelu: return "gelu";
        case Activation::tanh: return "tanh";
    }
    return "?";
}

Activation activation_from_string(std::string_view name) {
    if (name == "relu") return Activation::relu;
    if (name == "gelu") return Activation::gelu;
    if (name == "tanh") return Activation::tanh;
    throw UsageError("unknown activation '" + std::string(name) + "'");
}

double activate(Activation act, double x) {
    switch (act) {
        case Activation::relu: return x > 0.0 ? x : 0.0;
        case Activation::gelu: return 0.5 * x * (1.0 + std::tanh(kGeluScale * (x + 0.044715 * x * x * x)));
        case Activation::tanh: return std::tanh(x);
    }
    return x;
}

double activate_derivative(Activation act, double x) {
    switch (act) {
        case Activation::relu: return x > 0.0 ? 1.0 : 0.0;
        case Activation::gelu: {
            const double inner = kGeluScale * (x + 0.044715 * x * x * x);
            const double th = std::tanh(inner);
            const double dinner = kGeluScale * (1.0 + 3.0 * 0.044715 * x * x);
            return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner;
        }
        case Activation::tanh: {
            const double th = std::tanh(x);
            return 1.0 - th * th;
        }
    }
    return 1.0;
}

Layer Layer::linear(Matrix weight) {
    if (weight.empty()) {
        throw ShapeError("linear layer needs a non-empty weight");
    }
    linalg::ensure_finite(weight, "linear layer weight");
    Layer l;
    l.kind_ = LayerKind::linear;
    l.out_dim_ = weight.rows();
    l.in_dim_ = weight.cols();
    l.weight_ = std::move(weight);
    return l;
}

Layer Layer::activation(Activation act, std::size_t dim) {
    if (dim == 0) {
        throw ShapeError("activation layer needs a positive dimension");
    }
    Layer l;
    l.kind_ = LayerKind::activation;
    l.in_dim_ = l.out_dim_ = dim;
    l.activation_ = act;
    return l;
}

Layer Layer::layer_norm(std::size_t dim) {
    return layer_norm(LayerNormParams{std::vector<double>(dim, 1.0), std::vector<double>(dim, 0.0)});
}

Layer Layer::layer_norm(LayerNormParams params) {
    if (params.gain.empty() || params.gain.size() != params.bias.size()) {
        throw ShapeError("layer_norm gain/bias must be non-empty and equal length");
    }
    for (std::size_t i = 0; i < params.gain.size(); ++i) {
        if (!std::isfinite(params.gain[i]) || !std::isfinite(params.bias[i])) {
            throw NumericalError("layer_norm parameters must be finite");
        }
    }
    Layer l;
    l.kind_ = LayerKind::layer_norm;
    l.in_dim_ = l.out_dim_ = params.gain.size();
    l.norm_ = std::move(params);
    return l;
}

const Matrix& Layer::weight() const {
    if (!weight_) {
        throw UsageError(std::string("weight() on a ") + to_string(kind_) + " layer");
    }
    return *weight_;
}

Activation Layer::activation_kind() const {
    if (!activation_) {
        throw UsageError(std::string("activation_kind() on a ") + to_string(kind_) + " layer");
    }
    return *activation_;
}

const LayerNormParams& Layer::norm() const {
    if (!norm_) {
        throw UsageError(std::string("norm() on a ") + to_string(kind_) + " layer");
    }
    return *norm_;
}

void Layer::set_weight(Matrix weight) {
    if (!weight_) {
        throw UsageError(std::string("set_weight() on a ") + to_string(kind_) + " layer");
    }
    if (!weight.same_shape(*weight_)) {
        throw ShapeError("set_weight: expected " + weight_->shape_string() + ", got " + weight.shape_string());
    }
    linalg::ensure_finite(weight, "linear layer weight");
    weight_ = std::move(weight);
}

void Layer::set_norm(LayerNormParams params) {
    if (!norm_) {
        throw UsageError(std::string("set_norm() on a ") + to_string(kind_) + " layer");
    }
    if (params.gain.size() != norm_->gain.size() || params.bias.size() != norm_->bias.size()) {
        throw ShapeError("set_norm: dimension mismatch");
    }
    norm_ = std::move(params);
}

Matrix layer_forward(const Layer& layer, const Matrix& x, const Matrix* weight_override) {
    if (x.empty() || x.cols() != layer.in_dim()) {
        throw ShapeError(std::string("layer_forward: ") + to_string(layer.kind()) + " layer expects " +
                         std::to_string(layer.in_dim()) + " input features, got " + x.shape_string());
    }
    switch (layer.kind()) {
        case LayerKind::linear: {
            const Matrix& w = weight_override != nullptr ? *weight_override : layer.weight();
            if (!w.same_shape(layer.weight())) {
                throw ShapeError("layer_forward: override " + w.shape_string() + " does not match weight " +
                                 layer.weight().shape_string());
            }
            return linalg::matmul_bt(x, w);
        }
        case LayerKind::activation: {
            if (weight_override != nullptr) {
                throw ShapeError("layer_forward: weight override on an activation layer");
            }
            Matrix y = x;
            const Activation act = layer.activation_kind();
            for (double& v : y.values()) {
                v = activate(act, v);
            }
            return y;
        }
        case LayerKind::layer_norm: {
            if (weight_override != nullptr) {
                throw ShapeError("layer_forward: weight override on a layer_norm layer");
            }
            const auto& p = layer.norm();
            Matrix y(x.rows(), x.cols());
            const double n = static_cast<double>(x.cols());
            for (std::size_t r = 0; r < x.rows(); ++r) {
                const auto in = x.row(r);
                double mean = 0.0;
                for (const double v : in) mean += v;
                mean /= n;
                double var = 0.0;
                for (const double v : in) var += (v - mean) * (v - mean);
                var /= n;
                const double inv = 1.0 / std::sqrt(var + kLayerNormEpsilon);
                auto out = y.row(r);
                for (std::size_t c = 0; c < in.size(); ++c) {
                    out[c] = (in[c] - mean) * inv * p.gain[c] + p.bias[c];
                }
            }
            return y;
        }
    }
    throw UsageError("layer_forward: unknown layer kind");
}

Network::Network(Matrix embed, std::vector<Layer> layers) : embed_(std::move(embed)), layers_(std::move(layers)) {
    if (embed_.empty()) {
        throw ShapeError("Network: empty embedding");
    }
    std::size_t dim = embed_.cols();
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        if (layers_[i].in_dim() != dim) {
            throw ShapeError("Network: layer " + std::to_string(i) + " expects " +
                             std::to_string(layers_[i].in_dim()) + " inputs but receives " + std::to_string(dim));
        }
        dim = layers_[i].out_dim();
    }
    if (dim != embed_.cols()) {
        throw ShapeError("Network: final width " + std::to_string(dim) + " does not match the tied embedding width " +
                         std::to_string(embed_.cols()));
    }
}

std::vector<std::size_t> Network::prunable_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        if (layers_[i].is_linear()) {
            out.push_back(i);
        }
    }
    return out;
}

void Network::set_linear_weight(std::size_t layer_index, Matrix weight) {
    layers_.at(layer_index).set_weight(std::move(weight));
}

void Network::set_embed(Matrix embed) {
    if (!embed.same_shape(embed_)) {
        throw ShapeError("set_embed: expected " + embed_.shape_string() + ", got " + embed.shape_string());
    }
    linalg::ensure_finite(embed, "embedding");
    embed_ = std::move(embed);
}

void Network::set_norm(std::size_t layer_index, LayerNormParams params) {
    layers_.at(layer_index).set_norm(std::move(params));
}

Network make_network(const ModelShape& shape, std::uint64_t seed) {
    if (shape.vocab_size == 0 || shape.model_dim == 0 || shape.hidden_dim == 0) {
        throw ShapeError("make_network: dimensions must be positive");
    }
    Rng rng(seed);
    auto gaussian = [&](std::size_t rows, std::size_t cols, double stddev) {
        Matrix m(rows, cols);
        for (double& v : m.values()) {
            v = rng.normal(0.0, stddev);
        }
        return m;
    };
    Matrix embed = gaussian(shape.vocab_size, shape.model_dim, 1.0 / std::sqrt(static_cast<double>(shape.model_dim)));
    std::vector<Layer> layers;
    for (std::size_t b = 0; b < shape.blocks; ++b) {
        layers.push_back(Layer::linear(gaussian(shape.hidden_dim, shape.model_dim,
                                                1.0 / std::sqrt(static_cast<double>(shape.model_dim)))));
        layers.push_back(Layer::activation(shape.activation, shape.hidden_dim));
        layers.push_back(Layer::linear(gaussian(shape.model_dim, shape.hidden_dim,
                                                1.0 / std::sqrt(static_cast<double>(shape.hidden_dim)))));
        layers.push_back(Layer::layer_norm(shape.model_dim));
    }
    return Network(std::move(embed), std::move(layers));
}

namespace {

void check_tokens(const Network& net, std::span<const TokenId> tokens) {
    if (tokens.size() < 2) {
        throw InputError("forward: need at least 2 tokens, got " + std::to_string(tokens.size()));
    }
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] >= net.vocab_size()) {
            throw InputError("forward: token " + std::to_string(tokens[i]) + " at position " + std::to_string(i) +
                             " is outside the vocabulary of " + std::to_string(net.vocab_size()));
        }
    }
}

}  // namespace

Matrix embed_inputs(const Network& net, std::span<const TokenId> tokens) {
    check_tokens(net, tokens);
    const std::size_t positions = tokens.size() - 1;
    Matrix hidden(positions, net.model_dim());
    for (std::size_t t = 0; t < positions; ++t) {
        const auto src = net.embed().row(tokens[t]);
        std::copy(src.begin(), src.end(), hidden.row(t).begin());
    }
    return hidden;
}

Matrix run_layers(const Network& net, Matrix hidden) {
    for (const Layer& layer : net.layers()) {
        hidden = layer_forward(layer, hidden);
    }
    return hidden;
}

Matrix forward(const Network& net, std::span<const TokenId> tokens) {
    return linalg::matmul_bt(run_layers(net, embed_inputs(net, tokens)), net.embed());
}

CaptureResult forward_capture(const Network& net, std::span<const TokenId> tokens) {
    Matrix hidden = embed_inputs(net, tokens);
    CaptureResult out;
    for (std::size_t i = 0; i < net.layers().size(); ++i) {
        Matrix next = layer_forward(net.layers()[i], hidden);
        if (net.layers()[i].is_linear()) {
            out.records.push_back(CaptureRecord{i, hidden, next});
        }
        hidden = std::move(next);
    }
    out.logits = linalg::matmul_bt(hidden, net.embed());
    return out;
}

bool verify_capture(const Network& net, const CaptureRecord& record) {
    if (record.layer_index >= net.layers().size()) {
        return false;
    }
    return layer_forward(net.layers()[record.layer_index], record.input) == record.output;
}

namespace {

void hash_bytes(std::uint64_t& h, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        h ^= (v >> (8 * i)) & 0xffu;
        h *= 0x100000001b3ULL;
    }
}

void hash_values(std::uint64_t& h, std::span<const double> values) {
    for (const double v : values) {
        hash_bytes(h, std::bit_cast<std::uint64_t>(v));
    }
}

}  // namespace

std::uint64_t frozen_fingerprint(const Network& net) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    hash_bytes(h, net.vocab_size());
    hash_values(h, net.embed().values());
    for (const Layer& layer : net.layers()) {
        hash_bytes(h, static_cast<std::uint64_t>(layer.kind()));
        hash_bytes(h, layer.in_dim());
        hash_bytes(h, layer.out_dim());
        if (layer.kind() == LayerKind::activation) {
            hash_bytes(h, static_cast<std::uint64_t>(layer.activation_kind()));
        } else if (layer.kind() == LayerKind::layer_norm) {
            hash_values(h, layer.norm().gain);
            hash_values(h, layer.norm().bias);
        }
    }
    return h;
}

// Layout (all integers and floats little-endian):
//   "COPALNET" u32 version u32 vocab u32 dim u32 layer_count
//   per layer: u8 kind, u8 activation (0xff if none), u32 rows, u32 cols
//   payload: embedding, then per layer its parameters, row-major f64.
std::vector<std::uint8_t> encode_checkpoint(const Network& net) {
    binio::Writer w;
    w.magic(kCheckpointMagic);
    w.u32(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(net.vocab_size()));
    w.u32(static_cast<std::uint32_t>(net.model_dim()));
    w.u32(static_cast<std::uint32_t>(net.layers().size()));
    for (const Layer& layer : net.layers()) {
        w.u8(static_cast<std::uint8_t>(layer.kind()));
        w.u8(layer.kind() == LayerKind::activation ? static_cast<std::uint8_t>(layer.activation_kind()) : kNoActivation);
        w.u32(static_cast<std::uint32_t>(layer.out_dim()));
        w.u32(static_cast<std::uint32_t>(layer.in_dim()));
    }
    w.f64s(net.embed().values());
    for (const Layer& layer : net.layers()) {
        if (layer.kind() == LayerKind::linear) {
            w.f64s(layer.weight().values());
        } else if (layer.kind() == LayerKind::layer_norm) {
            w.f64s(layer.norm().gain);
            w.f64s(layer.norm().bias);
        }
    }
    return w.buffer();
}

Network decode_checkpoint(std::vector<std::uint8_t> bytes) {
    binio::Reader r(std::move(bytes));
    r.expect_magic(kCheckpointMagic, "checkpoint magic");
    const std::uint32_t version = r.u32("checkpoint version");
    if (version != kCheckpointVersion) {
        throw FormatError("checkpoint version " + std::to_string(version) + " is not supported");
    }
    const std::uint32_t vocab = r.u32("vocab_size");
    const std::uint32_t dim = r.u32("model_dim");
    const std::uint32_t count = r.u32("layer_count");
    if (vocab == 0 || dim == 0) {
        throw FormatError("checkpoint header: vocab_size and model_dim must be positive");
    }
    struct Entry {
        std::uint8_t kind, act;
        std::uint32_t rows, cols;
    };
    std::vector<Entry> table;
    for (std::uint32_t i = 0; i < count; ++i) {
        Entry e{r.u8("layer table kind"), r.u8("layer table activation"), r.u32("layer table rows"),
                r.u32("layer table cols")};
        if (e.kind > static_cast<std::uint8_t>(LayerKind::layer_norm)) {
            throw FormatError("layer table: unknown kind " + std::to_string(e.kind) + " at layer " + std::to_string(i));
        }
        if (e.rows == 0 || e.cols == 0) {
            throw FormatError("layer table: zero dimension at layer " + std::to_string(i));
        }
        if (e.kind != static_cast<std::uint8_t>(LayerKind::linear) && e.rows != e.cols) {
            throw FormatError("layer table: non-square shape for shape-preserving layer " + std::to_string(i));
        }
        if (e.kind == static_cast<std::uint8_t>(LayerKind::activation) &&
            e.act > static_cast<std::uint8_t>(Activation::tanh)) {
            throw FormatError("layer table: unknown activation " + std::to_string(e.act) + " at layer " +
                              std::to_string(i));
        }
        table.push_back(e);
    }
    try {
        Matrix embed(vocab, dim, r.f64s(static_cast<std::size_t>(vocab) * dim, "embedding payload"));
        std::vector<Layer> layers;
        for (const Entry& e : table) {
            switch (static_cast<LayerKind>(e.kind)) {
                case LayerKind::linear:
                    layers.push_back(Layer::linear(
                        Matrix(e.rows, e.cols, r.f64s(static_cast<std::size_t>(e.rows) * e.cols, "linear payload"))));
                    break;
                case LayerKind::activation:
                    layers.push_back(Layer::activation(static_cast<Activation>(e.act), e.rows));
                    break;
                case LayerKind::layer_norm: {
                    LayerNormParams p;
                    p.gain = r.f64s(e.rows, "layer_norm gain payload");
                    p.bias = r.f64s(e.rows, "layer_norm bias payload");
                    layers.push_back(Layer::layer_norm(std::move(p)));
                    break;
                }
            }
        }
        r.expect_end("checkpoint");
        return Network(std::move(embed), std::move(layers));
    } catch (const FormatError&) {
        throw;
    } catch (const Error& e) {
        throw FormatError(std::string("checkpoint payload: ") + e.what());
    }
}

void save_checkpoint(const Network& net, const std::filesystem::path& path) {
    binio::write_file(path, encode_checkpoint(net));
}

Network load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(binio::read_file(path)); }

}  // namespace copal::model
