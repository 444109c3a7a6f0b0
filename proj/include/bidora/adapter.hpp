// SPDX-License-Identifier: Apache-2.0
//
// LoRA / DoRA adapter layers, the Gram orthogonal regularizer, parameter
// grouping into magnitude (upper) and direction (lower) sets, merge-to-dense,
// and bit-exact checkpoint serialization.
#pragma once

#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "bidora/tensor.hpp"

namespace bidora {

enum class AdapterMode { lora, dora };

inline const char* to_string(AdapterMode m) {
    return m == AdapterMode::lora ? "lora" : "dora";
}

inline AdapterMode adapter_mode_from_string(const std::string& s) {
    if (s == "lora") return AdapterMode::lora;
    if (s == "dora") return AdapterMode::dora;
    throw std::invalid_argument("unknown adapter mode: " + s);
}

// One linear layer W0 (d x k, frozen) with a trainable low-rank update.
// Inputs are row vectors; forward computes x . W' with x of shape N x d, so
// "column" throughout means a k-indexed output direction.
struct AdapterLayer {
    Tensor W0;       // d x k, frozen
    Tensor B;        // d x r
    Tensor A;        // r x k
    Tensor m;        // 1 x k, dora mode only
    std::size_t rank = 1;
    double alpha = 1.0;
    AdapterMode mode = AdapterMode::dora;
    double dropout_p = 0.0;
    // When set, the column-norm denominator of the dora forward is treated
    // as a constant (no gradient through the norm).
    bool detach_norm = false;

    std::size_t in_dim() const { return W0.rows(); }
    std::size_t out_dim() const { return W0.cols(); }
    double scaling() const { return alpha / static_cast<double>(rank); }
};

// B = 0 and A ~ U[-1/sqrt(r), 1/sqrt(r)] so the adapter is exactly the frozen
// base layer at step 0; dora additionally sets m to the column norms of W0.
inline AdapterLayer make_adapter(const Tensor& base_weights, std::size_t rank,
                                 double alpha, AdapterMode mode,
                                 std::mt19937_64& rng, double dropout_p = 0.0,
                                 bool detach_norm = false) {
    const std::size_t d = base_weights.rows(), k = base_weights.cols();
    if (rank < 1 || rank > std::min(d, k))
        throw ShapeError("adapter rank must satisfy 1 <= r <= min(d, k)");
    AdapterLayer layer;
    layer.W0 = base_weights.detach();
    layer.rank = rank;
    layer.alpha = alpha;
    layer.mode = mode;
    layer.dropout_p = dropout_p;
    layer.detach_norm = detach_norm;
    layer.B = Tensor(d, rank, 0.0, true);
    const double bound = 1.0 / std::sqrt(static_cast<double>(rank));
    layer.A = random_uniform(rank, k, -bound, bound, rng);
    layer.A.set_requires_grad(true);
    if (mode == AdapterMode::dora) {
        layer.m = column_norms(layer.W0).detach();
        layer.m.set_requires_grad(true);
    }
    return layer;
}

// W0 + (alpha/r) . BA, the un-normalized direction matrix V + dV.
inline Tensor direction_matrix(const AdapterLayer& layer) {
    return add(layer.W0, scale(matmul(layer.B, layer.A), layer.scaling()));
}

// The effective dense weight matrix, differentiable w.r.t. the adapter
// parameters. In dora mode each column is normalized and rescaled by m.
inline Tensor effective_weights(const AdapterLayer& layer) {
    Tensor dir = direction_matrix(layer);
    if (layer.mode == AdapterMode::lora) return dir;
    Tensor norms = column_norms(dir);
    if (layer.detach_norm) norms = norms.detach();
    return colwise_mul(dir, hadamard(layer.m, reciprocal(norms)));
}

inline Tensor lora_forward(const AdapterLayer& layer, const Tensor& x) {
    if (layer.mode != AdapterMode::lora)
        throw std::invalid_argument("lora_forward on non-lora layer");
    if (x.cols() != layer.in_dim()) throw ShapeError("lora_forward: x.cols != d");
    return matmul(x, effective_weights(layer));
}

inline Tensor dora_forward(const AdapterLayer& layer, const Tensor& x) {
    if (layer.mode != AdapterMode::dora)
        throw std::invalid_argument("dora_forward on non-dora layer");
    if (x.cols() != layer.in_dim()) throw ShapeError("dora_forward: x.cols != d");
    return matmul(x, effective_weights(layer));
}

// Forward with optional dropout on the adapter-path input only; the frozen
// base path always sees the clean input. `rng` drives the dropout mask.
inline Tensor adapter_forward(const AdapterLayer& layer, const Tensor& x,
                              bool training = false,
                              std::mt19937_64* rng = nullptr) {
    if (x.cols() != layer.in_dim())
        throw ShapeError("adapter_forward: x.cols != d");
    if (!(training && layer.dropout_p > 0.0 && rng))
        return matmul(x, effective_weights(layer));
    std::bernoulli_distribution keep(1.0 - layer.dropout_p);
    std::vector<double> mask(x.size());
    const double inv_keep = 1.0 / (1.0 - layer.dropout_p);
    for (double& v : mask) v = keep(*rng) ? inv_keep : 0.0;
    Tensor dropped = hadamard(x, Tensor(x.rows(), x.cols(), std::move(mask)));
    Tensor delta = sub(effective_weights(layer), layer.W0);
    return add(matmul(x, layer.W0), matmul(dropped, delta));
}

// Dense W' with no gradient tracking.
inline Tensor merge_weights(const AdapterLayer& layer) {
    return effective_weights(layer).detach();
}

// Sum over layers of ||D^T D - I||_F^2 with D the un-normalized direction
// matrix; zero exactly when every D has orthonormal columns.
inline Tensor gram_regularizer(const std::vector<AdapterLayer>& layers) {
    Tensor total = Tensor::scalar(0.0);
    for (const auto& layer : layers) {
        if (layer.mode != AdapterMode::dora)
            throw std::invalid_argument("gram_regularizer requires dora mode");
        Tensor dir = direction_matrix(layer);
        Tensor gram = matmul(transpose(dir), dir);
        Tensor residual = sub(gram, Tensor::identity(dir.cols()));
        total = add(total, frobenius_norm_sq(residual));
    }
    return total;
}

enum class ParamLevel { upper, lower };

// References to the trainable tensors one optimization level owns:
// upper = all magnitudes, lower = all (B, A) pairs.
struct ParamGroup {
    ParamLevel level;
    std::vector<Tensor> members;
};

inline ParamGroup upper_group(const std::vector<AdapterLayer>& layers) {
    ParamGroup g{ParamLevel::upper, {}};
    for (const auto& l : layers)
        if (l.mode == AdapterMode::dora) g.members.push_back(l.m);
    return g;
}

inline ParamGroup lower_group(const std::vector<AdapterLayer>& layers) {
    ParamGroup g{ParamLevel::lower, {}};
    for (const auto& l : layers) {
        g.members.push_back(l.B);
        g.members.push_back(l.A);
    }
    return g;
}

// ---- checkpoint serialization ----------------------------------------------
// Flat text format, one layer per block. Doubles are written as C99 hex
// floats so a round-trip is bit-exact.

namespace detail {

inline void write_tensor(std::ostream& os, const char* name, const Tensor& t) {
    os << name << ' ' << t.rows() << ' ' << t.cols();
    char buf[40];
    for (double v : t.data()) {
        std::snprintf(buf, sizeof buf, " %a", v);
        os << buf;
    }
    os << '\n';
}

inline Tensor read_tensor(std::istream& is, const std::string& expect_name) {
    std::string name;
    std::size_t rows, cols;
    if (!(is >> name >> rows >> cols) || name != expect_name)
        throw std::runtime_error("checkpoint: expected tensor " + expect_name);
    std::vector<double> data(rows * cols);
    for (double& v : data) {
        std::string tok;
        if (!(is >> tok)) throw std::runtime_error("checkpoint: truncated tensor");
        v = std::strtod(tok.c_str(), nullptr);
    }
    return Tensor(rows, cols, std::move(data));
}

}  // namespace detail

inline void save_layers(std::ostream& os,
                        const std::vector<AdapterLayer>& layers) {
    os << "bidora-checkpoint 1\n";
    os << "layers " << layers.size() << '\n';
    for (const auto& l : layers) {
        os << "layer " << to_string(l.mode) << ' ' << l.rank << ' ';
        char buf[40];
        std::snprintf(buf, sizeof buf, "%a", l.alpha);
        os << buf << ' ' << (l.detach_norm ? 1 : 0) << '\n';
        detail::write_tensor(os, "W0", l.W0);
        detail::write_tensor(os, "B", l.B);
        detail::write_tensor(os, "A", l.A);
        if (l.mode == AdapterMode::dora) detail::write_tensor(os, "m", l.m);
    }
}

inline std::vector<AdapterLayer> load_layers(std::istream& is) {
    std::string magic;
    int version = 0;
    if (!(is >> magic >> version) || magic != "bidora-checkpoint" || version != 1)
        throw std::runtime_error("checkpoint: bad header");
    std::string tag;
    std::size_t count = 0;
    if (!(is >> tag >> count) || tag != "layers")
        throw std::runtime_error("checkpoint: missing layer count");
    std::vector<AdapterLayer> layers;
    layers.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::string mode_str, alpha_str;
        int detach = 0;
        AdapterLayer l;
        if (!(is >> tag >> mode_str >> l.rank >> alpha_str >> detach) ||
            tag != "layer")
            throw std::runtime_error("checkpoint: bad layer header");
        l.mode = adapter_mode_from_string(mode_str);
        l.alpha = std::strtod(alpha_str.c_str(), nullptr);
        l.detach_norm = detach != 0;
        l.W0 = detail::read_tensor(is, "W0");
        l.B = detail::read_tensor(is, "B");
        l.A = detail::read_tensor(is, "A");
        l.B.set_requires_grad(true);
        l.A.set_requires_grad(true);
        if (l.mode == AdapterMode::dora) {
            l.m = detail::read_tensor(is, "m");
            l.m.set_requires_grad(true);
        }
        layers.push_back(std::move(l));
    }
    return layers;
}

inline void save_layers_file(const std::string& path,
                             const std::vector<AdapterLayer>& layers) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open checkpoint file " + path);
    save_layers(os, layers);
}

inline std::vector<AdapterLayer> load_layers_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open checkpoint file " + path);
    return load_layers(is);
}

}  // namespace bidora
