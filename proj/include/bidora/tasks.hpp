// SPDX-License-Identifier: Apache-2.0
//
// Synthetic pretrain -> finetune tasks, deterministic splitting, small
// adapter-equipped MLP models, and metric plumbing.
#pragma once

#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "bidora/adapter.hpp"
#include "bidora/optim.hpp"
#include "bidora/tensor.hpp"

namespace bidora {

enum class TaskKind { classification, regression };

inline const char* to_string(TaskKind k) {
    return k == TaskKind::classification ? "classification" : "regression";
}

struct Dataset {
    Tensor inputs;                 // N x d
    std::vector<int> labels;       // classification targets
    Tensor targets;                // N x out, regression targets
    TaskKind kind = TaskKind::classification;
    std::uint64_t seed = 0;

    std::size_t size() const { return inputs.rows(); }
    std::size_t dim() const { return inputs.cols(); }

    Dataset subset(const std::vector<std::size_t>& idx) const {
        Dataset out;
        out.kind = kind;
        out.seed = seed;
        const std::size_t d = dim();
        std::vector<double> x(idx.size() * d);
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < d; ++j)
                x[i * d + j] = inputs(idx[i], j);
        out.inputs = Tensor(idx.size(), d, std::move(x));
        if (kind == TaskKind::classification) {
            out.labels.reserve(idx.size());
            for (std::size_t i : idx) out.labels.push_back(labels[i]);
        } else {
            const std::size_t o = targets.cols();
            std::vector<double> y(idx.size() * o);
            for (std::size_t i = 0; i < idx.size(); ++i)
                for (std::size_t j = 0; j < o; ++j)
                    y[i * o + j] = targets(idx[i], j);
            out.targets = Tensor(idx.size(), o, std::move(y));
        }
        return out;
    }

    static Dataset concat(const Dataset& a, const Dataset& b) {
        if (a.kind != b.kind || a.dim() != b.dim())
            throw ShapeError("concat: incompatible datasets");
        Dataset out;
        out.kind = a.kind;
        out.seed = a.seed;
        std::vector<double> x(a.inputs.data());
        x.insert(x.end(), b.inputs.data().begin(), b.inputs.data().end());
        out.inputs = Tensor(a.size() + b.size(), a.dim(), std::move(x));
        if (a.kind == TaskKind::classification) {
            out.labels = a.labels;
            out.labels.insert(out.labels.end(), b.labels.begin(),
                              b.labels.end());
        } else {
            std::vector<double> y(a.targets.data());
            y.insert(y.end(), b.targets.data().begin(), b.targets.data().end());
            out.targets = Tensor(a.size() + b.size(), a.targets.cols(),
                                 std::move(y));
        }
        return out;
    }
};

struct SplitPair {
    Dataset train;
    Dataset val;
    double ratio = 0.8;
    std::uint64_t seed = 0;
};

// Seed-determined permutation, then prefix/suffix split; |train| = round(ratio*N).
inline SplitPair split(const Dataset& source, double ratio,
                       std::uint64_t seed) {
    if (!(ratio > 0.0 && ratio < 1.0))
        throw std::invalid_argument("split ratio must be in (0, 1)");
    const std::size_t n = source.size();
    if (n < 2) throw std::invalid_argument("split needs at least 2 samples");
    std::size_t n_train = static_cast<std::size_t>(
        std::llround(ratio * static_cast<double>(n)));
    n_train = std::min(std::max<std::size_t>(n_train, 1), n - 1);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    SplitPair pair;
    pair.ratio = ratio;
    pair.seed = seed;
    pair.train = source.subset(
        std::vector<std::size_t>(idx.begin(), idx.begin() + n_train));
    pair.val = source.subset(
        std::vector<std::size_t>(idx.begin() + n_train, idx.end()));
    return pair;
}

// ---- task generators -------------------------------------------------------

struct ClusterTask {
    Dataset pretrain;
    Dataset target;
    Dataset test;
};

// Gaussian-cluster classification. The target distribution reuses the
// pretrain cluster means translated by `shift` (each along its own random
// unit direction) with label-flip probability `noise`.
inline ClusterTask make_cluster_task(std::size_t num_classes, std::size_t d,
                                     std::size_t n_pretrain,
                                     std::size_t n_target, double shift,
                                     double noise, std::uint64_t seed,
                                     double separation = 6.0,
                                     std::size_t n_test = 1000) {
    if (num_classes < 2 || d < 2 || n_pretrain == 0 || n_target == 0)
        throw std::invalid_argument("make_cluster_task: invalid sizes");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    auto random_direction = [&] {
        std::vector<double> v(d);
        double norm = 0.0;
        do {
            norm = 0.0;
            for (double& x : v) {
                x = gauss(rng);
                norm += x * x;
            }
            norm = std::sqrt(norm);
        } while (norm < 1e-9);
        for (double& x : v) x /= norm;
        return v;
    };

    // Means at `separation` times random unit directions, re-drawn until all
    // pairwise distances reach the separation scale.
    std::vector<std::vector<double>> means(num_classes);
    for (std::size_t c = 0; c < num_classes; ++c) {
        for (int attempt = 0; attempt < 256; ++attempt) {
            auto cand = random_direction();
            for (double& x : cand) x *= separation;
            bool ok = true;
            for (std::size_t o = 0; o < c && ok; ++o) {
                double dist2 = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double diff = cand[j] - means[o][j];
                    dist2 += diff * diff;
                }
                ok = dist2 >= separation * separation * 0.8;
            }
            means[c] = cand;
            if (ok) break;
        }
    }
    std::vector<std::vector<double>> shifted = means;
    for (auto& mu : shifted) {
        auto dir = random_direction();
        for (std::size_t j = 0; j < d; ++j) mu[j] += shift * dir[j];
    }

    auto sample = [&](const std::vector<std::vector<double>>& mus,
                      std::size_t n, double label_noise) {
        Dataset ds;
        ds.kind = TaskKind::classification;
        ds.seed = seed;
        std::vector<double> x(n * d);
        ds.labels.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t c = i % num_classes;
            for (std::size_t j = 0; j < d; ++j)
                x[i * d + j] = mus[c][j] + gauss(rng);
            int label = static_cast<int>(c);
            if (label_noise > 0.0 && unit(rng) < label_noise)
                label = static_cast<int>(rng() % num_classes);
            ds.labels[i] = label;
        }
        ds.inputs = Tensor(n, d, std::move(x));
        return ds;
    };

    ClusterTask task;
    task.pretrain = sample(means, n_pretrain, 0.0);
    task.target = sample(shifted, n_target, noise);
    task.test = sample(shifted, n_test, 0.0);
    return task;
}

struct TeacherNet {
    Tensor W1;  // d x width
    Tensor W2;  // width x 1

    Tensor predict(const Tensor& x) const {
        return matmul(relu(matmul(x, W1)), W2);
    }
};

struct RegressionTask {
    TeacherNet teacher;
    Dataset target;
    Dataset test;
};

// Targets are a frozen random one-hidden-layer teacher's outputs plus noise.
inline RegressionTask make_teacher_regression(std::size_t d, std::size_t width,
                                              std::size_t n_target,
                                              double noise, std::uint64_t seed,
                                              std::size_t n_test = 1000) {
    if (d == 0 || width == 0 || n_target == 0)
        throw std::invalid_argument("make_teacher_regression: invalid sizes");
    std::mt19937_64 rng(seed);
    RegressionTask task;
    task.teacher.W1 = random_normal(d, width, 0.0,
                                    1.0 / std::sqrt(static_cast<double>(d)),
                                    rng);
    task.teacher.W2 = random_normal(width, 1, 0.0,
                                    1.0 / std::sqrt(static_cast<double>(width)),
                                    rng);
    auto sample = [&](std::size_t n) {
        Dataset ds;
        ds.kind = TaskKind::regression;
        ds.seed = seed;
        ds.inputs = random_normal(n, d, 0.0, 1.0, rng);
        Tensor clean = task.teacher.predict(ds.inputs).detach();
        std::vector<double> y = clean.data();
        if (noise > 0.0) {
            std::normal_distribution<double> eps(0.0, noise);
            for (double& v : y) v += eps(rng);
        }
        ds.targets = Tensor(n, 1, std::move(y));
        return ds;
    };
    task.target = sample(n_target);
    task.test = sample(n_test);
    return task;
}

// ---- models ----------------------------------------------------------------

// Layer widths including input and output: {d, hidden..., out}.
using ModelShape = std::vector<std::size_t>;

inline ModelShape default_model_shape(std::size_t d, std::size_t out,
                                      std::size_t hidden = 64,
                                      std::size_t depth = 2) {
    ModelShape shape{d};
    for (std::size_t i = 0; i < depth; ++i) shape.push_back(hidden);
    shape.push_back(out);
    return shape;
}

// Dense MLP training on the pretrain set; the result becomes the frozen W0
// stack. steps == 0 returns the random initialization.
inline std::vector<Tensor> pretrain_base(const ModelShape& shape,
                                         const Dataset& pretrain, long steps,
                                         std::uint64_t seed,
                                         double lr = 1e-2) {
    if (shape.size() < 2) throw std::invalid_argument("model needs >= 2 dims");
    std::mt19937_64 rng(seed);
    std::vector<Tensor> weights;
    for (std::size_t i = 0; i + 1 < shape.size(); ++i) {
        const double s = 1.0 / std::sqrt(static_cast<double>(shape[i]));
        Tensor w = random_normal(shape[i], shape[i + 1], 0.0, s, rng);
        w.set_requires_grad(true);
        weights.push_back(w);
    }
    if (steps <= 0) return weights;

    AdamW opt({.lr = lr});
    for (long step = 0; step < steps; ++step) {
        Tensor h = pretrain.inputs;
        for (std::size_t i = 0; i < weights.size(); ++i) {
            h = matmul(h, weights[i]);
            if (i + 1 < weights.size()) h = relu(h);
        }
        Tensor loss = pretrain.kind == TaskKind::classification
                          ? softmax_cross_entropy(h, pretrain.labels)
                          : mse(h, pretrain.targets);
        if (!std::isfinite(loss.item()))
            throw NumericError("pretrain_base: training diverged");
        for (auto& w : weights) w.zero_grad();
        loss.backward();
        opt.step(weights);
    }
    return weights;
}

// An MLP whose every linear layer is adapter-wrapped; only (m, B, A) train.
struct AdapterModel {
    std::vector<AdapterLayer> layers;
    TaskKind kind = TaskKind::classification;

    Tensor forward(const Tensor& x) const {
        Tensor h = x;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            h = matmul(h, effective_weights(layers[i]));
            if (i + 1 < layers.size()) h = relu(h);
        }
        return h;
    }

    Tensor task_loss(const Dataset& batch) const {
        Tensor out = forward(batch.inputs);
        return batch.kind == TaskKind::classification
                   ? softmax_cross_entropy(out, batch.labels)
                   : mse(out, batch.targets);
    }
};

inline AdapterModel make_adapter_model(const std::vector<Tensor>& base_weights,
                                       TaskKind kind, std::size_t rank,
                                       double alpha, AdapterMode mode,
                                       std::uint64_t seed,
                                       bool detach_norm = false) {
    AdapterModel model;
    model.kind = kind;
    std::mt19937_64 rng(seed);
    for (const auto& w : base_weights) {
        // Narrow layers (e.g. the output head) cap the rank; keep the
        // configured alpha/r scaling so wider layers are unaffected.
        const std::size_t r =
            std::max<std::size_t>(1, std::min({rank, w.rows(), w.cols()}));
        model.layers.push_back(make_adapter(
            w, r, alpha * static_cast<double>(r) / static_cast<double>(rank),
            mode, rng, 0.0, detach_norm));
    }
    return model;
}

struct MetricRecord {
    double metric = 0.0;  // accuracy (classification) or MSE (regression)
    double loss = 0.0;
};

// Accuracy or MSE plus mean loss; mutates nothing.
inline MetricRecord evaluate(const AdapterModel& model, const Dataset& ds) {
    if (ds.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
    Tensor out = model.forward(ds.inputs).detach();
    MetricRecord rec;
    if (ds.kind == TaskKind::classification) {
        rec.loss = softmax_cross_entropy(out, ds.labels).item();
        std::size_t correct = 0;
        for (std::size_t i = 0; i < ds.size(); ++i) {
            std::size_t best = 0;
            for (std::size_t j = 1; j < out.cols(); ++j)
                if (out(i, j) > out(i, best)) best = j;
            if (static_cast<int>(best) == ds.labels[i]) ++correct;
        }
        rec.metric = static_cast<double>(correct) /
                     static_cast<double>(ds.size());
    } else {
        rec.loss = mse(out, ds.targets).item();
        rec.metric = rec.loss;
    }
    return rec;
}

// Higher-is-better view of the metric, used for early stopping.
inline double metric_score(TaskKind kind, const MetricRecord& rec) {
    return kind == TaskKind::classification ? rec.metric : -rec.metric;
}

// ---- deterministic batch sampling ------------------------------------------

class BatchSampler {
public:
    BatchSampler(const Dataset& ds, std::size_t batch_size, std::uint64_t seed)
        : ds_(&ds), batch_size_(std::min(batch_size, ds.size())), rng_(seed) {
        reshuffle();
    }

    Dataset next() {
        std::vector<std::size_t> idx;
        idx.reserve(batch_size_);
        for (std::size_t i = 0; i < batch_size_; ++i) {
            if (cursor_ == order_.size()) reshuffle();
            idx.push_back(order_[cursor_++]);
        }
        return ds_->subset(idx);
    }

private:
    void reshuffle() {
        order_.resize(ds_->size());
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        std::shuffle(order_.begin(), order_.end(), rng_);
        cursor_ = 0;
    }

    const Dataset* ds_;
    std::size_t batch_size_;
    std::mt19937_64 rng_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
};

// ---- columnar text serialization -------------------------------------------

inline void save_dataset(std::ostream& os, const Dataset& ds) {
    os << "bidora-dataset 1 " << to_string(ds.kind) << ' ' << ds.dim() << ' '
       << ds.size() << '\n';
    char buf[40];
    for (std::size_t i = 0; i < ds.size(); ++i) {
        for (std::size_t j = 0; j < ds.dim(); ++j) {
            std::snprintf(buf, sizeof buf, "%a ", ds.inputs(i, j));
            os << buf;
        }
        if (ds.kind == TaskKind::classification) {
            os << ds.labels[i];
        } else {
            for (std::size_t j = 0; j < ds.targets.cols(); ++j) {
                std::snprintf(buf, sizeof buf, "%a", ds.targets(i, j));
                os << buf << (j + 1 < ds.targets.cols() ? " " : "");
            }
        }
        os << '\n';
    }
}

inline Dataset load_dataset(std::istream& is) {
    std::string magic, kind_str;
    int version = 0;
    std::size_t d = 0, n = 0;
    if (!(is >> magic >> version >> kind_str >> d >> n) ||
        magic != "bidora-dataset" || version != 1)
        throw std::runtime_error("dataset: bad header");
    Dataset ds;
    ds.kind = kind_str == "classification" ? TaskKind::classification
                                           : TaskKind::regression;
    std::vector<double> x(n * d);
    std::vector<double> y;
    ds.labels.clear();
    std::string tok;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            is >> tok;
            x[i * d + j] = std::strtod(tok.c_str(), nullptr);
        }
        if (ds.kind == TaskKind::classification) {
            int label;
            is >> label;
            ds.labels.push_back(label);
        } else {
            is >> tok;
            y.push_back(std::strtod(tok.c_str(), nullptr));
        }
    }
    if (!is) throw std::runtime_error("dataset: truncated");
    ds.inputs = Tensor(n, d, std::move(x));
    if (ds.kind == TaskKind::regression) ds.targets = Tensor(n, 1, std::move(y));
    return ds;
}

}  // namespace bidora
