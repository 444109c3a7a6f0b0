// SPDX-License-Identifier: Apache-2.0
//
// Dense 2-D tensors with tape-based reverse-mode autodiff.
// Everything is double precision, row-major. Each op appends a node to the
// graph; backward() walks the nodes once in reverse topological order.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace bidora {

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct NumericError : std::domain_error {
    using std::domain_error::domain_error;
};

namespace detail {

struct Node {
    std::size_t rows = 0, cols = 0;
    std::vector<double> value;
    std::vector<double> grad;   // allocated lazily by backward()
    bool requires_grad = false;
    bool backward_spent = false;  // a node's backward may run at most once
    std::vector<std::shared_ptr<Node>> parents;
    // Accumulates this node's grad into the parents' grads.
    std::function<void(Node&)> backprop;

    std::size_t size() const { return rows * cols; }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

inline void check_finite(const std::vector<double>& v, const char* where) {
    for (double x : v)
        if (!std::isfinite(x))
            throw NumericError(std::string("non-finite value in ") + where);
}

}  // namespace detail

class Tensor {
public:
    Tensor() : node_(std::make_shared<detail::Node>()) {}

    Tensor(std::size_t rows, std::size_t cols, double fill = 0.0,
           bool requires_grad = false)
        : node_(std::make_shared<detail::Node>()) {
        if (!std::isfinite(fill))
            throw NumericError("non-finite value in tensor constructor");
        node_->rows = rows;
        node_->cols = cols;
        node_->value.assign(rows * cols, fill);
        node_->requires_grad = requires_grad;
    }

    Tensor(std::size_t rows, std::size_t cols, std::vector<double> data,
           bool requires_grad = false)
        : node_(std::make_shared<detail::Node>()) {
        if (data.size() != rows * cols)
            throw ShapeError("tensor data length does not match shape");
        detail::check_finite(data, "tensor constructor");
        node_->rows = rows;
        node_->cols = cols;
        node_->value = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return Tensor(1, 1, {v}, requires_grad);
    }

    static Tensor identity(std::size_t n) {
        Tensor t(n, n);
        for (std::size_t i = 0; i < n; ++i) t.node_->value[i * n + i] = 1.0;
        return t;
    }

    std::size_t rows() const { return node_->rows; }
    std::size_t cols() const { return node_->cols; }
    std::size_t size() const { return node_->size(); }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    double operator()(std::size_t r, std::size_t c) const {
        return node_->value[r * node_->cols + c];
    }
    double item() const {
        if (size() != 1) throw ShapeError("item() on non-scalar tensor");
        return node_->value[0];
    }

    const std::vector<double>& data() const { return node_->value; }
    // In-place mutation of the raw buffer; used by optimizers between passes.
    std::vector<double>& mutable_data() { return node_->value; }

    const std::vector<double>& grad() const {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

    // A gradient-free copy sharing no state with this tensor.
    Tensor detach() const {
        return Tensor(rows(), cols(), node_->value, false);
    }

    // Runs reverse-mode accumulation from this scalar. The sub-graph is
    // consumed: calling backward twice through the same nodes is an error.
    void backward() const {
        if (size() != 1) throw ShapeError("backward() requires a scalar root");
        if (node_->backward_spent)
            throw NumericError("backward() called twice on the same graph");
        std::vector<detail::Node*> order;
        std::unordered_set<detail::Node*> seen;
        topo(node_.get(), seen, order);
        node_->ensure_grad();
        node_->grad[0] = 1.0;
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            detail::Node* n = *it;
            n->backward_spent = true;
            if (n->backprop) {
                detail::check_finite(n->grad, "backward");
                n->backprop(*n);
            }
        }
    }

    detail::Node* node() const { return node_.get(); }

private:
    friend Tensor make_op(std::size_t, std::size_t, std::vector<double>,
                          std::vector<Tensor>,
                          std::function<void(detail::Node&)>);
    std::shared_ptr<detail::Node> node_;

    static void topo(detail::Node* n, std::unordered_set<detail::Node*>& seen,
                     std::vector<detail::Node*>& order) {
        if (seen.count(n)) return;
        seen.insert(n);
        for (auto& p : n->parents) topo(p.get(), seen, order);
        order.push_back(n);
    }
};

inline Tensor make_op(std::size_t rows, std::size_t cols,
                      std::vector<double> value, std::vector<Tensor> inputs,
                      std::function<void(detail::Node&)> backprop) {
    detail::check_finite(value, "op forward");
    Tensor out;
    out.node_->rows = rows;
    out.node_->cols = cols;
    out.node_->value = std::move(value);
    bool rg = false;
    for (auto& t : inputs) {
        rg = rg || t.requires_grad() || t.node()->backprop;
        out.node_->parents.push_back(t.node_);
    }
    out.node_->requires_grad = rg;
    if (rg) out.node_->backprop = std::move(backprop);
    return out;
}

// ---- ops ------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeError("add: shape mismatch");
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + b.data()[i];
    return make_op(a.rows(), a.cols(), std::move(v), {a, b},
                   [](detail::Node& n) {
                       for (int k = 0; k < 2; ++k) {
                           auto& p = *n.parents[k];
                           p.ensure_grad();
                           for (std::size_t i = 0; i < n.grad.size(); ++i)
                               p.grad[i] += n.grad[i];
                       }
                   });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeError("sub: shape mismatch");
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] - b.data()[i];
    return make_op(a.rows(), a.cols(), std::move(v), {a, b},
                   [](detail::Node& n) {
                       auto& pa = *n.parents[0];
                       auto& pb = *n.parents[1];
                       pa.ensure_grad();
                       pb.ensure_grad();
                       for (std::size_t i = 0; i < n.grad.size(); ++i) {
                           pa.grad[i] += n.grad[i];
                           pb.grad[i] -= n.grad[i];
                       }
                   });
}

inline Tensor scale(const Tensor& a, double s) {
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * s;
    return make_op(a.rows(), a.cols(), std::move(v), {a},
                   [s](detail::Node& n) {
                       auto& p = *n.parents[0];
                       p.ensure_grad();
                       for (std::size_t i = 0; i < n.grad.size(); ++i)
                           p.grad[i] += s * n.grad[i];
                   });
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeError("hadamard: shape mismatch");
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * b.data()[i];
    return make_op(a.rows(), a.cols(), std::move(v), {a, b},
                   [](detail::Node& n) {
                       auto& pa = *n.parents[0];
                       auto& pb = *n.parents[1];
                       pa.ensure_grad();
                       pb.ensure_grad();
                       for (std::size_t i = 0; i < n.grad.size(); ++i) {
                           pa.grad[i] += pb.value[i] * n.grad[i];
                           pb.grad[i] += pa.value[i] * n.grad[i];
                       }
                   });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows()) throw ShapeError("matmul: inner dims differ");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<double> v(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t l = 0; l < k; ++l) {
            const double ail = a.data()[i * k + l];
            for (std::size_t j = 0; j < n; ++j)
                v[i * n + j] += ail * b.data()[l * n + j];
        }
    return make_op(m, n, std::move(v), {a, b}, [m, k, n](detail::Node& nd) {
        auto& pa = *nd.parents[0];
        auto& pb = *nd.parents[1];
        pa.ensure_grad();
        pb.ensure_grad();
        // dA += g . B^T ; dB += A^T . g
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const double g = nd.grad[i * n + j];
                for (std::size_t l = 0; l < k; ++l) {
                    pa.grad[i * k + l] += g * pb.value[l * n + j];
                    pb.grad[l * n + j] += pa.value[i * k + l] * g;
                }
            }
    });
}

inline Tensor transpose(const Tensor& a) {
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> v(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) v[j * m + i] = a.data()[i * n + j];
    return make_op(n, m, std::move(v), {a}, [m, n](detail::Node& nd) {
        auto& p = *nd.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
                p.grad[i * n + j] += nd.grad[j * m + i];
    });
}

inline Tensor sum(const Tensor& a) {
    double s = std::accumulate(a.data().begin(), a.data().end(), 0.0);
    return make_op(1, 1, {s}, {a}, [](detail::Node& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        for (double& g : p.grad) g += n.grad[0];
    });
}

inline Tensor mean(const Tensor& a) {
    if (a.size() == 0) throw ShapeError("mean of empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

inline Tensor frobenius_norm_sq(const Tensor& a) {
    double s = 0.0;
    for (double x : a.data()) s += x * x;
    return make_op(1, 1, {s}, {a}, [](detail::Node& n) {
        auto& p = *n.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < p.grad.size(); ++i)
            p.grad[i] += 2.0 * p.value[i] * n.grad[0];
    });
}

inline Tensor relu(const Tensor& a) {
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::max(0.0, a.data()[i]);
    return make_op(a.rows(), a.cols(), std::move(v), {a},
                   [](detail::Node& n) {
                       auto& p = *n.parents[0];
                       p.ensure_grad();
                       for (std::size_t i = 0; i < n.grad.size(); ++i)
                           if (p.value[i] > 0.0) p.grad[i] += n.grad[i];
                   });
}

// Euclidean norm of each column, returned as a 1 x cols row. Columns with
// norm below 1e-12 are rejected rather than divided through later.
inline Tensor column_norms(const Tensor& w) {
    if (w.size() == 0) throw ShapeError("column_norms of empty tensor");
    const std::size_t m = w.rows(), n = w.cols();
    std::vector<double> v(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            const double x = w.data()[i * n + j];
            s += x * x;
        }
        v[j] = std::sqrt(s);
        if (v[j] < 1e-12)
            throw NumericError("column_norms: degenerate column " +
                               std::to_string(j));
    }
    return make_op(1, n, std::move(v), {w}, [m, n](detail::Node& nd) {
        auto& p = *nd.parents[0];
        p.ensure_grad();
        for (std::size_t j = 0; j < n; ++j) {
            const double g = nd.grad[j] / nd.value[j];
            for (std::size_t i = 0; i < m; ++i)
                p.grad[i * n + j] += g * p.value[i * n + j];
        }
    });
}

// Scales column j of `a` by s(0, j).
inline Tensor colwise_mul(const Tensor& a, const Tensor& s) {
    if (s.rows() != 1 || s.cols() != a.cols())
        throw ShapeError("colwise_mul: scale must be 1 x cols");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            v[i * n + j] = a.data()[i * n + j] * s.data()[j];
    return make_op(m, n, std::move(v), {a, s}, [m, n](detail::Node& nd) {
        auto& pa = *nd.parents[0];
        auto& ps = *nd.parents[1];
        pa.ensure_grad();
        ps.ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const double g = nd.grad[i * n + j];
                pa.grad[i * n + j] += g * ps.value[j];
                ps.grad[j] += g * pa.value[i * n + j];
            }
    });
}

// Elementwise reciprocal; rejects entries below 1e-12 in magnitude.
inline Tensor reciprocal(const Tensor& a) {
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (std::abs(a.data()[i]) < 1e-12)
            throw NumericError("reciprocal of near-zero entry");
        v[i] = 1.0 / a.data()[i];
    }
    return make_op(a.rows(), a.cols(), std::move(v), {a},
                   [](detail::Node& n) {
                       auto& p = *n.parents[0];
                       p.ensure_grad();
                       for (std::size_t i = 0; i < n.grad.size(); ++i)
                           p.grad[i] -= n.grad[i] * n.value[i] * n.value[i];
                   });
}

// Mean softmax cross-entropy over the batch. logits: N x C, one target class
// index per row.
inline Tensor softmax_cross_entropy(const Tensor& logits,
                                    const std::vector<int>& targets) {
    const std::size_t n = logits.rows(), c = logits.cols();
    if (targets.size() != n)
        throw ShapeError("softmax_cross_entropy: target count != batch size");
    std::vector<double> probs(n * c);
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= c)
            throw ShapeError("softmax_cross_entropy: invalid class index");
        double mx = logits.data()[i * c];
        for (std::size_t j = 1; j < c; ++j)
            mx = std::max(mx, logits.data()[i * c + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            probs[i * c + j] = std::exp(logits.data()[i * c + j] - mx);
            z += probs[i * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= z;
        loss -= std::log(probs[i * c + targets[i]]);
    }
    loss /= static_cast<double>(n);
    return make_op(
        1, 1, {loss}, {logits},
        [n, c, probs = std::move(probs), targets](detail::Node& nd) {
            auto& p = *nd.parents[0];
            p.ensure_grad();
            const double g = nd.grad[0] / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < c; ++j) {
                    double d = probs[i * c + j];
                    if (static_cast<std::size_t>(targets[i]) == j) d -= 1.0;
                    p.grad[i * c + j] += g * d;
                }
        });
}

// Mean squared error over all entries of pred vs target.
inline Tensor mse(const Tensor& pred, const Tensor& target) {
    if (pred.rows() != target.rows() || pred.cols() != target.cols())
        throw ShapeError("mse: shape mismatch");
    return mean(hadamard(sub(pred, target.detach()),
                         sub(pred, target.detach())));
}

// ---- gradient checking ----------------------------------------------------

// Max relative error between reverse-mode gradients and central finite
// differences (h = 1e-5) of a scalar-valued function of the given parameters.
inline double grad_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& f,
    std::vector<Tensor> params, double h = 1e-5) {
    for (auto& p : params) {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    Tensor out = f(params);
    out.backward();
    double worst = 0.0;
    for (auto& p : params) {
        const std::vector<double> analytic = p.grad();
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double orig = p.data()[i];
            p.mutable_data()[i] = orig + h;
            const double fp = f(params).item();
            p.mutable_data()[i] = orig - h;
            const double fm = f(params).item();
            p.mutable_data()[i] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            const double err =
                std::abs(analytic[i] - numeric) / (std::abs(numeric) + 1e-12);
            worst = std::max(worst, err);
        }
    }
    return worst;
}

// ---- deterministic random fills -------------------------------------------

inline Tensor random_uniform(std::size_t rows, std::size_t cols, double lo,
                             double hi, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(rows * cols);
    for (double& x : v) x = dist(rng);
    return Tensor(rows, cols, std::move(v));
}

inline Tensor random_normal(std::size_t rows, std::size_t cols, double mean,
                            double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(mean, stddev);
    std::vector<double> v(rows * cols);
    for (double& x : v) x = dist(rng);
    return Tensor(rows, cols, std::move(v));
}

}  // namespace bidora
