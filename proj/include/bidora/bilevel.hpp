// SPDX-License-Identifier: Apache-2.0
//
// The bi-level trainer: alternating magnitude/direction optimization with a
// one-step-unrolled hypergradient whose curvature term is approximated by a
// central finite difference, plus the retraining phase and ablation modes.
#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "bidora/adapter.hpp"
#include "bidora/analysis.hpp"
#include "bidora/optim.hpp"
#include "bidora/tasks.hpp"

namespace bidora {

enum class BilevelMode { full, no_retrain, xi_zero, no_reg, retrain_magnitude };

inline const char* to_string(BilevelMode m) {
    switch (m) {
        case BilevelMode::full: return "full";
        case BilevelMode::no_retrain: return "no_retrain";
        case BilevelMode::xi_zero: return "xi_zero";
        case BilevelMode::no_reg: return "no_reg";
        case BilevelMode::retrain_magnitude: return "retrain_magnitude";
    }
    return "full";
}

inline BilevelMode bilevel_mode_from_string(const std::string& s) {
    if (s == "full") return BilevelMode::full;
    if (s == "no_retrain") return BilevelMode::no_retrain;
    if (s == "xi_zero") return BilevelMode::xi_zero;
    if (s == "no_reg") return BilevelMode::no_reg;
    if (s == "retrain_magnitude") return BilevelMode::retrain_magnitude;
    throw std::invalid_argument("unknown bilevel mode: " + s);
}

struct BilevelConfig {
    double xi = 1e-3;          // lower-level rate used in the unroll
    double eps0 = 0.01;        // finite-difference probe scale numerator
    double gamma = 1e-5;       // Gram regularizer weight
    double upper_lr = 1e-3;
    double lower_lr = 1e-3;
    double retrain_lr = 1e-3;  // defaults to lower_lr at config load
    double upper_wd = 0.0;
    double lower_wd = 0.0;
    double split_ratio = 0.8;
    long search_steps = 1000;
    long retrain_steps = 1000;
    long eval_every = 100;     // upper-metric evaluation cadence
    int patience = 5;          // evaluations without improvement before stop
    std::size_t batch_size = 32;
    double warmup_ratio = 0.06;
    BilevelMode mode = BilevelMode::full;
    bool plain_sgd = false;        // SGD instead of AdamW (oracle problems)
    bool retrain_from_scratch = false;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(split_ratio > 0.0 && split_ratio <= 1.0))
            throw std::invalid_argument("split_ratio must be in (0, 1]");
        if (upper_lr < 0.0 || lower_lr < 0.0 || retrain_lr < 0.0)
            throw std::invalid_argument("learning rates must be >= 0");
        if (gamma < 0.0) throw std::invalid_argument("gamma must be >= 0");
        if (eps0 <= 0.0) throw std::invalid_argument("eps0 must be > 0");
        if (batch_size == 0) throw std::invalid_argument("batch_size >= 1");
    }
};

struct TrajectoryRecord {
    long step = 0;
    std::string phase;  // "search" | "retrain"
    double loss_tr = 0.0;
    double loss_val = 0.0;
    double reg_value = 0.0;
    double metric = 0.0;       // lower-loop batch metric (acc or -mse)
    double outer_metric = 0.0;  // upper-loop batch metric, search phase only
    bool has_outer = false;
    double val_metric = 0.0;   // upper-level eval metric, at eval points
    bool has_eval = false;
    std::vector<WdaPoint> wda;  // per-layer snapshot, at eval points
};

using TrajectoryLog = std::vector<TrajectoryRecord>;

// ---- generic hypergradient --------------------------------------------------
// Works on bare parameter vectors and scalar loss closures so the same code
// path serves both the adapter trainer and the analytic oracle problems.

using LossFn = std::function<Tensor()>;

namespace detail {

inline std::vector<std::vector<double>> collect_grads(
    const LossFn& loss, std::vector<Tensor>& wrt,
    std::vector<Tensor>* also_zero = nullptr) {
    for (auto& p : wrt) p.zero_grad();
    if (also_zero)
        for (auto& p : *also_zero) p.zero_grad();
    Tensor l = loss();
    if (!std::isfinite(l.item())) throw NumericError("non-finite loss");
    l.backward();
    std::vector<std::vector<double>> grads;
    grads.reserve(wrt.size());
    for (auto& p : wrt) grads.push_back(p.grad());
    return grads;
}

inline double l2_norm(const std::vector<std::vector<double>>& g) {
    double s = 0.0;
    for (const auto& v : g)
        for (double x : v) s += x * x;
    return std::sqrt(s);
}

}  // namespace detail

struct HypergradientTerms {
    // d/dM L_val at the one-step-unrolled point.
    std::vector<std::vector<double>> direct;
    // Central-difference estimate of the mixed-Hessian-vector product
    // [d/dM grad_V L_tr] . grad_Vbar L_val.
    std::vector<std::vector<double>> curvature;
    double probe_eps = 0.0;
    double val_grad_norm = 0.0;
};

// Computes both terms of the unrolled hypergradient. Lower parameters are
// restored bit-exactly before returning.
inline HypergradientTerms hypergradient_terms(std::vector<Tensor>& lower,
                                              std::vector<Tensor>& upper,
                                              const LossFn& loss_tr,
                                              const LossFn& loss_val,
                                              double xi, double eps0) {
    HypergradientTerms out;
    const std::size_t nl = lower.size(), nu = upper.size();
    std::vector<std::vector<double>> saved;
    saved.reserve(nl);
    for (auto& p : lower) saved.push_back(p.data());

    auto restore = [&] {
        for (std::size_t i = 0; i < nl; ++i) lower[i].mutable_data() = saved[i];
    };

    // Vbar = V - xi * grad_V L_tr
    if (xi != 0.0) {
        auto g_tr = detail::collect_grads(loss_tr, lower, &upper);
        for (std::size_t i = 0; i < nl; ++i) {
            auto& d = lower[i].mutable_data();
            for (std::size_t j = 0; j < d.size(); ++j)
                d[j] = saved[i][j] - xi * g_tr[i][j];
        }
    }

    // First term and the validation gradient at Vbar in one backward pass.
    {
        for (auto& p : lower) p.zero_grad();
        for (auto& p : upper) p.zero_grad();
        Tensor l = loss_val();
        if (!std::isfinite(l.item())) throw NumericError("non-finite loss");
        l.backward();
        out.direct.reserve(nu);
        for (auto& p : upper) out.direct.push_back(p.grad());
    }
    std::vector<std::vector<double>> g_val;
    g_val.reserve(nl);
    for (auto& p : lower) g_val.push_back(p.grad());
    out.val_grad_norm = detail::l2_norm(g_val);

    out.curvature.resize(nu);
    for (std::size_t i = 0; i < nu; ++i)
        out.curvature[i].assign(upper[i].size(), 0.0);

    // Skip the curvature probes at a validation stationary point; the true
    // term is dominated by roundoff there.
    if (xi != 0.0 && out.val_grad_norm >= 1e-12) {
        const double eps = eps0 / out.val_grad_norm;
        out.probe_eps = eps;
        // V+ probe
        for (std::size_t i = 0; i < nl; ++i) {
            auto& d = lower[i].mutable_data();
            for (std::size_t j = 0; j < d.size(); ++j)
                d[j] = saved[i][j] + eps * g_val[i][j];
        }
        auto gp = detail::collect_grads(loss_tr, upper, &lower);
        // V- probe
        for (std::size_t i = 0; i < nl; ++i) {
            auto& d = lower[i].mutable_data();
            for (std::size_t j = 0; j < d.size(); ++j)
                d[j] = saved[i][j] - eps * g_val[i][j];
        }
        auto gm = detail::collect_grads(loss_tr, upper, &lower);
        for (std::size_t i = 0; i < nu; ++i)
            for (std::size_t j = 0; j < out.curvature[i].size(); ++j)
                out.curvature[i][j] = (gp[i][j] - gm[i][j]) / (2.0 * eps);
    }

    restore();
    for (std::size_t i = 0; i < nl; ++i)
        if (lower[i].data() != saved[i])
            throw NumericError("hypergradient: lower-parameter restore failed");
    return out;
}

// Full estimator: direct - xi * curvature.
inline std::vector<std::vector<double>> hypergradient(
    std::vector<Tensor>& lower, std::vector<Tensor>& upper,
    const LossFn& loss_tr, const LossFn& loss_val, double xi, double eps0) {
    auto terms = hypergradient_terms(lower, upper, loss_tr, loss_val, xi, eps0);
    std::vector<std::vector<double>> hg = std::move(terms.direct);
    for (std::size_t i = 0; i < hg.size(); ++i)
        for (std::size_t j = 0; j < hg[i].size(); ++j)
            hg[i][j] -= xi * terms.curvature[i][j];
    return hg;
}

// ---- analytic oracle ---------------------------------------------------------
// Quadratic bilevel instance with closed-form inner solution:
//   L_tr(v, m)  = 1/2 ||v - C m||^2,   so V*(M) = C M
//   L_val(v)    = 1/2 ||v - t||^2
// Exact hypergradient: d/dM L_val(V*(M)) = C^T (C M - t).
struct QuadraticBilevelProblem {
    Tensor C;  // p x q
    Tensor t;  // p x 1

    Tensor inner_optimum(const Tensor& m_vec) const { return matmul(C, m_vec); }

    Tensor loss_tr(const Tensor& v, const Tensor& m_vec) const {
        return scale(frobenius_norm_sq(sub(v, matmul(C, m_vec))), 0.5);
    }
    Tensor loss_val(const Tensor& v) const {
        return scale(frobenius_norm_sq(sub(v, t)), 0.5);
    }
};

inline std::vector<double> exact_hypergradient_oracle(
    const QuadraticBilevelProblem& prob, const Tensor& m_vec) {
    Tensor residual = sub(matmul(prob.C, m_vec), prob.t);
    return matmul(transpose(prob.C), residual).data();
}

// ---- trainer steps -----------------------------------------------------------

namespace detail {

inline void apply_grads(std::vector<Tensor>& params,
                        const std::vector<std::vector<double>>& grads) {
    for (std::size_t i = 0; i < params.size(); ++i) {
        params[i].zero_grad();
        auto* node = params[i].node();
        node->ensure_grad();
        node->grad = grads[i];
    }
}

inline void sgd_step(std::vector<Tensor>& params, double lr) {
    for (auto& p : params) {
        auto& d = p.mutable_data();
        const auto& g = p.grad();
        for (std::size_t j = 0; j < d.size(); ++j) d[j] -= lr * g[j];
    }
}

}  // namespace detail

class BilevelTrainer {
public:
    BilevelTrainer(AdapterModel& model, BilevelConfig cfg)
        : model_(&model), cfg_(std::move(cfg)) {
        cfg_.validate();
        lower_ = lower_group(model.layers).members;
        upper_ = upper_group(model.layers).members;
        lower_opt_ = AdamW({.lr = cfg_.lower_lr, .weight_decay = cfg_.lower_wd});
        upper_opt_ = AdamW({.lr = cfg_.upper_lr, .weight_decay = cfg_.upper_wd});
        for (const auto& l : model.layers)
            initial_merged_.push_back(merge_weights(l));
    }

    const BilevelConfig& config() const { return cfg_; }
    std::vector<Tensor>& lower_params() { return lower_; }
    std::vector<Tensor>& upper_params() { return upper_; }
    const TrajectoryLog& log() const { return log_; }

    Tensor training_loss(const Dataset& batch) const {
        Tensor loss = model_->task_loss(batch);
        if (cfg_.mode != BilevelMode::no_reg && cfg_.gamma > 0.0 &&
            !model_->layers.empty() &&
            model_->layers.front().mode == AdapterMode::dora)
            loss = add(loss, scale(gram_regularizer(model_->layers),
                                   cfg_.gamma));
        return loss;
    }

    // One step on the direction parameters against L_tr; returns the
    // pre-step loss.
    double lower_step(const Dataset& batch_tr, double lr_scale = 1.0) {
        for (auto& p : lower_) p.zero_grad();
        for (auto& p : upper_) p.zero_grad();
        Tensor loss = training_loss(batch_tr);
        const double value = loss.item();
        if (!std::isfinite(value)) throw NumericError("lower_step: loss");
        loss.backward();
        if (cfg_.plain_sgd)
            detail::sgd_step(lower_, cfg_.lower_lr * lr_scale);
        else
            lower_opt_.step(lower_, lr_scale);
        return value;
    }

    // One step on the magnitudes using the unrolled hypergradient (or the
    // direct validation gradient in xi_zero mode); returns the pre-step
    // validation loss.
    double upper_step(const Dataset& batch_tr, const Dataset& batch_val,
                      double lr_scale = 1.0) {
        const double val_loss = model_->task_loss(batch_val).detach().item();
        const double xi = cfg_.mode == BilevelMode::xi_zero ? 0.0 : cfg_.xi;
        auto hg = hypergradient(
            lower_, upper_, [&] { return training_loss(batch_tr); },
            [&] { return model_->task_loss(batch_val); }, xi, cfg_.eps0);
        detail::apply_grads(upper_, hg);
        if (cfg_.plain_sgd)
            detail::sgd_step(upper_, cfg_.upper_lr * lr_scale);
        else
            upper_opt_.step(upper_, lr_scale);
        return val_loss;
    }

    // Algorithm: alternate one upper and one lower step per outer iteration
    // until the upper-level metric stalls or the budget runs out.
    void search_phase(const Dataset& train, const Dataset& val,
                      const Dataset* eval_set = nullptr) {
        BatchSampler tr_sampler(train, cfg_.batch_size, cfg_.seed * 7919 + 1);
        std::optional<BatchSampler> val_sampler;
        const bool upper_active = val.size() > 0 && cfg_.upper_lr > 0.0;
        if (val.size() > 0)
            val_sampler.emplace(val, cfg_.batch_size, cfg_.seed * 7919 + 2);
        const Dataset* eval_ds = eval_set ? eval_set
                                          : (val.size() > 0 ? &val : &train);
        double best = -std::numeric_limits<double>::infinity();
        int stale = 0;
        for (long step = 1; step <= cfg_.search_steps; ++step) {
            const double lr_scale = linear_warmup_scale(step, cfg_.search_steps,
                                                        cfg_.warmup_ratio);
            TrajectoryRecord rec;
            rec.step = step;
            rec.phase = "search";
            Dataset batch_tr = tr_sampler.next();
            if (upper_active) {
                Dataset batch_val = val_sampler->next();
                rec.loss_val = upper_step(batch_tr, batch_val, lr_scale);
                rec.outer_metric = batch_metric(batch_val);
                rec.has_outer = true;
            }
            rec.loss_tr = lower_step(batch_tr, lr_scale);
            rec.reg_value = current_reg();
            rec.metric = batch_metric(batch_tr);
            if (step % cfg_.eval_every == 0 || step == cfg_.search_steps) {
                MetricRecord ev = evaluate(*model_, *eval_ds);
                rec.val_metric = metric_score(model_->kind, ev);
                rec.has_eval = true;
                rec.wda = wda_snapshot(step);
                log_.push_back(rec);
                if (rec.val_metric > best + 1e-12) {
                    best = rec.val_metric;
                    stale = 0;
                } else if (++stale >= cfg_.patience) {
                    break;
                }
                continue;
            }
            log_.push_back(rec);
        }
    }

    // Direction-only training on the union split (magnitude-only in
    // retrain_magnitude mode), early-stopped on a held-out test metric.
    void retrain_phase(const Dataset& union_data,
                       const Dataset* heldout_test = nullptr) {
        if (cfg_.mode == BilevelMode::no_retrain) return;
        std::vector<Tensor>& params =
            cfg_.mode == BilevelMode::retrain_magnitude ? upper_ : lower_;
        if (cfg_.retrain_from_scratch &&
            cfg_.mode != BilevelMode::retrain_magnitude)
            reinit_lower();
        AdamW opt({.lr = cfg_.retrain_lr,
                   .weight_decay = cfg_.mode == BilevelMode::retrain_magnitude
                                       ? cfg_.upper_wd
                                       : cfg_.lower_wd});
        BatchSampler sampler(union_data, cfg_.batch_size,
                             cfg_.seed * 7919 + 3);
        double best = -std::numeric_limits<double>::infinity();
        int stale = 0;
        const long base_step = log_.empty() ? 0 : log_.back().step;
        for (long step = 1; step <= cfg_.retrain_steps; ++step) {
            const double lr_scale = linear_warmup_scale(
                step, cfg_.retrain_steps, cfg_.warmup_ratio);
            Dataset batch = sampler.next();
            for (auto& p : lower_) p.zero_grad();
            for (auto& p : upper_) p.zero_grad();
            Tensor loss = training_loss(batch);
            const double value = loss.item();
            if (!std::isfinite(value)) throw NumericError("retrain: loss");
            loss.backward();
            // Only the chosen group moves; the other keeps its searched value.
            if (cfg_.mode == BilevelMode::retrain_magnitude)
                for (auto& p : lower_) p.zero_grad();
            else
                for (auto& p : upper_) p.zero_grad();
            if (cfg_.plain_sgd)
                detail::sgd_step(params, cfg_.retrain_lr * lr_scale);
            else
                opt.step(params, lr_scale);

            TrajectoryRecord rec;
            rec.step = base_step + step;
            rec.phase = "retrain";
            rec.loss_tr = value;
            rec.reg_value = current_reg();
            rec.metric = batch_metric(batch);
            if (step % cfg_.eval_every == 0 || step == cfg_.retrain_steps) {
                const Dataset* eval_ds = heldout_test ? heldout_test
                                                      : &union_data;
                MetricRecord ev = evaluate(*model_, *eval_ds);
                rec.val_metric = metric_score(model_->kind, ev);
                rec.has_eval = true;
                rec.wda = wda_snapshot(rec.step);
                log_.push_back(rec);
                if (heldout_test) {
                    if (rec.val_metric > best + 1e-12) {
                        best = rec.val_metric;
                        stale = 0;
                    } else if (++stale >= cfg_.patience) {
                        break;
                    }
                }
                continue;
            }
            log_.push_back(rec);
        }
    }

    // Full Algorithm run: search on the split, then retrain on the union.
    void run(const SplitPair& splits, const Dataset* heldout_test = nullptr) {
        search_phase(splits.train, splits.val);
        if (cfg_.mode != BilevelMode::no_retrain)
            retrain_phase(Dataset::concat(splits.train, splits.val),
                          heldout_test);
    }

    std::vector<WdaPoint> wda_snapshot(long step) const {
        std::vector<WdaPoint> points;
        for (std::size_t i = 0; i < model_->layers.size(); ++i) {
            Tensor merged = merge_weights(model_->layers[i]);
            WdaPoint p;
            p.layer = i;
            p.step = step;
            p.delta_m = delta_magnitude(initial_merged_[i], merged);
            p.delta_d = delta_direction(initial_merged_[i], merged);
            points.push_back(p);
        }
        return points;
    }

private:
    double current_reg() const {
        if (model_->layers.empty() ||
            model_->layers.front().mode != AdapterMode::dora)
            return 0.0;
        return gram_regularizer(model_->layers).detach().item();
    }

    double batch_metric(const Dataset& batch) const {
        return metric_score(model_->kind, evaluate(*model_, batch));
    }

    void reinit_lower() {
        std::mt19937_64 rng(cfg_.seed * 7919 + 4);
        for (auto& layer : model_->layers) {
            std::fill(layer.B.mutable_data().begin(),
                      layer.B.mutable_data().end(), 0.0);
            const double bound =
                1.0 / std::sqrt(static_cast<double>(layer.rank));
            std::uniform_real_distribution<double> dist(-bound, bound);
            for (double& v : layer.A.mutable_data()) v = dist(rng);
        }
    }

    AdapterModel* model_;
    BilevelConfig cfg_;
    std::vector<Tensor> lower_, upper_;
    std::vector<Tensor> initial_merged_;
    AdamW lower_opt_, upper_opt_;
    TrajectoryLog log_;
};

// Single-loop baseline: everything trains together on all the data, the way
// plain LoRA / DoRA fine-tuning does.
inline TrajectoryLog single_loop_train(AdapterModel& model,
                                       const Dataset& train,
                                       const BilevelConfig& cfg,
                                       const Dataset* eval_set = nullptr) {
    cfg.validate();
    std::vector<Tensor> params = lower_group(model.layers).members;
    for (auto& m : upper_group(model.layers).members) params.push_back(m);
    AdamW opt({.lr = cfg.lower_lr, .weight_decay = cfg.lower_wd});
    BatchSampler sampler(train, cfg.batch_size, cfg.seed * 7919 + 1);
    std::vector<AdapterLayer>& layers = model.layers;
    std::vector<Tensor> init_merged;
    for (const auto& l : layers) init_merged.push_back(merge_weights(l));
    TrajectoryLog log;
    for (long step = 1; step <= cfg.search_steps; ++step) {
        const double lr_scale =
            linear_warmup_scale(step, cfg.search_steps, cfg.warmup_ratio);
        Dataset batch = sampler.next();
        for (auto& p : params) p.zero_grad();
        Tensor loss = model.task_loss(batch);
        if (cfg.mode != BilevelMode::no_reg && cfg.gamma > 0.0 &&
            !layers.empty() && layers.front().mode == AdapterMode::dora)
            loss = add(loss, scale(gram_regularizer(layers), cfg.gamma));
        const double value = loss.item();
        if (!std::isfinite(value)) throw NumericError("single_loop: loss");
        loss.backward();
        opt.step(params, lr_scale);
        TrajectoryRecord rec;
        rec.step = step;
        rec.phase = "search";
        rec.loss_tr = value;
        rec.metric = metric_score(model.kind, evaluate(model, batch));
        if (step % cfg.eval_every == 0 || step == cfg.search_steps) {
            rec.has_eval = true;
            const Dataset* ev = eval_set ? eval_set : &train;
            rec.val_metric = metric_score(model.kind, evaluate(model, *ev));
            for (std::size_t i = 0; i < layers.size(); ++i) {
                Tensor merged = merge_weights(layers[i]);
                rec.wda.push_back({i, step,
                                   delta_magnitude(init_merged[i], merged),
                                   delta_direction(init_merged[i], merged)});
            }
        }
        log.push_back(rec);
    }
    return log;
}

}  // namespace bidora
