// SPDX-License-Identifier: Apache-2.0
//
// AdamW with decoupled weight decay, plus the linear warmup/decay schedule.
#pragma once

#include <cmath>
#include <vector>

#include "bidora/tensor.hpp"

namespace bidora {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    const AdamWConfig& config() const { return cfg_; }
    void set_lr(double lr) { cfg_.lr = lr; }

    // One decoupled-weight-decay Adam step on `params` using grads already
    // accumulated in them. `lr_scale` multiplies the base learning rate
    // (schedule hook).
    void step(std::vector<Tensor>& params, double lr_scale = 1.0) {
        if (moments_.size() != params.size()) {
            moments_.assign(params.size(), Moments{});
            for (std::size_t i = 0; i < params.size(); ++i) {
                moments_[i].m.assign(params[i].size(), 0.0);
                moments_[i].v.assign(params[i].size(), 0.0);
            }
        }
        ++step_count_;
        const double lr = cfg_.lr * lr_scale;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, step_count_);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, step_count_);
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i].mutable_data();
            const auto& g = params[i].grad();
            auto& mom = moments_[i];
            for (std::size_t j = 0; j < p.size(); ++j) {
                mom.m[j] = cfg_.beta1 * mom.m[j] + (1.0 - cfg_.beta1) * g[j];
                mom.v[j] = cfg_.beta2 * mom.v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
                const double mhat = mom.m[j] / bc1;
                const double vhat = mom.v[j] / bc2;
                p[j] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                              cfg_.weight_decay * p[j]);
            }
        }
    }

    long step_count() const { return step_count_; }

private:
    struct Moments {
        std::vector<double> m, v;
    };
    AdamWConfig cfg_;
    std::vector<Moments> moments_;
    long step_count_ = 0;
};

// Linear schedule: ramp from 0 to 1 over the warmup fraction, then decay
// linearly to 0 at total_steps.
inline double linear_warmup_scale(long step, long total_steps,
                                  double warmup_ratio = 0.06) {
    if (total_steps <= 0) return 1.0;
    const double warmup = warmup_ratio * static_cast<double>(total_steps);
    const double s = static_cast<double>(step);
    if (warmup > 0.0 && s < warmup) return s / warmup;
    if (total_steps == static_cast<long>(warmup)) return 1.0;
    return std::max(0.0, (static_cast<double>(total_steps) - s) /
                             (static_cast<double>(total_steps) - warmup));
}

}  // namespace bidora
