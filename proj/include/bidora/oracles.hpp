// SPDX-License-Identifier: Apache-2.0
//
// Self-check battery behind the oracle-check subcommand: gradient checks on
// every differentiable op, constant-Hessian exactness of the hypergradient's
// finite-difference term, direction agreement with exact implicit
// hypergradients, and the second-order epsilon convergence of the probe.
#pragma once

#include <string>
#include <vector>

#include "bidora/adapter.hpp"
#include "bidora/bilevel.hpp"
#include "bidora/tensor.hpp"

namespace bidora {

struct OracleCheck {
    std::string name;
    double measured = 0.0;
    double threshold = 0.0;
    bool pass = false;  // measured <= threshold
};

namespace detail {

inline double cosine(const std::vector<double>& a,
                     const std::vector<double>& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return dot / (std::sqrt(na) * std::sqrt(nb) + 1e-300);
}

inline std::vector<double> flatten(
    const std::vector<std::vector<double>>& v) {
    std::vector<double> out;
    for (const auto& x : v) out.insert(out.end(), x.begin(), x.end());
    return out;
}

}  // namespace detail

// Worst gradient-check error across ops and the full DoRA + cross-entropy
// graph, over `trials` seeds.
inline double oracle_grad_check_sweep(std::uint64_t seed, int trials = 20) {
    double worst = 0.0;
    for (int t = 0; t < trials; ++t) {
        std::mt19937_64 rng(seed + static_cast<std::uint64_t>(t));
        {
            Tensor a = random_normal(3, 4, 0.0, 1.0, rng);
            Tensor b = random_normal(4, 2, 0.0, 1.0, rng);
            worst = std::max(
                worst, grad_check(
                           [](const std::vector<Tensor>& p) {
                               return sum(matmul(p[0], p[1]));
                           },
                           {a, b}));
        }
        {
            Tensor w = random_normal(5, 3, 1.0, 0.5, rng);
            worst = std::max(
                worst, grad_check(
                           [](const std::vector<Tensor>& p) {
                               return sum(column_norms(p[0]));
                           },
                           {w}));
        }
        {
            // Full DoRA forward + cross-entropy on a 4-unit layer.
            Tensor w0 = random_normal(4, 4, 0.0, 1.0, rng);
            Tensor x = random_normal(3, 4, 0.0, 1.0, rng);
            std::vector<int> targets{0, 2, 1};
            AdapterLayer layer =
                make_adapter(w0, 2, 2.0, AdapterMode::dora, rng);
            Tensor b = random_normal(4, 2, 0.0, 0.3, rng);
            worst = std::max(
                worst,
                grad_check(
                    [&](const std::vector<Tensor>& p) {
                        AdapterLayer l = layer;
                        l.B = p[0];
                        l.A = p[1];
                        l.m = p[2];
                        return softmax_cross_entropy(dora_forward(l, x),
                                                     targets);
                    },
                    {b, layer.A.detach(), layer.m.detach()}));
        }
        {
            Tensor w0 = random_normal(4, 3, 0.0, 1.0, rng);
            std::mt19937_64 rng2(seed + 1000 + t);
            AdapterLayer layer =
                make_adapter(w0, 2, 2.0, AdapterMode::dora, rng2);
            Tensor b = random_normal(4, 2, 0.0, 0.3, rng2);
            worst = std::max(
                worst,
                grad_check(
                    [&](const std::vector<Tensor>& p) {
                        AdapterLayer l = layer;
                        l.B = p[0];
                        l.A = p[1];
                        return gram_regularizer({l});
                    },
                    {b, layer.A.detach()}));
        }
    }
    return worst;
}

// |FD curvature term - analytic mixed-Hessian-vector product| on random
// quadratic instances, where the mixed Hessian is constant and the central
// difference is exact up to roundoff.
inline double oracle_quadratic_exactness(std::uint64_t seed, int trials = 20) {
    double worst = 0.0;
    for (int t = 0; t < trials; ++t) {
        std::mt19937_64 rng(seed + static_cast<std::uint64_t>(t));
        QuadraticBilevelProblem prob;
        prob.C = random_normal(4, 3, 0.0, 1.0, rng);
        prob.t = random_normal(4, 1, 0.0, 1.0, rng);
        Tensor m_vec = random_normal(3, 1, 0.0, 1.0, rng);
        m_vec.set_requires_grad(true);
        Tensor v = random_normal(4, 1, 0.0, 1.0, rng);
        v.set_requires_grad(true);
        std::vector<Tensor> lower{v}, upper{m_vec};
        auto terms = hypergradient_terms(
            lower, upper, [&] { return prob.loss_tr(v, m_vec); },
            [&] { return prob.loss_val(v); }, 0.1, 0.01);
        // Analytic product: -C^T g with g the validation gradient at vbar.
        std::vector<double> vbar = v.data();
        {
            for (auto& p : lower) p.zero_grad();
            Tensor l = prob.loss_tr(v, m_vec);
            l.backward();
            for (std::size_t i = 0; i < vbar.size(); ++i)
                vbar[i] -= 0.1 * v.grad()[i];
        }
        for (std::size_t j = 0; j < 3; ++j) {
            double analytic = 0.0;
            for (std::size_t i = 0; i < 4; ++i)
                analytic -= prob.C(i, j) * (vbar[i] - prob.t(i, 0));
            worst = std::max(worst,
                             std::abs(terms.curvature[0][j] - analytic));
        }
    }
    return worst;
}

// 1 - cosine between the unrolled estimator and the exact implicit
// hypergradient, evaluated at the inner optimum of random quadratics.
inline double oracle_direction_agreement(std::uint64_t seed, int trials = 50) {
    double worst = 0.0;
    for (int t = 0; t < trials; ++t) {
        std::mt19937_64 rng(seed + static_cast<std::uint64_t>(t));
        QuadraticBilevelProblem prob;
        prob.C = random_normal(4, 3, 0.0, 1.0, rng);
        prob.t = random_normal(4, 1, 0.0, 1.0, rng);
        Tensor m_vec = random_normal(3, 1, 0.0, 1.0, rng);
        m_vec.set_requires_grad(true);
        Tensor v = prob.inner_optimum(m_vec).detach();
        v.set_requires_grad(true);
        std::vector<Tensor> lower{v}, upper{m_vec};
        auto hg = hypergradient(
            lower, upper, [&] { return prob.loss_tr(v, m_vec); },
            [&] { return prob.loss_val(v); }, 0.1, 0.01);
        auto exact = exact_hypergradient_oracle(prob, m_vec);
        worst = std::max(
            worst, 1.0 - detail::cosine(detail::flatten(hg), exact));
    }
    return worst;
}

// Ratio of successive finite-difference errors as eps0 halves on a quartic
// inner loss; central differences are second-order, so the ideal ratio is 4.
inline std::vector<double> oracle_quartic_eps_errors(
    std::uint64_t seed, const std::vector<double>& eps0_values) {
    std::mt19937_64 rng(seed);
    const double c = 1.3, target = 0.7, xi = 0.05;
    Tensor m_vec = Tensor::scalar(0.9, true);
    Tensor v = Tensor::scalar(2.1, true);
    auto loss_tr = [&] {
        Tensor u = sub(v, scale(m_vec, c));
        Tensor u2 = hadamard(u, u);
        return scale(sum(hadamard(u2, u2)), 0.25);
    };
    auto loss_val = [&] {
        Tensor u = sub(v, Tensor::scalar(target));
        return scale(sum(hadamard(u, u)), 0.5);
    };
    std::vector<double> errors;
    for (double eps0 : eps0_values) {
        std::vector<Tensor> lower{v}, upper{m_vec};
        auto terms =
            hypergradient_terms(lower, upper, loss_tr, loss_val, xi, eps0);
        // Analytic mixed HVP at vbar: d/dm[(v - c m)^3] . g = -3c a^2 g.
        const double a0 = v.item() - c * m_vec.item();
        const double vbar = v.item() - xi * a0 * a0 * a0;
        const double g = vbar - target;
        const double a = v.item() - c * m_vec.item();
        const double analytic = -3.0 * c * a * a * g;
        errors.push_back(std::abs(terms.curvature[0][0] - analytic));
    }
    return errors;
}

inline std::vector<OracleCheck> run_oracle_checks(std::uint64_t seed = 1234) {
    std::vector<OracleCheck> checks;
    auto push = [&](std::string name, double measured, double threshold) {
        checks.push_back({std::move(name), measured, threshold,
                          measured <= threshold});
    };
    push("grad_check_sweep_rel_err", oracle_grad_check_sweep(seed), 1e-6);
    push("quadratic_mixed_hessian_abs_err", oracle_quadratic_exactness(seed),
         1e-10);
    push("implicit_direction_one_minus_cosine",
         oracle_direction_agreement(seed), 1e-6);
    auto errors = oracle_quartic_eps_errors(seed, {0.02, 0.01, 0.005, 0.0025});
    double worst_ratio_dev = 0.0;
    for (std::size_t i = 0; i + 1 < errors.size(); ++i)
        worst_ratio_dev = std::max(
            worst_ratio_dev, std::abs(errors[i] / errors[i + 1] - 4.0));
    push("quartic_eps_halving_ratio_dev_from_4", worst_ratio_dev, 0.5);
    return checks;
}

}  // namespace bidora
