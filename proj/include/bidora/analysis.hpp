// SPDX-License-Identifier: Apache-2.0
//
// Weight-decomposition analysis, correlation-slope fitting, direction-matrix
// eigenspectra, overfitting-gap reports, and the Wilcoxon signed-rank test.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "bidora/tensor.hpp"

namespace bidora {

struct WdaPoint {
    std::size_t layer = 0;
    long step = 0;
    double delta_m = 0.0;  // mean absolute magnitude change, >= 0
    double delta_d = 0.0;  // mean (1 - cosine), in [0, 2]
};

// Mean over columns of | ||Wt_col|| - ||W0_col|| |.
inline double delta_magnitude(const Tensor& w0, const Tensor& wt) {
    if (w0.rows() != wt.rows() || w0.cols() != wt.cols())
        throw ShapeError("delta_magnitude: shape mismatch");
    const std::size_t m = w0.rows(), k = w0.cols();
    double acc = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
        double n0 = 0.0, nt = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            n0 += w0(i, j) * w0(i, j);
            nt += wt(i, j) * wt(i, j);
        }
        acc += std::abs(std::sqrt(nt) - std::sqrt(n0));
    }
    return acc / static_cast<double>(k);
}

// Mean over columns of (1 - cosine similarity between matching columns).
inline double delta_direction(const Tensor& w0, const Tensor& wt) {
    if (w0.rows() != wt.rows() || w0.cols() != wt.cols())
        throw ShapeError("delta_direction: shape mismatch");
    const std::size_t m = w0.rows(), k = w0.cols();
    double acc = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
        double dot = 0.0, n0 = 0.0, nt = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            dot += w0(i, j) * wt(i, j);
            n0 += w0(i, j) * w0(i, j);
            nt += wt(i, j) * wt(i, j);
        }
        if (n0 < 1e-24 || nt < 1e-24)
            throw NumericError("delta_direction: degenerate column");
        acc += 1.0 - dot / (std::sqrt(n0) * std::sqrt(nt));
    }
    return acc / static_cast<double>(k);
}

// OLS slope (with intercept) of delta_m against delta_d over all points.
inline double correlation_slope(const std::vector<WdaPoint>& points) {
    if (points.size() < 2)
        throw std::invalid_argument("correlation_slope needs >= 2 points");
    double mx = 0.0, my = 0.0;
    for (const auto& p : points) {
        mx += p.delta_d;
        my += p.delta_m;
    }
    mx /= static_cast<double>(points.size());
    my /= static_cast<double>(points.size());
    double sxx = 0.0, sxy = 0.0;
    for (const auto& p : points) {
        sxx += (p.delta_d - mx) * (p.delta_d - mx);
        sxy += (p.delta_d - mx) * (p.delta_m - my);
    }
    if (sxx < 1e-24)
        throw std::invalid_argument(
            "correlation_slope: zero variance in delta_d");
    return sxy / sxx;
}

// ---- eigenspectrum ----------------------------------------------------------

namespace detail {

// Cyclic Jacobi eigenvalue iteration for a symmetric matrix (row-major n x n).
inline std::vector<double> jacobi_eigenvalues(std::vector<double> a,
                                              std::size_t n) {
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j)
                off += a[i * n + j] * a[i * n + j];
        if (off < 1e-30) break;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a[p * n + q];
                if (std::abs(apq) < 1e-300) continue;
                const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) +
                                  std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t i = 0; i < n; ++i) {
                    const double aip = a[i * n + p], aiq = a[i * n + q];
                    a[i * n + p] = c * aip - s * aiq;
                    a[i * n + q] = s * aip + c * aiq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double api = a[p * n + i], aqi = a[q * n + i];
                    a[p * n + i] = c * api - s * aqi;
                    a[q * n + i] = s * api + c * aqi;
                }
            }
    }
    std::vector<double> eig(n);
    for (std::size_t i = 0; i < n; ++i) eig[i] = a[i * n + i];
    return eig;
}

}  // namespace detail

// Descending eigenvalues of D^T D (squared singular values of the direction
// matrix D), normalized by the largest, truncated to top_n.
inline std::vector<double> eigenspectrum(const Tensor& direction,
                                         std::size_t top_n) {
    if (direction.size() == 0 || top_n < 1)
        throw std::invalid_argument("eigenspectrum: empty input");
    const std::size_t m = direction.rows(), k = direction.cols();
    std::vector<double> gram(k * k, 0.0);
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = i; j < k; ++j) {
            double s = 0.0;
            for (std::size_t l = 0; l < m; ++l)
                s += direction(l, i) * direction(l, j);
            gram[i * k + j] = gram[j * k + i] = s;
        }
    std::vector<double> eig = detail::jacobi_eigenvalues(std::move(gram), k);
    std::sort(eig.begin(), eig.end(), std::greater<double>());
    if (eig.empty() || eig.front() <= 0.0)
        throw NumericError("eigenspectrum: rank-0 matrix");
    const double top = eig.front();
    for (double& v : eig) v = std::max(v, 0.0) / top;
    if (eig.size() > top_n) eig.resize(top_n);
    return eig;
}

// ---- overfitting gap ---------------------------------------------------------

struct GapReport {
    double train_metric = 0.0;  // EMA-smoothed; bi-level runs mix two loops
    double test_metric = 0.0;
    double gap = 0.0;           // train - test
    double inner_weight = 1.0;
    double outer_weight = 0.0;
};

inline double ema(const std::vector<double>& series, double decay = 0.99) {
    if (series.empty()) throw std::invalid_argument("ema of empty series");
    double v = series.front();
    for (std::size_t i = 1; i < series.size(); ++i)
        v = decay * v + (1.0 - decay) * series[i];
    return v;
}

// Single-loop runs pass only `inner_series`; bi-level runs also pass the
// outer-loop metric series, combined as 0.8*inner + 0.2*outer by default.
inline GapReport gap_report(const std::vector<double>& inner_series,
                            const std::vector<double>& outer_series,
                            double test_metric, double inner_weight = 0.8,
                            double outer_weight = 0.2, double decay = 0.99) {
    if (inner_series.empty())
        throw std::invalid_argument("gap_report: empty trajectory");
    GapReport rep;
    if (outer_series.empty()) {
        rep.train_metric = ema(inner_series, decay);
        rep.inner_weight = 1.0;
        rep.outer_weight = 0.0;
    } else {
        rep.train_metric = inner_weight * ema(inner_series, decay) +
                           outer_weight * ema(outer_series, decay);
        rep.inner_weight = inner_weight;
        rep.outer_weight = outer_weight;
    }
    rep.test_metric = test_metric;
    rep.gap = rep.train_metric - test_metric;
    return rep;
}

// ---- Wilcoxon signed-rank ----------------------------------------------------

struct WilcoxonResult {
    double statistic = 0.0;  // min(W+, W-)
    double w_minus = 0.0;
    double p_one_sided = 1.0;  // P(W- <= observed): tests a > b
    std::size_t n = 0;
    bool exact = false;
};

// One-sided Wilcoxon signed-rank test of paired samples (H1: a > b).
// Zero differences are dropped; ties get average ranks. Exact p by sign
// enumeration for n <= 12, normal approximation with tie correction above.
inline WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a,
                                           const std::vector<double>& b) {
    if (a.size() != b.size())
        throw std::invalid_argument("wilcoxon: length mismatch");
    std::vector<double> diffs;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        if (d != 0.0) diffs.push_back(d);
    }
    if (diffs.empty())
        throw std::invalid_argument("wilcoxon: all differences are zero");
    if (diffs.size() < 5)
        throw std::invalid_argument("wilcoxon: needs >= 5 nonzero differences");
    const std::size_t n = diffs.size();

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
        return std::abs(diffs[x]) < std::abs(diffs[y]);
    });
    std::vector<double> ranks(n);
    std::vector<std::size_t> tie_sizes;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n &&
               std::abs(diffs[order[j]]) == std::abs(diffs[order[i]]))
            ++j;
        const double avg = (static_cast<double>(i + 1) +
                            static_cast<double>(j)) / 2.0;
        for (std::size_t k = i; k < j; ++k) ranks[order[k]] = avg;
        tie_sizes.push_back(j - i);
        i = j;
    }

    double w_plus = 0.0, w_minus = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        (diffs[i] > 0.0 ? w_plus : w_minus) += ranks[i];

    WilcoxonResult res;
    res.n = n;
    res.w_minus = w_minus;
    res.statistic = std::min(w_plus, w_minus);

    if (n <= 12) {
        // Exact null distribution of W- over all sign patterns.
        const std::size_t total = std::size_t{1} << n;
        std::size_t count = 0;
        for (std::size_t mask = 0; mask < total; ++mask) {
            double w = 0.0;
            for (std::size_t i = 0; i < n; ++i)
                if (mask & (std::size_t{1} << i)) w += ranks[i];
            if (w <= w_minus + 1e-9) ++count;
        }
        res.p_one_sided = static_cast<double>(count) /
                          static_cast<double>(total);
        res.exact = true;
    } else {
        const double nn = static_cast<double>(n);
        const double mean = nn * (nn + 1.0) / 4.0;
        double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0;
        for (std::size_t t : tie_sizes) {
            const double td = static_cast<double>(t);
            var -= (td * td * td - td) / 48.0;
        }
        const double z = (w_minus + 0.5 - mean) / std::sqrt(var);
        res.p_one_sided = 0.5 * std::erfc(-z / std::sqrt(2.0));
        res.exact = false;
    }
    return res;
}

}  // namespace bidora
