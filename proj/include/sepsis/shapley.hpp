#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "sepsis/error.hpp"
#include "sepsis/matrix.hpp"

namespace sepsis {

// Attributions of score(instance) - baseline, where baseline is the mean
// score over the background sample. Absent features take background values.
struct ShapleyResult {
    std::vector<double> values;
    std::vector<double> std_errors;  // Monte-Carlo standard error, 0 when exact
    double baseline = 0.0;
    double score = 0.0;
    bool exact = false;
    int n_perm = 0;
    // Standard error of total(), from the per-permutation totals.
    double total_std_error = 0.0;

    double total() const { return std::accumulate(values.begin(), values.end(), 0.0); }
};

enum class ShapleyMethod { Auto, Exact, Permutation };

inline constexpr std::size_t kMaxExactFeatures = 10;

namespace detail {

template <class Scorer>
double background_mean(Scorer& f, std::span<const double> instance, const RowMatrix& background,
                       std::uint32_t mask, std::vector<double>& z) {
    double sum = 0.0;
    for (std::size_t b = 0; b < background.rows(); ++b) {
        const auto row = background.row(b);
        for (std::size_t j = 0; j < z.size(); ++j) z[j] = (mask >> j) & 1u ? instance[j] : row[j];
        sum += f(std::span<const double>(z));
    }
    return sum / static_cast<double>(background.rows());
}

inline void check_inputs(std::span<const double> instance, const RowMatrix& background) {
    if (background.empty()) throw Error(ErrorCode::Validation, "shapley: background sample is empty");
    if (background.cols() != instance.size()) {
        throw Error(ErrorCode::Validation, "shapley: background and instance dimensions differ");
    }
}

}  // namespace detail

// Full subset enumeration: 2^d coalition values, each averaged over the background.
template <class Scorer>
ShapleyResult shapley_exact(Scorer&& f, std::span<const double> instance, const RowMatrix& background) {
    detail::check_inputs(instance, background);
    const std::size_t d = instance.size();
    if (d > 20) throw Error(ErrorCode::Validation, "shapley_exact: too many features to enumerate");

    const std::uint32_t full = (1u << d) - 1u;
    std::vector<double> v(static_cast<std::size_t>(full) + 1);
    std::vector<double> z(d);
    for (std::uint32_t mask = 0; mask <= full; ++mask) {
        v[mask] = detail::background_mean(f, instance, background, mask, z);
    }

    // weight(|S|) = |S|! (d - |S| - 1)! / d!
    std::vector<double> weight(d);
    for (std::size_t s = 0; s < d; ++s) {
        double w = 1.0 / static_cast<double>(d);
        for (std::size_t i = 1; i <= s; ++i) {
            w *= static_cast<double>(i) / static_cast<double>(d - i);
        }
        weight[s] = w;
    }

    ShapleyResult out;
    out.exact = true;
    out.values.assign(d, 0.0);
    out.std_errors.assign(d, 0.0);
    for (std::size_t j = 0; j < d; ++j) {
        const std::uint32_t bit = 1u << j;
        double phi = 0.0;
        for (std::uint32_t mask = 0; mask <= full; ++mask) {
            if (mask & bit) continue;
            phi += weight[static_cast<std::size_t>(std::popcount(mask))] * (v[mask | bit] - v[mask]);
        }
        out.values[j] = phi;
    }
    out.baseline = v[0];
    out.score = f(instance);
    return out;
}

// Permutation sampling: each permutation adds features one at a time to every
// background row and records the change in score.
template <class Scorer>
ShapleyResult shapley_permutation(Scorer&& f, std::span<const double> instance,
                                  const RowMatrix& background, int n_perm, std::uint64_t seed) {
    detail::check_inputs(instance, background);
    if (n_perm < 1) throw Error(ErrorCode::Validation, "shapley: n_perm must be >= 1");
    const std::size_t d = instance.size();
    const std::size_t nb = background.rows();

    std::mt19937_64 rng(seed);
    std::vector<std::size_t> order(d);
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> sum(d, 0.0);
    std::vector<double> sum_sq(d, 0.0);
    std::vector<double> marginal(d);
    std::vector<double> z(d);
    double base_sum = 0.0;
    double total_sum = 0.0;
    double total_sq = 0.0;

    for (int p = 0; p < n_perm; ++p) {
        std::shuffle(order.begin(), order.end(), rng);
        std::fill(marginal.begin(), marginal.end(), 0.0);
        double base = 0.0;
        for (std::size_t b = 0; b < nb; ++b) {
            const auto row = background.row(b);
            std::copy(row.begin(), row.end(), z.begin());
            double prev = f(std::span<const double>(z));
            base += prev;
            for (std::size_t j : order) {
                z[j] = instance[j];
                const double cur = f(std::span<const double>(z));
                marginal[j] += cur - prev;
                prev = cur;
            }
        }
        double total = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double m = marginal[j] / static_cast<double>(nb);
            sum[j] += m;
            sum_sq[j] += m * m;
            total += m;
        }
        total_sum += total;
        total_sq += total * total;
        base_sum += base / static_cast<double>(nb);
    }

    const double np = static_cast<double>(n_perm);
    auto std_error = [np](double s, double sq) {
        if (np < 2.0) return 0.0;
        const double mean = s / np;
        const double var = std::max(0.0, (sq - np * mean * mean) / (np - 1.0));
        return std::sqrt(var / np);
    };

    ShapleyResult out;
    out.n_perm = n_perm;
    out.values.resize(d);
    out.std_errors.resize(d);
    for (std::size_t j = 0; j < d; ++j) {
        out.values[j] = sum[j] / np;
        out.std_errors[j] = std_error(sum[j], sum_sq[j]);
    }
    out.total_std_error = std_error(total_sum, total_sq);
    out.baseline = base_sum / np;
    out.score = f(instance);
    return out;
}

template <class Scorer>
ShapleyResult shapley_attribution(Scorer&& f, std::span<const double> instance,
                                  const RowMatrix& background, int n_perm, std::uint64_t seed,
                                  ShapleyMethod method = ShapleyMethod::Auto) {
    const bool exact = method == ShapleyMethod::Exact ||
                       (method == ShapleyMethod::Auto && instance.size() <= kMaxExactFeatures);
    if (exact) return shapley_exact(f, instance, background);
    return shapley_permutation(f, instance, background, n_perm, seed);
}

}  // namespace sepsis
