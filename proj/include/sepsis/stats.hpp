#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sepsis/matrix.hpp"

namespace sepsis {

// Covariance scaling applied to the cluster sandwich: G/(G-1) * (N-1)/(N-K).
inline constexpr std::string_view kSmallSampleCorrection = "G/(G-1)*(N-1)/(N-K)";

struct Contrast {
    std::string level_a;
    std::string level_b;
    double estimate = 0.0;  // mean(b) - mean(a), adjusting for other columns
    double std_error = 0.0;
    double t = 0.0;
    double p_value = 1.0;  // two-sided, t with G-1 degrees of freedom
};

struct RegressionResult {
    std::vector<std::string> names;  // "(intercept)", then one column per non-reference level
    std::vector<double> coef;
    std::vector<double> std_errors;
    RowMatrix vcov;
    std::size_t n = 0;
    std::size_t n_clusters = 0;
    // Joint test of the condition columns.
    double f_stat = 0.0;
    int df1 = 0;
    int df2 = 0;
    double p_value = 1.0;
    std::vector<Contrast> contrasts;
    int iterations = 0;                // IRLS only
    std::vector<double> deviance_trace;  // IRLS only

    nlohmann::json to_json() const;
};

// Dummy-coded design with intercept; the first level is the reference.
// Levels default to the sorted distinct values.
struct Design {
    RowMatrix x;
    std::vector<std::string> names;
    std::vector<std::string> levels;
};
Design dummy_design(std::span<const std::string> factor, std::span<const std::string> levels = {});

// OLS with the cluster sandwich covariance. Throws RankDeficient naming the
// collinear columns and Validation when fewer than two clusters are present.
// `tested` lists the columns in the joint F test (default: every column but the first).
RegressionResult ols_cluster_design(const RowMatrix& x, std::span<const double> y,
                                    std::span<const std::string> clusters,
                                    std::span<const std::string> names,
                                    std::span<const std::size_t> tested = {});

RegressionResult ols_cluster(std::span<const double> y, std::span<const std::string> condition,
                             std::span<const std::string> clusters,
                             std::span<const std::string> levels = {});

// Logistic regression by IRLS (tolerance 1e-8, at most 100 iterations) with
// cluster-sandwich standard errors on the score contributions. Throws
// Separation on perfect or quasi-complete separation and NonConvergence with
// the deviance trace.
RegressionResult logit_cluster_design(const RowMatrix& x, std::span<const int> y,
                                      std::span<const std::string> clusters,
                                      std::span<const std::string> names,
                                      std::span<const std::size_t> tested = {});

RegressionResult logit_concordance(std::span<const int> y, std::span<const std::string> condition,
                                   std::span<const std::string> clusters,
                                   std::span<const std::string> levels = {});

struct HolmDecision {
    bool reject = false;
    double adjusted_p = 1.0;
};

// Holm step-down; results in input order.
std::vector<HolmDecision> holm_bonferroni(std::span<const double> p_values, double alpha = 0.05);

struct Interval {
    double lo = 0.0;
    double hi = 0.0;
};

Interval normal_interval(double p, std::size_t n, double z = 1.959963984540054);
Interval wilson_interval(double p, std::size_t n, double z = 1.959963984540054);

}  // namespace sepsis
