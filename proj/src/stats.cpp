#include "sepsis/stats.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include <Eigen/Dense>
#include <boost/math/distributions/fisher_f.hpp>
#include <boost/math/distributions/students_t.hpp>
#include <fmt/format.h>

#include "sepsis/error.hpp"

namespace sepsis {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

MatrixXd to_eigen(const RowMatrix& m) {
    MatrixXd out(static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols()));
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) {
            out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = m(i, j);
        }
    }
    return out;
}

RowMatrix from_eigen(const MatrixXd& m) {
    RowMatrix out(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) out(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = m(i, j);
    }
    return out;
}

// Cluster index per row, clusters numbered in order of first appearance.
std::vector<std::size_t> cluster_index(std::span<const std::string> clusters, std::size_t* count) {
    std::map<std::string, std::size_t> ids;
    std::vector<std::size_t> out;
    out.reserve(clusters.size());
    for (const auto& c : clusters) {
        auto [it, inserted] = ids.emplace(c, ids.size());
        out.push_back(it->second);
    }
    *count = ids.size();
    return out;
}

void check_rank(const MatrixXd& x, std::span<const std::string> names) {
    Eigen::ColPivHouseholderQR<MatrixXd> qr(x);
    if (qr.rank() == x.cols()) return;
    // Greedy scan: a column that adds nothing to the span of earlier kept columns is collinear.
    std::vector<std::string> collinear;
    std::vector<Eigen::Index> kept;
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        MatrixXd sub(x.rows(), static_cast<Eigen::Index>(kept.size()) + 1);
        for (std::size_t c = 0; c < kept.size(); ++c) sub.col(static_cast<Eigen::Index>(c)) = x.col(kept[c]);
        sub.col(static_cast<Eigen::Index>(kept.size())) = x.col(j);
        Eigen::ColPivHouseholderQR<MatrixXd> q(sub);
        q.setThreshold(qr.threshold());
        if (q.rank() == sub.cols()) {
            kept.push_back(j);
        } else {
            collinear.push_back(static_cast<std::size_t>(j) < names.size() ? names[static_cast<std::size_t>(j)]
                                                                          : fmt::format("x{}", j));
        }
    }
    std::string list;
    for (const auto& c : collinear) list += (list.empty() ? "" : ", ") + c;
    throw Error(ErrorCode::RankDeficient, fmt::format("design matrix is rank deficient; collinear columns: {}", list));
}

void check_inputs(const RowMatrix& x, std::size_t ny, std::span<const std::string> clusters,
                  std::span<const std::string> names) {
    if (x.rows() == 0) throw Error(ErrorCode::InsufficientData, "regression: no observations");
    if (ny != x.rows() || clusters.size() != x.rows()) {
        throw Error(ErrorCode::Validation, "regression: outcome, design and cluster lengths differ");
    }
    if (!names.empty() && names.size() != x.cols()) {
        throw Error(ErrorCode::Validation, "regression: one name per design column required");
    }
}

// G/(G-1) * (N-1)/(N-K) * bread * meat * bread, meat from per-cluster score sums.
MatrixXd cluster_sandwich(const MatrixXd& x, const VectorXd& score_weight, const MatrixXd& bread,
                          const std::vector<std::size_t>& cluster, std::size_t n_clusters) {
    const Eigen::Index k = x.cols();
    MatrixXd sums = MatrixXd::Zero(static_cast<Eigen::Index>(n_clusters), k);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        sums.row(static_cast<Eigen::Index>(cluster[static_cast<std::size_t>(i)])) += score_weight(i) * x.row(i);
    }
    const MatrixXd meat = sums.transpose() * sums;
    const double g = static_cast<double>(n_clusters);
    const double n = static_cast<double>(x.rows());
    const double factor = g / (g - 1.0) * (n - 1.0) / (n - static_cast<double>(k));
    return factor * bread * meat * bread;
}

void joint_test(RegressionResult& r, std::span<const std::size_t> tested) {
    std::vector<std::size_t> cols(tested.begin(), tested.end());
    if (cols.empty()) {
        for (std::size_t j = 1; j < r.coef.size(); ++j) cols.push_back(j);
    }
    r.df1 = static_cast<int>(cols.size());
    r.df2 = static_cast<int>(r.n_clusters) - 1;
    if (cols.empty()) return;
    const auto q = static_cast<Eigen::Index>(cols.size());
    VectorXd b(q);
    MatrixXd v(q, q);
    for (Eigen::Index a = 0; a < q; ++a) {
        b(a) = r.coef[cols[static_cast<std::size_t>(a)]];
        for (Eigen::Index c = 0; c < q; ++c) {
            v(a, c) = r.vcov(cols[static_cast<std::size_t>(a)], cols[static_cast<std::size_t>(c)]);
        }
    }
    if (b.cwiseAbs().maxCoeff() == 0.0) {
        r.f_stat = 0.0;
        r.p_value = 1.0;
        return;
    }
    Eigen::CompleteOrthogonalDecomposition<MatrixXd> cod(v);
    const double wald = b.dot(cod.solve(b));
    r.f_stat = wald / static_cast<double>(q);
    if (!std::isfinite(r.f_stat) || r.df2 < 1) {
        r.p_value = std::numeric_limits<double>::quiet_NaN();
        return;
    }
    boost::math::fisher_f dist(static_cast<double>(r.df1), static_cast<double>(r.df2));
    r.p_value = r.f_stat <= 0.0 ? 1.0 : boost::math::cdf(boost::math::complement(dist, r.f_stat));
}

void pairwise_contrasts(RegressionResult& r, const std::vector<std::string>& levels) {
    // Level 0 is the reference (coefficient 0); level i > 0 maps to column i.
    auto coef = [&](std::size_t level) { return level == 0 ? 0.0 : r.coef[level]; };
    auto cov = [&](std::size_t a, std::size_t b) { return a == 0 || b == 0 ? 0.0 : r.vcov(a, b); };
    for (std::size_t a = 0; a < levels.size(); ++a) {
        for (std::size_t b = a + 1; b < levels.size(); ++b) {
            Contrast c;
            c.level_a = levels[a];
            c.level_b = levels[b];
            c.estimate = coef(b) - coef(a);
            const double var = cov(a, a) + cov(b, b) - 2.0 * cov(a, b);
            c.std_error = std::sqrt(std::max(0.0, var));
            if (c.std_error > 0.0 && r.df2 >= 1) {
                c.t = c.estimate / c.std_error;
                boost::math::students_t dist(static_cast<double>(r.df2));
                c.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(c.t)));
            } else {
                c.t = 0.0;
                c.p_value = c.estimate == 0.0 ? 1.0 : std::numeric_limits<double>::quiet_NaN();
            }
            r.contrasts.push_back(c);
        }
    }
}

double nan_safe(double v) { return std::isfinite(v) ? v : std::numeric_limits<double>::quiet_NaN(); }

nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

}  // namespace

nlohmann::json RegressionResult::to_json() const {
    nlohmann::json coefs = nlohmann::json::array();
    for (std::size_t j = 0; j < coef.size(); ++j) {
        coefs.push_back({{"name", names[j]}, {"estimate", number_or_null(coef[j])},
                         {"std_error", number_or_null(std_errors[j])}});
    }
    nlohmann::json cs = nlohmann::json::array();
    for (const auto& c : contrasts) {
        cs.push_back({{"a", c.level_a},
                      {"b", c.level_b},
                      {"estimate", number_or_null(c.estimate)},
                      {"std_error", number_or_null(c.std_error)},
                      {"t", number_or_null(c.t)},
                      {"p_value", number_or_null(c.p_value)}});
    }
    nlohmann::json doc = {{"coefficients", std::move(coefs)},
                          {"n", n},
                          {"n_clusters", n_clusters},
                          {"f_stat", number_or_null(f_stat)},
                          {"df", {df1, df2}},
                          {"p_value", number_or_null(p_value)},
                          {"contrasts", std::move(cs)},
                          {"covariance", "cluster-robust sandwich"},
                          {"small_sample_correction", std::string(kSmallSampleCorrection)}};
    if (iterations > 0) {
        doc["iterations"] = iterations;
        doc["deviance_trace"] = deviance_trace;
    }
    return doc;
}

Design dummy_design(std::span<const std::string> factor, std::span<const std::string> levels) {
    Design d;
    if (levels.empty()) {
        std::set<std::string> distinct(factor.begin(), factor.end());
        d.levels.assign(distinct.begin(), distinct.end());
    } else {
        d.levels.assign(levels.begin(), levels.end());
    }
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < d.levels.size(); ++i) index[d.levels[i]] = i;
    d.names.push_back("(intercept)");
    for (std::size_t i = 1; i < d.levels.size(); ++i) d.names.push_back(d.levels[i]);
    d.x = RowMatrix(factor.size(), d.levels.size(), 0.0);
    for (std::size_t r = 0; r < factor.size(); ++r) {
        auto it = index.find(factor[r]);
        if (it == index.end()) {
            throw Error(ErrorCode::Validation, fmt::format("factor value '{}' is not a listed level", factor[r]));
        }
        d.x(r, 0) = 1.0;
        if (it->second > 0) d.x(r, it->second) = 1.0;
    }
    return d;
}

RegressionResult ols_cluster_design(const RowMatrix& xm, std::span<const double> y,
                                    std::span<const std::string> clusters,
                                    std::span<const std::string> names,
                                    std::span<const std::size_t> tested) {
    check_inputs(xm, y.size(), clusters, names);
    std::size_t g = 0;
    const auto cluster = cluster_index(clusters, &g);
    if (g < 2) throw Error(ErrorCode::Validation, "cluster-robust covariance needs at least two clusters");

    const MatrixXd x = to_eigen(xm);
    if (x.rows() <= x.cols()) {
        throw Error(ErrorCode::InsufficientData, "regression: need more observations than columns");
    }
    check_rank(x, names);
    const VectorXd yv = Eigen::Map<const VectorXd>(y.data(), static_cast<Eigen::Index>(y.size()));

    const MatrixXd xtx = x.transpose() * x;
    const MatrixXd bread = xtx.ldlt().solve(MatrixXd::Identity(x.cols(), x.cols()));
    const VectorXd beta = x.colPivHouseholderQr().solve(yv);
    const VectorXd resid = yv - x * beta;
    const MatrixXd v = cluster_sandwich(x, resid, bread, cluster, g);

    RegressionResult r;
    r.names.assign(names.begin(), names.end());
    if (r.names.empty()) {
        for (Eigen::Index j = 0; j < x.cols(); ++j) r.names.push_back(fmt::format("x{}", j));
    }
    r.n = xm.rows();
    r.n_clusters = g;
    r.vcov = from_eigen(v);
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        r.coef.push_back(beta(j));
        r.std_errors.push_back(std::sqrt(std::max(0.0, v(j, j))));
    }
    joint_test(r, tested);
    return r;
}

RegressionResult ols_cluster(std::span<const double> y, std::span<const std::string> condition,
                             std::span<const std::string> clusters, std::span<const std::string> levels) {
    const auto d = dummy_design(condition, levels);
    if (d.levels.size() < 2) throw Error(ErrorCode::Validation, "ols_cluster: need at least two condition levels");
    auto r = ols_cluster_design(d.x, y, clusters, d.names);
    pairwise_contrasts(r, d.levels);
    return r;
}

RegressionResult logit_cluster_design(const RowMatrix& xm, std::span<const int> y,
                                      std::span<const std::string> clusters,
                                      std::span<const std::string> names,
                                      std::span<const std::size_t> tested) {
    check_inputs(xm, y.size(), clusters, names);
    std::size_t g = 0;
    const auto cluster = cluster_index(clusters, &g);
    if (g < 2) throw Error(ErrorCode::Validation, "cluster-robust covariance needs at least two clusters");
    const auto positives = std::count(y.begin(), y.end(), 1);
    if (positives == 0 || positives == static_cast<std::ptrdiff_t>(y.size())) {
        throw Error(ErrorCode::Validation, "logistic regression: outcome is constant");
    }
    for (int v : y) {
        if (v != 0 && v != 1) throw Error(ErrorCode::Validation, "logistic regression: outcome must be 0/1");
    }

    const MatrixXd x = to_eigen(xm);
    check_rank(x, names);
    const Eigen::Index n = x.rows();
    const Eigen::Index k = x.cols();
    VectorXd yv(n);
    for (Eigen::Index i = 0; i < n; ++i) yv(i) = y[static_cast<std::size_t>(i)];

    // Separation check for indicator columns: a 0/1 column whose "on" rows
    // all share one outcome drives its coefficient to infinity.
    for (Eigen::Index j = 0; j < k; ++j) {
        bool binary = true;
        std::size_t on = 0;
        std::size_t on_pos = 0;
        for (Eigen::Index i = 0; i < n && binary; ++i) {
            const double v = x(i, j);
            if (v != 0.0 && v != 1.0) binary = false;
            if (v == 1.0) {
                ++on;
                on_pos += static_cast<std::size_t>(yv(i));
            }
        }
        if (binary && on > 0 && on < static_cast<std::size_t>(n) && (on_pos == 0 || on_pos == on)) {
            const std::string name = static_cast<std::size_t>(j) < names.size() ? names[static_cast<std::size_t>(j)]
                                                                                 : fmt::format("x{}", j);
            throw Error(ErrorCode::Separation,
                        fmt::format("separation: every observation with {} = 1 has outcome {}", name,
                                    on_pos == 0 ? 0 : 1));
        }
    }

    RegressionResult r;
    VectorXd beta = VectorXd::Zero(k);
    VectorXd p(n);
    VectorXd w(n);
    auto deviance = [&](const VectorXd& prob) {
        double d = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const double pi = std::clamp(prob(i), 1e-300, 1.0 - 1e-16);
            d -= 2.0 * (yv(i) * std::log(pi) + (1.0 - yv(i)) * std::log1p(-pi));
        }
        return d;
    };

    constexpr int kMaxIterations = 100;
    constexpr double kTolerance = 1e-8;
    bool converged = false;
    for (int it = 1; it <= kMaxIterations; ++it) {
        const VectorXd eta = x * beta;
        for (Eigen::Index i = 0; i < n; ++i) {
            p(i) = 1.0 / (1.0 + std::exp(-eta(i)));
            w(i) = std::max(p(i) * (1.0 - p(i)), 1e-300);
        }
        r.deviance_trace.push_back(deviance(p));
        const MatrixXd xtwx = x.transpose() * w.asDiagonal() * x;
        const VectorXd step = xtwx.ldlt().solve(x.transpose() * (yv - p));
        beta += step;
        r.iterations = it;
        if (!step.allFinite()) break;
        if (step.cwiseAbs().maxCoeff() < kTolerance * (1.0 + beta.cwiseAbs().maxCoeff())) {
            converged = true;
            break;
        }
    }
    if (!converged) {
        std::string trace;
        for (double d : r.deviance_trace) trace += fmt::format("{}{:.6g}", trace.empty() ? "" : ", ", d);
        throw Error(ErrorCode::NonConvergence,
                    fmt::format("IRLS did not converge in {} iterations; deviance trace: [{}]", r.iterations, trace));
    }
    if (beta.cwiseAbs().maxCoeff() > 30.0) {
        throw Error(ErrorCode::Separation, "separation: coefficients diverge (fitted probabilities at 0 or 1)");
    }

    const VectorXd eta = x * beta;
    for (Eigen::Index i = 0; i < n; ++i) {
        p(i) = 1.0 / (1.0 + std::exp(-eta(i)));
        w(i) = p(i) * (1.0 - p(i));
    }
    const MatrixXd bread = (x.transpose() * w.asDiagonal() * x).ldlt().solve(MatrixXd::Identity(k, k));
    const MatrixXd v = cluster_sandwich(x, yv - p, bread, cluster, g);

    r.names.assign(names.begin(), names.end());
    if (r.names.empty()) {
        for (Eigen::Index j = 0; j < k; ++j) r.names.push_back(fmt::format("x{}", j));
    }
    r.n = static_cast<std::size_t>(n);
    r.n_clusters = g;
    r.vcov = from_eigen(v);
    for (Eigen::Index j = 0; j < k; ++j) {
        r.coef.push_back(nan_safe(beta(j)));
        r.std_errors.push_back(std::sqrt(std::max(0.0, v(j, j))));
    }
    joint_test(r, tested);
    return r;
}

RegressionResult logit_concordance(std::span<const int> y, std::span<const std::string> condition,
                                   std::span<const std::string> clusters, std::span<const std::string> levels) {
    const auto d = dummy_design(condition, levels);
    if (d.levels.empty()) throw Error(ErrorCode::InsufficientData, "logit_concordance: no observations");
    auto r = logit_cluster_design(d.x, y, clusters, d.names);
    if (d.levels.size() >= 2) pairwise_contrasts(r, d.levels);
    return r;
}

std::vector<HolmDecision> holm_bonferroni(std::span<const double> p_values, double alpha) {
    for (double p : p_values) {
        if (!(p >= 0.0 && p <= 1.0)) {
            throw Error(ErrorCode::Validation, fmt::format("p-value {} outside [0, 1]", p));
        }
    }
    const std::size_t m = p_values.size();
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return p_values[a] < p_values[b]; });
    std::vector<HolmDecision> out(m);
    double running = 0.0;
    bool still_rejecting = true;
    for (std::size_t i = 0; i < m; ++i) {
        const double p = p_values[order[i]];
        const double mult = static_cast<double>(m - i);
        running = std::max(running, std::min(1.0, mult * p));
        still_rejecting = still_rejecting && p <= alpha / mult;
        out[order[i]] = {still_rejecting, running};
    }
    return out;
}

Interval normal_interval(double p, std::size_t n, double z) {
    if (n == 0) return {0.0, 1.0};
    const double half = z * std::sqrt(p * (1.0 - p) / static_cast<double>(n));
    return {std::clamp(p - half, 0.0, 1.0), std::clamp(p + half, 0.0, 1.0)};
}

Interval wilson_interval(double p, std::size_t n, double z) {
    if (n == 0) return {0.0, 1.0};
    const double nn = static_cast<double>(n);
    const double z2 = z * z;
    const double centre = (p + z2 / (2.0 * nn)) / (1.0 + z2 / nn);
    const double half = z / (1.0 + z2 / nn) * std::sqrt(p * (1.0 - p) / nn + z2 / (4.0 * nn * nn));
    return {std::clamp(centre - half, 0.0, 1.0), std::clamp(centre + half, 0.0, 1.0)};
}

}  // namespace sepsis
