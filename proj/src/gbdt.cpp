#include "sepsis/gbdt.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>

#include "sepsis/error.hpp"

namespace sepsis {

namespace {

double sigmoid(double m) { return 1.0 / (1.0 + std::exp(-m)); }

// Split candidates: midpoints between (quantile-spaced) consecutive distinct values.
std::vector<double> cut_points(std::vector<double> values, int max_bins) {
    std::sort(values.begin(), values.end());
    values.erase(std::unique(values.begin(), values.end()), values.end());
    std::vector<double> cuts;
    if (values.size() < 2) return cuts;
    const std::size_t u = values.size();
    if (u <= static_cast<std::size_t>(max_bins)) {
        for (std::size_t i = 0; i + 1 < u; ++i) cuts.push_back(0.5 * (values[i] + values[i + 1]));
        return cuts;
    }
    for (int b = 1; b < max_bins; ++b) {
        const std::size_t idx = static_cast<std::size_t>(b) * u / static_cast<std::size_t>(max_bins);
        const double c = 0.5 * (values[idx - 1] + values[idx]);
        if (cuts.empty() || c > cuts.back()) cuts.push_back(c);
    }
    return cuts;
}

struct SplitChoice {
    double gain = 0.0;
    int feature = -1;
    int bin = -1;
};

}  // namespace

GradientBoostedTrees GradientBoostedTrees::fit(const RowMatrix& x, std::span<const int> labels,
                                               const GbdtOptions& options) {
    const std::size_t n = x.rows();
    const std::size_t d = x.cols();
    if (n == 0 || labels.size() != n) {
        throw Error(ErrorCode::Validation, "gbdt: labels must match a non-empty feature matrix");
    }

    GradientBoostedTrees model;
    model.n_features_ = d;

    std::vector<std::vector<double>> cuts(d);
    std::vector<std::uint16_t> binned(n * d);
    for (std::size_t j = 0; j < d; ++j) {
        std::vector<double> column(n);
        for (std::size_t i = 0; i < n; ++i) column[i] = x(i, j);
        cuts[j] = cut_points(column, options.max_bins);
        for (std::size_t i = 0; i < n; ++i) {
            binned[i * d + j] = static_cast<std::uint16_t>(
                std::lower_bound(cuts[j].begin(), cuts[j].end(), x(i, j)) - cuts[j].begin());
        }
    }

    const double positives = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
    const double prior = std::clamp(positives / static_cast<double>(n), 1e-6, 1.0 - 1e-6);
    model.base_margin_ = std::log(prior / (1.0 - prior));

    std::vector<double> margin(n, model.base_margin_);
    std::vector<double> grad(n);
    std::vector<double> hess(n);
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), 0);

    for (int t = 0; t < options.n_trees; ++t) {
        for (std::size_t i = 0; i < n; ++i) {
            const double p = sigmoid(margin[i]);
            grad[i] = p - static_cast<double>(labels[i]);
            hess[i] = std::max(p * (1.0 - p), 1e-16);
        }

        std::vector<Node> tree;
        std::function<int(const std::vector<std::size_t>&, int)> grow =
            [&](const std::vector<std::size_t>& rows, int depth) -> int {
            double g = 0.0;
            double h = 0.0;
            for (std::size_t i : rows) {
                g += grad[i];
                h += hess[i];
            }
            const int index = static_cast<int>(tree.size());
            tree.push_back(Node{});
            tree[static_cast<std::size_t>(index)].value = -options.learning_rate * g / (h + options.l2);
            if (depth >= options.max_depth || rows.size() < 2) return index;

            const double parent_score = g * g / (h + options.l2);
            SplitChoice best;
            for (std::size_t j = 0; j < d; ++j) {
                const std::size_t bins = cuts[j].size() + 1;
                if (bins < 2) continue;
                std::vector<double> hg(bins, 0.0);
                std::vector<double> hh(bins, 0.0);
                for (std::size_t i : rows) {
                    hg[binned[i * d + j]] += grad[i];
                    hh[binned[i * d + j]] += hess[i];
                }
                double gl = 0.0;
                double hl = 0.0;
                for (std::size_t b = 0; b + 1 < bins; ++b) {
                    gl += hg[b];
                    hl += hh[b];
                    const double gr = g - gl;
                    const double hr = h - hl;
                    if (hl < options.min_child_hessian || hr < options.min_child_hessian) continue;
                    const double gain =
                        gl * gl / (hl + options.l2) + gr * gr / (hr + options.l2) - parent_score;
                    if (gain > best.gain + 1e-12) {
                        best = {gain, static_cast<int>(j), static_cast<int>(b)};
                    }
                }
            }
            if (best.feature < 0) return index;

            std::vector<std::size_t> left;
            std::vector<std::size_t> right;
            const auto fj = static_cast<std::size_t>(best.feature);
            for (std::size_t i : rows) {
                (binned[i * d + fj] <= best.bin ? left : right).push_back(i);
            }
            const int l = grow(left, depth + 1);
            const int r = grow(right, depth + 1);
            auto& node = tree[static_cast<std::size_t>(index)];
            node.feature = best.feature;
            node.threshold = cuts[fj][static_cast<std::size_t>(best.bin)];
            node.left = l;
            node.right = r;
            return index;
        };
        grow(all, 0);

        for (std::size_t i = 0; i < n; ++i) {
            int node = 0;
            while (tree[static_cast<std::size_t>(node)].feature >= 0) {
                const auto& nd = tree[static_cast<std::size_t>(node)];
                node = x(i, static_cast<std::size_t>(nd.feature)) <= nd.threshold ? nd.left : nd.right;
            }
            margin[i] += tree[static_cast<std::size_t>(node)].value;
        }
        model.trees_.push_back(std::move(tree));
    }
    return model;
}

double GradientBoostedTrees::margin(std::span<const double> x) const {
    double m = base_margin_;
    for (const auto& tree : trees_) {
        int node = 0;
        while (tree[static_cast<std::size_t>(node)].feature >= 0) {
            const auto& nd = tree[static_cast<std::size_t>(node)];
            node = x[static_cast<std::size_t>(nd.feature)] <= nd.threshold ? nd.left : nd.right;
        }
        m += tree[static_cast<std::size_t>(node)].value;
    }
    return m;
}

double GradientBoostedTrees::probability(std::span<const double> x) const { return sigmoid(margin(x)); }

int GradientBoostedTrees::depth() const {
    int deepest = 0;
    for (const auto& tree : trees_) {
        std::function<int(int)> walk = [&](int node) -> int {
            const auto& nd = tree[static_cast<std::size_t>(node)];
            if (nd.feature < 0) return 0;
            return 1 + std::max(walk(nd.left), walk(nd.right));
        };
        deepest = std::max(deepest, walk(0));
    }
    return deepest;
}

nlohmann::json GradientBoostedTrees::to_json() const {
    nlohmann::json trees = nlohmann::json::array();
    for (const auto& tree : trees_) {
        nlohmann::json nodes = nlohmann::json::array();
        for (const auto& nd : tree) {
            nodes.push_back({nd.feature, nd.threshold, nd.left, nd.right, nd.value});
        }
        trees.push_back(std::move(nodes));
    }
    return {{"base_margin", base_margin_}, {"n_features", n_features_}, {"trees", std::move(trees)}};
}

}  // namespace sepsis
