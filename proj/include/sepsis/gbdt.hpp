#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "json.hpp"
#include "sepsis/matrix.hpp"

namespace sepsis {

struct GbdtOptions {
    int n_trees = 100;
    int max_depth = 3;
    double learning_rate = 0.3;
    double l2 = 1.0;
    double min_child_hessian = 1e-3;
    int max_bins = 64;
};

// Binary classifier: depth-limited regression trees fit to the logistic-loss
// gradient (second-order leaf values), histogram split search.
class GradientBoostedTrees {
public:
    static GradientBoostedTrees fit(const RowMatrix& x, std::span<const int> labels,
                                    const GbdtOptions& options);

    double margin(std::span<const double> x) const;
    double probability(std::span<const double> x) const;

    std::size_t n_trees() const { return trees_.size(); }
    std::size_t n_features() const { return n_features_; }
    int depth() const;

    nlohmann::json to_json() const;

private:
    struct Node {
        int feature = -1;  // -1 marks a leaf
        double threshold = 0.0;
        int left = -1;
        int right = -1;
        double value = 0.0;
    };

    double base_margin_ = 0.0;
    std::size_t n_features_ = 0;
    std::vector<std::vector<Node>> trees_;
};

}  // namespace sepsis
