#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "json.hpp"
#include "sepsis/matrix.hpp"
#include "sepsis/mdp.hpp"

namespace sepsis {

// Per-state action distributions, rows = states, columns = the 25 grid actions.
using PolicyMatrix = RowMatrix;

// (1 - epsilon) on the greedy action, epsilon / 24 on every other action.
PolicyMatrix soften_policy(std::span<const int> greedy, double epsilon);

// Behavior policy from visit counts with `alpha` pseudo-counts per action.
PolicyMatrix smoothed_behavior(const MdpModel& model, double alpha = 0.5);

struct WisOptions {
    double gamma = 0.99;
    double max_weight = std::numeric_limits<double>::infinity();  // per-trajectory cap
};

struct TrajectoryWeights {
    std::vector<double> weights;
    std::vector<double> returns;
};

// w_i = prod_t eval(a_t|s_t) / behavior(a_t|s_t);  G_i = gamma^(T_i - 1) * (+-100).
TrajectoryWeights trajectory_weights(const PolicyMatrix& eval, const PolicyMatrix& behavior,
                                     std::span<const Episode> episodes, const WisOptions& options);

// Self-normalized weighted mean; throws NoOverlap when every weight is zero.
double weighted_return(std::span<const double> weights, std::span<const double> returns);

double wis_value(const PolicyMatrix& eval, const PolicyMatrix& behavior,
                 std::span<const Episode> episodes, const WisOptions& options);

struct WisEstimate {
    double value = 0.0;
    double ci_lo = 0.0;
    double ci_hi = 0.0;
    int n_boot = 0;
    int n_failed = 0;  // replicates with no overlap
    std::size_t n_trajectories = 0;
    double ess = 0.0;  // (sum w)^2 / sum w^2
    WisOptions options;
    std::vector<double> replicates;  // in replicate-index order, failures omitted

    nlohmann::json to_json() const;
};

// Percentile bootstrap over trajectories; replicate r resamples with a stream
// seeded by (seed, r), so results do not depend on evaluation order.
WisEstimate wis_bootstrap(const PolicyMatrix& eval, const PolicyMatrix& behavior,
                          std::span<const Episode> episodes, const WisOptions& options,
                          int n_boot, std::uint64_t seed);

}  // namespace sepsis
