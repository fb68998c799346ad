#include "sepsis/ope.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <fmt/format.h>

#include "sepsis/error.hpp"

namespace sepsis {

PolicyMatrix soften_policy(std::span<const int> greedy, double epsilon) {
    PolicyMatrix out(greedy.size(), kNumActions, epsilon / (kNumActions - 1));
    for (std::size_t s = 0; s < greedy.size(); ++s) {
        out(s, static_cast<std::size_t>(greedy[s])) = 1.0 - epsilon;
    }
    return out;
}

PolicyMatrix smoothed_behavior(const MdpModel& model, double alpha) {
    PolicyMatrix out(static_cast<std::size_t>(model.k), kNumActions);
    for (int s = 0; s < model.k; ++s) {
        double total = 0.0;
        for (int a = 0; a < kNumActions; ++a) total += model.visits(s, a) + alpha;
        for (int a = 0; a < kNumActions; ++a) {
            out(static_cast<std::size_t>(s), static_cast<std::size_t>(a)) =
                total > 0.0 ? (model.visits(s, a) + alpha) / total : 1.0 / kNumActions;
        }
    }
    return out;
}

TrajectoryWeights trajectory_weights(const PolicyMatrix& eval, const PolicyMatrix& behavior,
                                     std::span<const Episode> episodes, const WisOptions& options) {
    TrajectoryWeights out;
    out.weights.reserve(episodes.size());
    out.returns.reserve(episodes.size());
    for (const auto& e : episodes) {
        double w = 1.0;
        for (std::size_t t = 0; t < e.length(); ++t) {
            const auto s = static_cast<std::size_t>(e.states[t]);
            const auto a = static_cast<std::size_t>(e.actions[t]);
            if (s >= eval.rows() || s >= behavior.rows()) {
                throw Error(ErrorCode::Validation,
                            fmt::format("trajectory '{}': state {} outside the policy tables", e.patient_id, s));
            }
            const double pb = behavior(s, a);
            if (!(pb > 0.0)) {
                throw Error(ErrorCode::Validation,
                            fmt::format("trajectory '{}': behavior probability of action {} in state {} is zero",
                                        e.patient_id, a, s));
            }
            w *= eval(s, a) / pb;
        }
        if (!std::isfinite(w)) {
            throw Error(ErrorCode::NoOverlap,
                        fmt::format("importance weight of trajectory '{}' is not finite", e.patient_id));
        }
        w = std::min(w, options.max_weight);
        const double terminal = e.died ? kDieReward : kSurviveReward;
        out.weights.push_back(w);
        out.returns.push_back(std::pow(options.gamma, static_cast<double>(e.length()) - 1.0) * terminal);
    }
    return out;
}

double weighted_return(std::span<const double> weights, std::span<const double> returns) {
    double num = 0.0;
    double den = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        num += weights[i] * returns[i];
        den += weights[i];
    }
    if (!std::isfinite(den) || !std::isfinite(num)) {
        const auto worst = std::max_element(weights.begin(), weights.end()) - weights.begin();
        throw Error(ErrorCode::NoOverlap,
                    fmt::format("sum of importance weights is not finite (largest weight at trajectory {})", worst));
    }
    if (den == 0.0) throw Error(ErrorCode::NoOverlap, "no overlap: every importance weight is zero");
    return num / den;
}

double wis_value(const PolicyMatrix& eval, const PolicyMatrix& behavior,
                 std::span<const Episode> episodes, const WisOptions& options) {
    if (episodes.empty()) throw Error(ErrorCode::EmptyCohort, "wis_value: no trajectories");
    const auto tw = trajectory_weights(eval, behavior, episodes, options);
    return weighted_return(tw.weights, tw.returns);
}

WisEstimate wis_bootstrap(const PolicyMatrix& eval, const PolicyMatrix& behavior,
                          std::span<const Episode> episodes, const WisOptions& options,
                          int n_boot, std::uint64_t seed) {
    if (n_boot < 1) throw Error(ErrorCode::Validation, "wis_bootstrap: n_boot must be >= 1");
    if (episodes.empty()) throw Error(ErrorCode::EmptyCohort, "wis_bootstrap: no trajectories");

    const auto tw = trajectory_weights(eval, behavior, episodes, options);
    WisEstimate est;
    est.options = options;
    est.n_boot = n_boot;
    est.n_trajectories = episodes.size();
    est.value = weighted_return(tw.weights, tw.returns);
    double sw = 0.0;
    double sw2 = 0.0;
    for (double w : tw.weights) {
        sw += w;
        sw2 += w * w;
    }
    est.ess = sw2 > 0.0 ? sw * sw / sw2 : 0.0;

    const std::size_t n = tw.weights.size();
    std::vector<double> rw(n);
    std::vector<double> rg(n);
    for (int r = 0; r < n_boot; ++r) {
        std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                          static_cast<std::uint32_t>(r)};
        std::mt19937_64 rng(seq);
        std::uniform_int_distribution<std::size_t> pick(0, n - 1);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t j = pick(rng);
            rw[i] = tw.weights[j];
            rg[i] = tw.returns[j];
        }
        try {
            est.replicates.push_back(weighted_return(rw, rg));
        } catch (const Error& e) {
            if (e.code() != ErrorCode::NoOverlap) throw;
            ++est.n_failed;
        }
    }
    if (est.replicates.empty()) {
        throw Error(ErrorCode::NoOverlap, "no overlap in any bootstrap replicate");
    }
    est.ci_lo = percentile(est.replicates, 0.025);
    est.ci_hi = percentile(est.replicates, 0.975);
    return est;
}

nlohmann::json WisEstimate::to_json() const {
    return {{"schema_version", kSchemaVersion},
            {"value", value},
            {"ci_lo", ci_lo},
            {"ci_hi", ci_hi},
            {"n_boot", n_boot},
            {"n_failed", n_failed},
            {"n_traj", n_trajectories},
            {"ess", ess},
            {"config",
             {{"gamma", options.gamma},
              {"max_weight", std::isfinite(options.max_weight) ? nlohmann::json(options.max_weight)
                                                               : nlohmann::json(nullptr)},
              {"ci", "percentile 95%"}}}};
}

}  // namespace sepsis
