#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <shared_mutex>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sepsis/cohort.hpp"
#include "sepsis/gbdt.hpp"
#include "sepsis/matrix.hpp"
#include "sepsis/shapley.hpp"
#include "sepsis/statespace.hpp"

namespace sepsis {

enum class Direction { Above, Below, Equal };

std::string_view to_string(Direction direction);

struct FeatureAttribution {
    std::string name;
    double attribution = 0.0;
    Direction direction = Direction::Equal;  // instance value vs. cohort mean
};

struct StateExplanation {
    int state_id = 0;
    std::vector<FeatureAttribution> top_features;  // |attribution| descending, at most 5
    double baseline = 0.0;
    double score = 0.0;
    double mortality_rate = 0.0;
    std::size_t n_support = 0;
    std::string description;

    nlohmann::json to_json() const;
};

inline constexpr std::size_t kTopFeatures = 5;

// One-vs-rest membership classifier on raw feature vectors.
GradientBoostedTrees fit_state_classifier(const RowMatrix& features, std::span<const int> states,
                                          int state_id, const GbdtOptions& options);

// Ranks attributions by magnitude (stable on ties), keeps the top five and
// labels each with the instance's direction relative to the cohort mean.
StateExplanation describe_state(int state_id, std::span<const std::string> names,
                                const ShapleyResult& attributions,
                                std::span<const double> instance,
                                std::span<const double> cohort_means,
                                double mortality_rate, std::size_t n_support);

// Deaths among patients whose trajectory visits the state over patients visiting it.
double state_mortality_rate(std::span<const int> row_states, std::span<const std::size_t> row_patients,
                            const std::vector<bool>& patient_died, int state_id);

struct ExplainOptions {
    GbdtOptions gbdt;
    std::size_t background_size = 256;
    int n_perm = 64;
    std::uint64_t seed = 0;
    // Training rows per classifier; in-state rows are always kept, the rest are
    // subsampled deterministically.
    std::size_t max_train_rows = 20000;
    ShapleyMethod method = ShapleyMethod::Auto;
};

// Per-state explanations over a training cohort. Classifiers are trained on
// first use and cached; the cache is safe for concurrent callers.
class StateExplainer {
public:
    StateExplainer(const Cohort& cohort, const StateModel& model, ExplainOptions options = {});

    std::size_t n_support(int state_id) const;
    double mortality_rate(int state_id) const;
    const std::vector<double>& cohort_means() const { return means_; }
    const RowMatrix& background() const { return background_; }

    std::shared_ptr<const GradientBoostedTrees> classifier(int state_id) const;

    // Explains the membership score of `instance` (raw features in model order).
    StateExplanation explain(int state_id, std::span<const double> instance) const;

    std::size_t cached_classifiers() const;

private:
    const StateModel* model_;
    ExplainOptions options_;
    RowMatrix features_;
    std::vector<int> states_;
    std::vector<std::size_t> patients_;
    std::vector<bool> died_;
    std::vector<std::size_t> support_;
    std::vector<double> mortality_;
    std::vector<double> means_;
    RowMatrix background_;

    mutable std::shared_mutex mutex_;
    mutable std::map<int, std::shared_ptr<const GradientBoostedTrees>> cache_;
};

}  // namespace sepsis
