#include "sepsis/explain.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numeric>
#include <random>

#include <fmt/format.h>

#include "sepsis/error.hpp"

namespace sepsis {

std::string_view to_string(Direction direction) {
    switch (direction) {
        case Direction::Above: return "above";
        case Direction::Below: return "below";
        case Direction::Equal: return "equal";
    }
    return "equal";
}

nlohmann::json StateExplanation::to_json() const {
    nlohmann::json features = nlohmann::json::array();
    for (const auto& f : top_features) {
        features.push_back({{"name", f.name},
                            {"attribution", f.attribution},
                            {"direction", std::string(to_string(f.direction))}});
    }
    return {{"schema_version", kSchemaVersion},
            {"state_id", state_id},
            {"features", std::move(features)},
            {"baseline", baseline},
            {"score", score},
            {"mortality_rate", mortality_rate},
            {"n_support", n_support},
            {"description", description}};
}

GradientBoostedTrees fit_state_classifier(const RowMatrix& features, std::span<const int> states,
                                          int state_id, const GbdtOptions& options) {
    if (states.size() != features.rows()) {
        throw Error(ErrorCode::Validation, "fit_state_classifier: one state label per row required");
    }
    std::vector<int> labels(states.size());
    std::size_t support = 0;
    for (std::size_t i = 0; i < states.size(); ++i) {
        labels[i] = states[i] == state_id ? 1 : 0;
        support += static_cast<std::size_t>(labels[i]);
    }
    if (support == 0) {
        throw Error(ErrorCode::UnsupportedState,
                    fmt::format("unsupported state {}: no timesteps in the training cohort", state_id));
    }
    return GradientBoostedTrees::fit(features, labels, options);
}

StateExplanation describe_state(int state_id, std::span<const std::string> names,
                                const ShapleyResult& attributions,
                                std::span<const double> instance,
                                std::span<const double> cohort_means,
                                double mortality_rate, std::size_t n_support) {
    const std::size_t d = attributions.values.size();
    std::vector<std::size_t> order(d);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return std::abs(attributions.values[a]) > std::abs(attributions.values[b]);
    });

    StateExplanation out;
    out.state_id = state_id;
    out.baseline = attributions.baseline;
    out.score = attributions.score;
    out.mortality_rate = mortality_rate;
    out.n_support = n_support;
    for (std::size_t r = 0; r < std::min(d, kTopFeatures); ++r) {
        const std::size_t j = order[r];
        FeatureAttribution fa;
        fa.name = names[j];
        fa.attribution = attributions.values[j];
        if (instance[j] > cohort_means[j]) {
            fa.direction = Direction::Above;
        } else if (instance[j] < cohort_means[j]) {
            fa.direction = Direction::Below;
        }
        out.top_features.push_back(std::move(fa));
    }

    std::string text = fmt::format("State {} ({} timesteps, {:.0f}% mortality).", state_id, n_support,
                                   100.0 * mortality_rate);
    std::vector<std::string> parts;
    for (const auto& f : out.top_features) {
        if (parts.size() == 3) break;
        if (f.direction == Direction::Equal) continue;
        parts.push_back(fmt::format("{} {}", f.direction == Direction::Above ? "high" : "low", f.name));
    }
    if (!parts.empty()) {
        text += " Distinguished by ";
        for (std::size_t i = 0; i < parts.size(); ++i) {
            if (i > 0) text += i + 1 == parts.size() ? " and " : ", ";
            text += parts[i];
        }
        text += ".";
    }
    out.description = std::move(text);
    return out;
}

double state_mortality_rate(std::span<const int> row_states, std::span<const std::size_t> row_patients,
                            const std::vector<bool>& patient_died, int state_id) {
    std::vector<std::size_t> visitors;
    for (std::size_t i = 0; i < row_states.size(); ++i) {
        if (row_states[i] == state_id) visitors.push_back(row_patients[i]);
    }
    std::sort(visitors.begin(), visitors.end());
    visitors.erase(std::unique(visitors.begin(), visitors.end()), visitors.end());
    if (visitors.empty()) return 0.0;
    std::size_t deaths = 0;
    for (std::size_t p : visitors) deaths += patient_died[p] ? 1 : 0;
    return static_cast<double>(deaths) / static_cast<double>(visitors.size());
}

StateExplainer::StateExplainer(const Cohort& cohort, const StateModel& model, ExplainOptions options)
    : model_(&model), options_(options) {
    features_ = extract_feature_matrix(cohort, model.feature_order);
    states_.reserve(features_.rows());
    for (std::size_t p = 0; p < cohort.size(); ++p) {
        died_.push_back(cohort[p].died);
        for (std::size_t t = 0; t < cohort[p].timesteps.size(); ++t) {
            patients_.push_back(p);
            states_.push_back(assign_state(model, features_.row(states_.size())));
        }
    }
    if (features_.empty()) throw Error(ErrorCode::EmptyCohort, "explainer: training cohort has no timesteps");

    const auto k = static_cast<std::size_t>(model.k);
    support_.assign(k, 0);
    for (int s : states_) ++support_[static_cast<std::size_t>(s)];
    mortality_.assign(k, 0.0);
    {
        std::vector<std::vector<std::size_t>> visitors(k);
        for (std::size_t i = 0; i < states_.size(); ++i) {
            auto& v = visitors[static_cast<std::size_t>(states_[i])];
            if (v.empty() || v.back() != patients_[i]) v.push_back(patients_[i]);
        }
        for (std::size_t s = 0; s < k; ++s) {
            auto& v = visitors[s];
            std::sort(v.begin(), v.end());
            v.erase(std::unique(v.begin(), v.end()), v.end());
            if (v.empty()) continue;
            std::size_t deaths = 0;
            for (std::size_t p : v) deaths += died_[p] ? 1 : 0;
            mortality_[s] = static_cast<double>(deaths) / static_cast<double>(v.size());
        }
    }

    const std::size_t n = features_.rows();
    const std::size_t d = features_.cols();
    means_.assign(d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) means_[j] += features_(i, j);
    }
    for (double& m : means_) m /= static_cast<double>(n);

    // Stratified background: systematic sample over rows grouped by state.
    std::mt19937_64 rng(options_.seed);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return states_[a] < states_[b]; });
    const std::size_t m = std::min(options_.background_size, n);
    const double offset = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    for (std::size_t i = 0; i < m; ++i) {
        const auto pos = std::min(
            n - 1, static_cast<std::size_t>((static_cast<double>(i) + offset) * static_cast<double>(n) /
                                            static_cast<double>(m)));
        background_.append_row(features_.row(order[pos]));
    }
}

std::size_t StateExplainer::n_support(int state_id) const {
    if (state_id < 0 || state_id >= model_->k) return 0;
    return support_[static_cast<std::size_t>(state_id)];
}

double StateExplainer::mortality_rate(int state_id) const {
    if (state_id < 0 || state_id >= model_->k) return 0.0;
    return mortality_[static_cast<std::size_t>(state_id)];
}

std::shared_ptr<const GradientBoostedTrees> StateExplainer::classifier(int state_id) const {
    {
        std::shared_lock lock(mutex_);
        auto it = cache_.find(state_id);
        if (it != cache_.end()) return it->second;
    }
    if (n_support(state_id) == 0) {
        throw Error(ErrorCode::UnsupportedState,
                    fmt::format("unsupported state {}: no timesteps in the training cohort", state_id));
    }

    // Training happens outside the lock; a concurrent duplicate fit produces the
    // same model and the first insertion wins.
    RowMatrix x;
    std::vector<int> row_states;
    const std::size_t n = features_.rows();
    if (n <= options_.max_train_rows) {
        x = features_;
        row_states.assign(states_.begin(), states_.end());
    } else {
        std::vector<std::size_t> in_state;
        std::vector<std::size_t> others;
        for (std::size_t i = 0; i < n; ++i) (states_[i] == state_id ? in_state : others).push_back(i);
        const std::size_t keep = options_.max_train_rows > in_state.size()
                                     ? options_.max_train_rows - in_state.size()
                                     : std::min<std::size_t>(others.size(), in_state.size());
        std::vector<std::size_t> picked;
        std::mt19937_64 rng(options_.seed ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(state_id + 1)));
        std::sample(others.begin(), others.end(), std::back_inserter(picked), keep, rng);
        picked.insert(picked.end(), in_state.begin(), in_state.end());
        std::sort(picked.begin(), picked.end());
        for (std::size_t i : picked) {
            x.append_row(features_.row(i));
            row_states.push_back(states_[i]);
        }
    }
    auto fitted = std::make_shared<const GradientBoostedTrees>(
        fit_state_classifier(x, row_states, state_id, options_.gbdt));

    std::unique_lock lock(mutex_);
    return cache_.emplace(state_id, std::move(fitted)).first->second;
}

StateExplanation StateExplainer::explain(int state_id, std::span<const double> instance) const {
    if (instance.size() != features_.cols()) {
        throw Error(ErrorCode::Validation,
                    fmt::format("explain: instance has {} features, model expects {}", instance.size(),
                                features_.cols()));
    }
    const auto clf = classifier(state_id);
    auto scorer = [&clf](std::span<const double> x) { return clf->margin(x); };
    const auto attributions = shapley_attribution(
        scorer, instance, background_, options_.n_perm,
        options_.seed + static_cast<std::uint64_t>(state_id), options_.method);
    return describe_state(state_id, model_->feature_order, attributions, instance, means_,
                          mortality_rate(state_id), n_support(state_id));
}

std::size_t StateExplainer::cached_classifiers() const {
    std::shared_lock lock(mutex_);
    return cache_.size();
}

}  // namespace sepsis
