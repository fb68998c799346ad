#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sepsis/cohort.hpp"
#include "sepsis/matrix.hpp"

namespace sepsis {

// Standardization statistics plus k centroids in z-scored space.
struct StateModel {
    std::vector<std::string> feature_order;     // retained features, clustering order
    std::vector<std::string> dropped_features;  // constant in the training cohort
    std::vector<double> means;
    std::vector<double> stds;
    int k = 0;
    std::uint64_t seed = 0;
    int n_restarts = 0;
    RowMatrix centroids;  // k x feature_order.size()
    double wcss = 0.0;

    std::size_t dims() const { return feature_order.size(); }

    // Raw feature vector (feature_order) -> z-scores.
    std::vector<double> standardize(std::span<const double> raw) const;
    // z-scores -> raw feature vector.
    std::vector<double> unstandardize(std::span<const double> z) const;

    nlohmann::json to_json() const;
    static StateModel from_json(const nlohmann::json& doc);

    bool operator==(const StateModel&) const = default;
};

struct KMeansOptions {
    int k = 750;
    std::uint64_t seed = 0;
    int n_restarts = 10;
    int max_iterations = 300;
};

struct KMeansTrace {
    // WCSS after every centroid update, one series per restart.
    std::vector<std::vector<double>> wcss;
    std::vector<int> iterations;
    int best_restart = 0;
    std::vector<std::string> warnings;
};

// Feature matrix for the given names, one row per timestep in cohort order.
RowMatrix extract_feature_matrix(const Cohort& cohort, std::span<const std::string> names);

std::vector<double> extract_features(const StateModel& model, const PatientTrajectory& patient,
                                     const TimestepRecord& record);

// k-means++ seeding, Lloyd iterations, n_restarts restarts keeping the lowest
// WCSS. Constant features are dropped and reported through trace->warnings.
StateModel fit_states(const RowMatrix& raw, std::span<const std::string> names,
                      const KMeansOptions& options, KMeansTrace* trace = nullptr);

StateModel fit_states(const Cohort& cohort, std::span<const std::string> names,
                      const KMeansOptions& options, KMeansTrace* trace = nullptr);

// Nearest centroid in standardized space; ties go to the lowest state id.
int assign_state(const StateModel& model, std::span<const double> raw_features);
int assign_state(const StateModel& model, const PatientTrajectory& patient,
                 const TimestepRecord& record);

// State id per timestep, flattened in cohort order.
std::vector<int> assign_states(const StateModel& model, const Cohort& cohort);

}  // namespace sepsis
