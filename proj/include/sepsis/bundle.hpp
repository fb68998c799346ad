#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "sepsis/cohort.hpp"
#include "sepsis/mdp.hpp"
#include "sepsis/ope.hpp"
#include "sepsis/statespace.hpp"

namespace sepsis {

struct TrainConfig {
    int k = 750;
    double gamma = 0.99;
    int min_count = 5;
    double test_fraction = 0.2;
    std::uint64_t split_seed = 1;
    std::uint64_t state_seed = 2;
    std::uint64_t bootstrap_seed = 3;
    int n_restarts = 10;
    int max_iterations = 300;
    int n_boot = 500;
    double epsilon = 0.01;         // softening of the greedy policy for evaluation
    double behavior_alpha = 0.5;   // pseudo-count for the evaluation behavior policy
    std::string action_space_mode = "quantile";  // or "fixed"
    std::optional<std::array<double, 3>> fluid_edges;
    std::optional<std::array<double, 3>> vaso_edges;
    std::vector<std::string> features;  // empty: the schema's clustering features

    // Throws Validation naming the field.
    void validate() const;

    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& doc);

    // FNV-1a over the canonical JSON text.
    std::uint64_t hash() const;
};

TrainConfig read_train_config(const std::string& path);

std::string hex64(std::uint64_t value);

struct Provenance {
    std::string config_hash;
    std::string trained_at;
    std::string cohort_source;
    std::size_t n_train_patients = 0;
    std::size_t n_test_patients = 0;
    std::vector<std::string> test_patients;

    nlohmann::json to_json() const;
    static Provenance from_json(const nlohmann::json& doc);
};

struct ModelBundle {
    FeatureSchema schema;
    StateModel states;
    MdpModel mdp;
    TrainConfig config;
    Provenance provenance;
};

// Writes bundle.json, states.json and mdp/ into `dir`, staging in a sibling
// temporary directory that is renamed into place.
void save_bundle(const ModelBundle& bundle, const std::string& dir);

// Loads and cross-checks the config hash stamped on every component.
ModelBundle load_bundle(const std::string& dir);

// Patient-level split; returns (train, test).
std::pair<Cohort, Cohort> split_patients(const Cohort& cohort, double test_fraction, std::uint64_t seed);

struct EvaluationOptions {
    int n_boot = 500;
    std::uint64_t seed = 3;
    double epsilon = 0.01;
    double behavior_alpha = 0.5;
};

// WIS of the softened optimal policy and of the behavior policy on `cohort`.
nlohmann::json evaluate_bundle(const ModelBundle& bundle, const Cohort& cohort, const EvaluationOptions& options);

struct TrainResult {
    ModelBundle bundle;
    nlohmann::json report;
};

// Stage callback: called with the stage name before it runs.
using StageObserver = std::function<void(std::string_view stage)>;

// validate -> split -> fit_states -> fit_action_space -> estimate_mdp ->
// policy_iteration -> wis_bootstrap. A failing stage rethrows with the stage
// name prefixed.
TrainResult train_pipeline(const LoadedCohort& input, const TrainConfig& config,
                           const std::string& cohort_source = "", const StageObserver& observer = {});

// Loads the cohort and config, trains, and writes the bundle plus
// evaluation.json to `out_dir`. Nothing is left behind on failure.
TrainResult train_to_disk(const std::string& cohort_path, const std::string& config_path,
                          const std::string& out_dir, const StageObserver& observer = {});

}  // namespace sepsis
