#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sepsis/cohort.hpp"
#include "sepsis/mdp.hpp"

namespace sepsis {

// Fully specified MDP used to synthesize cohorts with a known answer.
// Successor index n_states is the survive terminal, n_states + 1 is die.
struct GroundTruthMdp {
    int n_states = 0;
    int n_actions = 0;
    double gamma = 1.0;
    std::vector<int> action_ids;       // latent action -> 5x5 grid action id
    std::vector<double> initial;       // n_states
    std::vector<double> transitions;   // [s][a][n_states + 2]
    std::vector<double> behavior;      // [s][a]
    FeatureSchema schema;              // emitted observation features
    std::vector<double> emission_mean;   // [s][d]
    std::vector<double> emission_scale;  // [s][d]
    // Dose intervals: bin b of a channel draws uniformly from (edge[b-1], edge[b]],
    // the top bin from (edge[2], max].
    std::array<double, 3> fluid_edges{100.0, 250.0, 500.0};
    std::array<double, 3> vaso_edges{0.05, 0.15, 0.3};
    double fluid_max = 1000.0;
    double vaso_max = 0.6;
    std::array<double, 2> age_range{65.0, 65.0};
    std::array<double, 2> weight_range{80.0, 80.0};

    int successor_count() const { return n_states + 2; }
    double t(int s, int a, int next) const {
        return transitions[static_cast<std::size_t>((s * n_actions + a) * successor_count() + next)];
    }
    double b(int s, int a) const { return behavior[static_cast<std::size_t>(s * n_actions + a)]; }
    std::size_t dims() const { return schema.features().size(); }

    // Row sums, probabilities, gamma and shapes; throws Error(Validation).
    void validate() const;

    int latent_action(int grid_action) const;  // -1 when not a latent action

    nlohmann::json to_json() const;
    static GroundTruthMdp from_json(const nlohmann::json& doc);
};

struct SampledCohort {
    Cohort cohort;
    std::vector<std::vector<int>> latent_states;   // per patient, per timestep
    std::vector<std::vector<int>> latent_actions;  // latent action indices
};

// Deterministic given seed; patient i draws from its own stream seeded by (seed, i).
SampledCohort sample_cohort(const GroundTruthMdp& mdp, int n_patients, std::uint64_t seed, int max_len);

// Start-state value of a deterministic policy (latent action per state).
// Throws NonContractive when gamma == 1 and some state cannot terminate.
double exact_policy_value(const GroundTruthMdp& mdp, std::span<const int> policy);

// Same for a stochastic policy given as [s][latent action] probabilities.
double exact_policy_value_stochastic(const GroundTruthMdp& mdp, std::span<const double> policy);

std::vector<double> exact_state_values_stochastic(const GroundTruthMdp& mdp, std::span<const double> policy);

std::vector<double> behavior_as_policy(const GroundTruthMdp& mdp);

// Action space whose edges are the simulator's dose intervals.
ActionSpace reference_action_space(const GroundTruthMdp& mdp, const Cohort& cohort);

// A chain of n_states severity levels with well-separated emissions; used by
// the end-to-end recovery checks. `separation` is the distance between
// neighbouring emission means in units of the emission noise.
GroundTruthMdp make_separated_oracle(int n_states = 6, double separation = 8.0, double gamma = 1.0);

// Writes events.csv, demographics.csv, schema.json, latent.jsonl and
// reference_action_space.json to `dir`.
void write_sampled_cohort(const SampledCohort& sampled, const GroundTruthMdp& mdp, const std::string& dir);

}  // namespace sepsis
