#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "sepsis/cohort.hpp"
#include "sepsis/matrix.hpp"
#include "sepsis/statespace.hpp"

namespace sepsis {

inline constexpr int kDoseBins = 5;
inline constexpr int kNumActions = kDoseBins * kDoseBins;

inline constexpr int action_id(int fluid_bin, int vaso_bin) { return fluid_bin * kDoseBins + vaso_bin; }
inline constexpr int fluid_bin_of(int action) { return action / kDoseBins; }
inline constexpr int vaso_bin_of(int action) { return action % kDoseBins; }

enum class Channel { Fluid, Vaso };

// Linear-interpolation percentile (p in [0,1]) of an unsorted sample.
double percentile(std::vector<double> values, double p);

// Quantile edges for the two treatment channels. Bin 0 is exactly zero dose;
// bins 1-4 split the nonzero doses at the three edges, right-inclusive.
struct ActionSpace {
    std::array<double, 3> fluid_edges{};
    std::array<double, 3> vaso_edges{};
    // Representative top-bin dose (90th percentile of top-bin doses).
    double fluid_top = 0.0;
    double vaso_top = 0.0;

    // Throws DegenerateQuantiles unless both edge lists are strictly ascending and > 0.
    void validate() const;

    int bin(Channel channel, double dose) const;
    // Dose shown for a bin: 0, interval midpoints for bins 1-3, the top value for bin 4.
    double representative_dose(Channel channel, int bin) const;

    nlohmann::json to_json() const;
    static ActionSpace from_json(const nlohmann::json& doc);

    bool operator==(const ActionSpace&) const = default;
};

ActionSpace fit_action_space(const Cohort& cohort);

// Space with fixed edges; top-bin representatives taken from the cohort.
ActionSpace fixed_action_space(std::array<double, 3> fluid_edges, std::array<double, 3> vaso_edges,
                               const Cohort& cohort);

int discretize_action(const ActionSpace& space, double fluid_dose, double vaso_dose);

enum class Delta { Increase, Decrease, NoChange };

std::string_view to_string(Delta delta);
Delta delta_from_string(std::string_view text);

Delta recommended_delta(const ActionSpace& space, Channel channel, double current_dose,
                        int recommended_bin);

// ---------------------------------------------------------------- episodes

// A trajectory reduced to (state, action) pairs plus its outcome.
struct Episode {
    std::string patient_id;
    std::vector<int> states;
    std::vector<int> actions;
    bool died = false;

    std::size_t length() const { return states.size(); }
};

std::vector<Episode> to_episodes(const Cohort& cohort, const StateModel& states,
                                 const ActionSpace& space);

// ---------------------------------------------------------------- model

inline constexpr double kSurviveReward = 100.0;
inline constexpr double kDieReward = -100.0;

struct MdpModel {
    int k = 0;
    double gamma = 0.99;
    // (s, a) is estimated iff visits(s, a) > min_count.
    int min_count = 5;
    ActionSpace space;

    // transitions[s * 25 + a] = sorted (successor, count); successor k is
    // survive and k + 1 is die.
    std::vector<std::vector<std::pair<int, double>>> transitions;
    RowMatrix visits;    // k x 25
    RowMatrix behavior;  // k x 25, rows sum to 1 over observed actions
    RowMatrix q;         // k x 25, NaN where not estimated
    std::vector<int> policy;
    std::vector<int> uncovered_states;  // no action over the threshold
    bool solved = false;

    int survive_index() const { return k; }
    int die_index() const { return k + 1; }
    bool estimated(int s, int a) const { return visits(s, a) > min_count; }
    bool q_estimated(int s, int a) const { return q(s, a) == q(s, a); }

    const std::vector<std::pair<int, double>>& successors(int s, int a) const {
        return transitions[static_cast<std::size_t>(s * kNumActions + a)];
    }
    // Count-normalized transition probability.
    double transition_probability(int s, int a, int next) const;

    // Argmax of the behavior row, lowest action id on ties.
    int behavior_mode(int s) const;
};

MdpModel estimate_mdp(std::span<const Episode> episodes, int k, const ActionSpace& space,
                      double gamma, int min_count);

MdpModel estimate_mdp(const Cohort& cohort, const StateModel& states, const ActionSpace& space,
                      double gamma, int min_count);

struct PolicyIterationTrace {
    std::vector<std::vector<double>> values;  // state values after each evaluation
    std::vector<int> changed;                 // actions switched by each improvement
};

// State values of a deterministic policy on the estimated dynamics. States
// with no data, or that cannot reach a terminal state when gamma == 1, are 0.
std::vector<double> evaluate_policy(const MdpModel& model, std::span<const int> policy);

// Policy iteration restricted to estimated actions; fills q, policy and
// uncovered_states.
MdpModel policy_iteration(MdpModel model, PolicyIterationTrace* trace = nullptr);

// Q value of every estimated (s, a) under the given state values.
RowMatrix q_values(const MdpModel& model, std::span<const double> values);

// ---------------------------------------------------------------- persistence

// Writes mdp.json plus q.bin, behavior.bin and visits.bin (little-endian
// float64, row-major k x 25) into `dir`.
void save_mdp(const MdpModel& model, const std::string& dir);
MdpModel load_mdp(const std::string& dir);

void write_f64_blob(const std::string& path, std::span<const double> values);
std::vector<double> read_f64_blob(const std::string& path);

}  // namespace sepsis
