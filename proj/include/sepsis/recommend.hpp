#pragma once

#include <array>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "sepsis/cohort.hpp"
#include "sepsis/explain.hpp"
#include "sepsis/mdp.hpp"
#include "sepsis/statespace.hpp"

namespace sepsis {

// Cell (i, j) holds action i * 5 + j: fluid bin i, vasopressor bin j.
using ActionGrid = std::array<std::array<std::optional<double>, kDoseBins>, kDoseBins>;
using ProbabilityGrid = std::array<std::array<double, kDoseBins>, kDoseBins>;

struct Alternative {
    int action_id = 0;
    std::optional<double> q;  // absent when ranked by clinician frequency
    double clinician_frequency = 0.0;
};

inline constexpr std::size_t kMaxAlternatives = 5;

inline constexpr std::string_view kDefaultRecommendationTemplate =
    "For this patient, the AI recommends {fluid_action} IV fluids ({fluid_dose:.0f} mL over the next "
    "4 hours) and {vaso_action} vasopressors ({vaso_dose:.2f} mcg/kg/min).";

struct RecommendationPayload {
    std::string patient_id;
    int bin_index = 0;
    int state_id = 0;
    ActionGrid q_heatmap{};
    ProbabilityGrid clinician_probs{};
    int recommended_action = 0;
    double recommended_fluid_dose = 0.0;
    double recommended_vaso_dose = 0.0;
    // Dose in effect when the decision is made (previous bin, 0 at the first bin).
    double current_fluid_dose = 0.0;
    double current_vaso_dose = 0.0;
    Delta fluid_delta = Delta::NoChange;
    Delta vaso_delta = Delta::NoChange;
    std::string text;
    std::vector<Alternative> alternatives;
    bool alternatives_from_q = true;
    bool low_data = false;
    std::optional<StateExplanation> explanation;

    nlohmann::json to_json() const;
};

// Highest estimated Q, lowest action id among values within 1e-9 of the max.
// Returns nullopt when no action in the state is estimated.
std::optional<int> best_estimated_action(const MdpModel& mdp, int state);

struct PayloadOptions {
    std::string text_template{kDefaultRecommendationTemplate};
};

// Payload for one timestep. `explainer` may be null, in which case the
// explanation is omitted.
RecommendationPayload build_payload(const MdpModel& mdp, const StateModel& states,
                                    const StateExplainer* explainer, const PatientTrajectory& patient,
                                    int bin_index, const PayloadOptions& options = {});

// Dose in effect before bin `position` (0 at the first bin).
std::pair<double, double> current_doses(const PatientTrajectory& patient, std::size_t position);

// Text with {fluid_action}, {vaso_action}, {fluid_dose} and {vaso_dose} placeholders.
std::string render_recommendation(const std::string& text_template, Delta fluid, Delta vaso,
                                  double fluid_dose, double vaso_dose);

// ---------------------------------------------------------------- browsing

struct ValueRange {
    double lo = 0.0;
    double hi = 0.0;
    bool contains(double v) const { return v >= lo && v <= hi; }
};

struct CohortFilter {
    std::optional<ValueRange> age;
    std::set<std::string> genders;        // empty = any
    std::set<std::string> comorbidities;  // patient must have every one
    std::optional<bool> died;
    std::optional<ValueRange> sofa;  // against the patient's maximum over the stay
    std::optional<ValueRange> sirs;
    std::set<int> clinician_actions;  // timestep level, empty = any
    std::set<int> model_actions;

    bool has_timestep_predicates() const { return !clinician_actions.empty() || !model_actions.empty(); }
    // Throws Validation when a range has lo > hi or an action id is outside [0, 24].
    void validate() const;
};

struct FieldError {
    std::string field;
    std::string message;
};

// Builds a filter from query parameters (age_min, age_max, gender, comorbidity,
// outcome, sofa_min, sofa_max, sirs_min, sirs_max, clinician_actions,
// model_actions). List values are comma separated. Problems are appended to
// `errors`.
CohortFilter filter_from_params(const std::multimap<std::string, std::string>& params,
                                std::vector<FieldError>& errors);

struct FilterMatch {
    std::string patient_id;
    std::vector<int> bins;  // matching bin indices
};

std::vector<FilterMatch> filter_cohort(const Cohort& cohort, const MdpModel& mdp, const StateModel& states,
                                       const CohortFilter& filter);

struct DiscordantCase {
    std::string patient_id;
    int bin_index = 0;
    int state_id = 0;
    int clinician_action = 0;
    int model_action = 0;
    int plurality_action = 0;
    bool fluid_differs = false;
    bool vaso_differs = false;

    std::string label() const;
    nlohmann::json to_json() const;
};

// Plurality clinician action of a state: argmax of the behavior row, lowest id on ties.
int plurality_action(const MdpModel& mdp, int state);

// Timesteps whose state's optimal action differs from the state's plurality
// clinician action in at least one component.
std::vector<DiscordantCase> find_discordant_cases(const Cohort& cohort, const MdpModel& mdp,
                                                  const StateModel& states);

enum class SortKey { Age, Sofa, StayLength, Discordant };

SortKey sort_key_from_string(std::string_view text);

struct BrowseEntry {
    std::string patient_id;
    double age = 0.0;
    std::string gender;
    bool died = false;
    int max_sofa = 0;
    int max_sirs = 0;
    std::size_t stay_length = 0;  // bins
    std::size_t discordant_bins = 0;
    std::vector<int> matching_bins;

    nlohmann::json to_json() const;
};

std::vector<BrowseEntry> browse(const Cohort& cohort, const MdpModel& mdp, const StateModel& states,
                                const CohortFilter& filter);

// Stable sort by the key, ties broken by patient id.
void sort_entries(std::vector<BrowseEntry>& entries, SortKey key, bool descending);

}  // namespace sepsis
