#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "sepsis/mdp.hpp"
#include "sepsis/stats.hpp"

namespace sepsis {

enum class Role { Attending, Fellow, App };
enum class Condition { NoAi, TextOnly, FeatureExplanation, AlternativeTreatments };

inline constexpr std::array<Condition, 4> kConditions = {Condition::NoAi, Condition::TextOnly,
                                                         Condition::FeatureExplanation,
                                                         Condition::AlternativeTreatments};

std::string_view to_string(Role role);
Role role_from_string(std::string_view text);
std::string_view to_string(Condition condition);
Condition condition_from_string(std::string_view text);

struct TreatmentDecision {
    Delta fluid = Delta::NoChange;
    Delta vaso = Delta::NoChange;

    bool operator==(const TreatmentDecision&) const = default;
};

struct Likert {
    int confidence = 0;
    int difficulty = 0;
    std::optional<int> usefulness;            // AI conditions only
    std::optional<int> ai_confidence_effect;  // AI conditions only

    bool operator==(const Likert&) const = default;
};

struct DecisionRecord {
    std::string record_id;  // assigned by the log
    std::string idempotency_key;
    std::string participant_id;
    Role role = Role::Attending;
    std::string years_experience;
    std::string case_id;
    Condition condition = Condition::NoAi;
    TreatmentDecision choice;
    Likert likert;
    std::string timestamp;
    std::optional<std::string> supersedes;

    nlohmann::json to_json() const;
    // Throws Validation naming the offending field.
    static DecisionRecord from_json(const nlohmann::json& doc);

    bool operator==(const DecisionRecord&) const = default;
};

struct ReferenceCase {
    std::string case_id;
    std::string patient_id;
    int bin_index = 0;
    std::string pseudonym;
    std::string vignette;
    double current_fluid_dose = 0.0;
    double current_vaso_dose = 0.0;
    TreatmentDecision ai;
    TreatmentDecision original_clinician;
    std::optional<TreatmentDecision> majority_attending;

    nlohmann::json to_json() const;
    static ReferenceCase from_json(const std::string& case_id, const nlohmann::json& doc);
};

struct ReferenceDecisions {
    std::map<std::string, ReferenceCase> cases;

    const ReferenceCase* find(const std::string& case_id) const;

    nlohmann::json to_json() const;
    static ReferenceDecisions from_json(const nlohmann::json& doc);
};

ReferenceDecisions read_references(const std::string& path);
void write_references(const std::string& path, const ReferenceDecisions& refs);

struct RuleViolation {
    std::string rule;
    std::string message;
};

// Likert bounds, condition-dependent Likert fields, and the removed decrease
// option for channels whose current dose is zero.
std::vector<RuleViolation> validate_decision(const DecisionRecord& record, const ReferenceDecisions& refs);

struct Concordance {
    bool full = false;
    bool any = false;
};

Concordance concordance(const TreatmentDecision& decision, const TreatmentDecision& reference);

// Most frequent (fluid, vaso) pair among attending decisions under no_ai;
// nullopt when there are none or the top count is tied.
std::optional<TreatmentDecision> majority_attending(std::span<const DecisionRecord> log,
                                                    const std::string& case_id);

// Records not replaced by a later record's supersedes pointer.
std::vector<DecisionRecord> effective_records(std::span<const DecisionRecord> log);

enum class IntervalMethod { Normal, Wilson };

struct RateCell {
    Condition condition = Condition::NoAi;
    std::string reference;  // ai, original_clinician, majority_attending
    std::size_t n = 0;
    std::size_t full_count = 0;
    std::size_t any_count = 0;
    std::optional<double> full_rate;  // absent when n == 0
    std::optional<double> any_rate;
    Interval full_ci;
    Interval any_ci;

    nlohmann::json to_json() const;
};

inline constexpr std::array<std::string_view, 3> kReferenceNames = {"ai", "original_clinician",
                                                                    "majority_attending"};

// Per condition x reference rates over the effective records. Throws
// UnknownCase naming the record when a case_id has no reference entry. A
// missing majority-attending reference is derived from the log itself.
std::vector<RateCell> concordance_rates(std::span<const DecisionRecord> log, const ReferenceDecisions& refs,
                                        IntervalMethod method = IntervalMethod::Normal);

// Append-only JSON-lines log. Appends are serialized; a repeated idempotency
// key returns the original record without writing.
class DecisionLog {
public:
    explicit DecisionLog(std::filesystem::path path);

    struct AppendResult {
        DecisionRecord record;
        bool created = false;
    };

    // Assigns record_id (and timestamp when empty) and appends. Throws
    // Validation when `supersedes` names an unknown record.
    AppendResult append(DecisionRecord record);

    std::vector<DecisionRecord> snapshot() const;
    std::size_t size() const;

    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
    mutable std::mutex mutex_;
    std::vector<DecisionRecord> records_;
    std::map<std::string, std::size_t> by_key_;
    std::set<std::string> ids_;
};

std::vector<DecisionRecord> read_decision_log(const std::string& path);

struct StudyReportOptions {
    IntervalMethod interval = IntervalMethod::Normal;
    double alpha = 0.05;
};

// Concordance table, Likert OLS models, concordance logit models and Holm
// adjusted pairwise contrasts. Models that cannot be fit report their error.
nlohmann::json study_report(std::span<const DecisionRecord> log, const ReferenceDecisions& refs,
                            const StudyReportOptions& options = {});

// Text rendering of study_report output.
std::string format_study_report(const nlohmann::json& report);

std::string now_timestamp();

}  // namespace sepsis
