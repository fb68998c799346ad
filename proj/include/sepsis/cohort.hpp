#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace sepsis {

inline constexpr int kSchemaVersion = 1;
inline constexpr std::int64_t kBinSeconds = 4 * 60 * 60;

// Reserved event channels; everything else must be a schema feature.
inline constexpr std::string_view kFluidChannel = "fluid";
inline constexpr std::string_view kVasoChannel = "vaso";
inline constexpr std::string_view kMechVentChannel = "mech_vent";
inline constexpr std::string_view kSofaChannel = "sofa";
inline constexpr std::string_view kSirsChannel = "sirs";

enum class DisplayGroup { Demographics, Vitals, Labs, Ventilation, Fluids, Other };

std::string_view to_string(DisplayGroup group);
DisplayGroup display_group_from_string(std::string_view text);

struct FeatureSpec {
    std::string name;
    double lo = 0.0;
    double hi = 0.0;
    DisplayGroup group = DisplayGroup::Other;
};

// Ordered feature list with normal reference ranges. Construction validates
// that names are unique and every range has lo < hi.
class FeatureSchema {
public:
    FeatureSchema() = default;
    explicit FeatureSchema(std::vector<FeatureSpec> features);

    const std::vector<FeatureSpec>& features() const { return features_; }
    const FeatureSpec* find(std::string_view name) const;

    // Features observed per timestep (everything outside the demographics group).
    std::vector<std::string> observation_features() const;

    // Vitals, labs and ventilation features followed by age and weight.
    std::vector<std::string> clustering_features() const;

    nlohmann::json to_json() const;
    static FeatureSchema from_json(const nlohmann::json& doc);

    bool operator==(const FeatureSchema& other) const;

private:
    std::vector<FeatureSpec> features_;
};

struct TimestepRecord {
    int bin_index = 0;
    std::map<std::string, double> features;
    // Features with no observation in this bin (forward-filled or imputed).
    std::set<std::string> imputed;
    double fluid_dose = 0.0;  // mL over the bin
    double vaso_dose = 0.0;   // max norepinephrine-equivalent, mcg/kg/min
    bool mech_vent = false;
    int sofa = 0;
    int sirs = 0;

    bool operator==(const TimestepRecord&) const = default;
};

struct Demographics {
    double age = 0.0;
    std::string gender;
    double weight = 0.0;
    std::map<std::string, bool> comorbidities;

    bool operator==(const Demographics&) const = default;
};

struct PatientTrajectory {
    std::string patient_id;
    Demographics demographics;
    std::vector<TimestepRecord> timesteps;
    bool died = false;

    bool operator==(const PatientTrajectory&) const = default;
};

using Cohort = std::vector<PatientTrajectory>;

// Value of a named feature at a timestep; "age" and "weight" resolve to the
// patient's demographics. Returns nullopt when the name is unknown.
std::optional<double> feature_value(const PatientTrajectory& patient,
                                    const TimestepRecord& record,
                                    std::string_view name);

// ---------------------------------------------------------------- ingestion

struct EventRow {
    std::string patient_id;
    std::int64_t timestamp = 0;  // seconds since the Unix epoch
    std::string channel;
    double value = 0.0;
    std::size_t line = 0;  // 1-based source line, 0 when synthetic
};

struct PatientInfo {
    Demographics demographics;
    bool died = false;
};

struct RejectedRow {
    std::size_t line = 0;
    std::string patient_id;
    std::string reason;
};

struct IngestReport {
    std::vector<RejectedRow> rejected;
    std::vector<std::string> missing_demographics;  // events but no demographics row
    std::vector<std::string> missing_events;        // demographics row but no events
    std::map<std::string, std::size_t> median_imputed;
    std::vector<std::string> never_observed;        // filled from the reference range midpoint
};

struct IngestResult {
    Cohort cohort;
    IngestReport report;
};

// Groups events into 4-hour bins anchored at each patient's first event.
// Observations are averaged, fluids summed, vasopressor rates reduced by max.
// Missing features are forward-filled, then imputed with the cohort median.
IngestResult ingest_events(std::span<const EventRow> events,
                           const std::map<std::string, PatientInfo>& patients,
                           const FeatureSchema& schema);

// ---------------------------------------------------------------- validation

struct Violation {
    std::string patient_id;
    std::optional<int> bin;
    std::string rule;
};

struct CohortSummary {
    std::size_t patients = 0;
    std::size_t timesteps = 0;
    std::size_t deaths = 0;
    std::map<std::string, double> missingness;  // fraction of bins imputed
    std::vector<Violation> violations;

    bool ok() const { return violations.empty(); }
    nlohmann::json to_json() const;
};

CohortSummary validate_cohort(const Cohort& cohort);

// ---------------------------------------------------------------- display

enum class RangeFlag { Below, Normal, Above };

std::string_view to_string(RangeFlag flag);

struct AbnormalFlags {
    std::map<std::string, RangeFlag> flags;
    std::size_t unknown_features = 0;
};

// Boundary values (== lo or == hi) are normal. Features the schema does not
// know are labeled normal and counted.
AbnormalFlags flag_abnormal(const TimestepRecord& record, const FeatureSchema& schema);

// Change of every feature relative to the previous bin.
std::map<std::string, double> trend_deltas(const TimestepRecord& previous,
                                           const TimestepRecord& current);

// ---------------------------------------------------------------- io

// ISO-8601 "YYYY-MM-DDTHH:MM:SS[.fff][Z|+HH:MM]"; throws Error(Validation).
std::int64_t parse_timestamp(std::string_view text);
std::string format_timestamp(std::int64_t seconds);

std::vector<EventRow> read_events_csv(std::istream& in);
std::map<std::string, PatientInfo> read_demographics_csv(std::istream& in);

// One event per channel per bin, at minute 10 of the bin, relative to `start`.
void write_events_csv(std::ostream& out, const Cohort& cohort, std::int64_t start);
void write_demographics_csv(std::ostream& out, const Cohort& cohort);

nlohmann::json to_json(const PatientTrajectory& patient);
PatientTrajectory trajectory_from_json(const nlohmann::json& doc);

void write_trajectories_jsonl(std::ostream& out, const Cohort& cohort);
Cohort read_trajectories_jsonl(std::istream& in);

// Loads a cohort from a directory holding events.csv, demographics.csv and
// schema.json, or from a .jsonl file (schema then read from schema.json next to it).
struct LoadedCohort {
    Cohort cohort;
    FeatureSchema schema;
    IngestReport report;
};
LoadedCohort load_cohort(const std::string& path);

FeatureSchema read_schema_file(const std::string& path);

}  // namespace sepsis
