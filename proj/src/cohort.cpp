#include "sepsis/cohort.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_map>
#include <unordered_set>

#include <fmt/format.h>

#include "sepsis/error.hpp"

namespace sepsis {

std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::EmptyCohort: return "empty_cohort";
        case ErrorCode::Validation: return "validation";
        case ErrorCode::InsufficientData: return "insufficient_data";
        case ErrorCode::DegenerateQuantiles: return "degenerate_quantiles";
        case ErrorCode::NonContractive: return "non_contractive";
        case ErrorCode::NoOverlap: return "no_overlap";
        case ErrorCode::UnsupportedState: return "unsupported_state";
        case ErrorCode::RankDeficient: return "rank_deficient";
        case ErrorCode::Separation: return "separation";
        case ErrorCode::NonConvergence: return "non_convergence";
        case ErrorCode::UnknownCase: return "unknown_case";
        case ErrorCode::NotFound: return "not_found";
        case ErrorCode::Io: return "io";
    }
    return "unknown";
}

std::string_view to_string(DisplayGroup group) {
    switch (group) {
        case DisplayGroup::Demographics: return "demographics";
        case DisplayGroup::Vitals: return "vitals";
        case DisplayGroup::Labs: return "labs";
        case DisplayGroup::Ventilation: return "ventilation";
        case DisplayGroup::Fluids: return "fluids";
        case DisplayGroup::Other: return "other";
    }
    return "other";
}

DisplayGroup display_group_from_string(std::string_view text) {
    if (text == "demographics") return DisplayGroup::Demographics;
    if (text == "vitals") return DisplayGroup::Vitals;
    if (text == "labs") return DisplayGroup::Labs;
    if (text == "ventilation") return DisplayGroup::Ventilation;
    if (text == "fluids") return DisplayGroup::Fluids;
    return DisplayGroup::Other;
}

std::string_view to_string(RangeFlag flag) {
    switch (flag) {
        case RangeFlag::Below: return "below";
        case RangeFlag::Normal: return "normal";
        case RangeFlag::Above: return "above";
    }
    return "normal";
}

// ---------------------------------------------------------------- schema

namespace {

bool is_reserved_channel(std::string_view name) {
    return name == kFluidChannel || name == kVasoChannel || name == kMechVentChannel ||
           name == kSofaChannel || name == kSirsChannel;
}

}  // namespace

FeatureSchema::FeatureSchema(std::vector<FeatureSpec> features) : features_(std::move(features)) {
    std::unordered_set<std::string> seen;
    for (const auto& f : features_) {
        if (f.name.empty()) {
            throw Error(ErrorCode::Validation, "feature schema: empty feature name");
        }
        if (!seen.insert(f.name).second) {
            throw Error(ErrorCode::Validation,
                        fmt::format("feature schema: duplicate feature '{}'", f.name));
        }
        if (!(f.lo < f.hi)) {
            throw Error(ErrorCode::Validation,
                        fmt::format("feature schema: range for '{}' must have lo < hi", f.name));
        }
        if (is_reserved_channel(f.name)) {
            throw Error(ErrorCode::Validation,
                        fmt::format("feature schema: '{}' is a reserved channel name", f.name));
        }
    }
}

const FeatureSpec* FeatureSchema::find(std::string_view name) const {
    auto it = std::find_if(features_.begin(), features_.end(),
                           [&](const FeatureSpec& f) { return f.name == name; });
    return it == features_.end() ? nullptr : &*it;
}

std::vector<std::string> FeatureSchema::observation_features() const {
    std::vector<std::string> out;
    for (const auto& f : features_) {
        if (f.group != DisplayGroup::Demographics) out.push_back(f.name);
    }
    return out;
}

std::vector<std::string> FeatureSchema::clustering_features() const {
    std::vector<std::string> out;
    for (const auto& f : features_) {
        if (f.group == DisplayGroup::Vitals || f.group == DisplayGroup::Labs ||
            f.group == DisplayGroup::Ventilation) {
            out.push_back(f.name);
        }
    }
    out.emplace_back("age");
    out.emplace_back("weight");
    return out;
}

bool FeatureSchema::operator==(const FeatureSchema& other) const {
    if (features_.size() != other.features_.size()) return false;
    for (std::size_t i = 0; i < features_.size(); ++i) {
        const auto& a = features_[i];
        const auto& b = other.features_[i];
        if (a.name != b.name || a.lo != b.lo || a.hi != b.hi || a.group != b.group) return false;
    }
    return true;
}

std::optional<double> feature_value(const PatientTrajectory& patient,
                                    const TimestepRecord& record, std::string_view name) {
    if (auto it = record.features.find(std::string(name)); it != record.features.end()) {
        return it->second;
    }
    if (name == "age") return patient.demographics.age;
    if (name == "weight") return patient.demographics.weight;
    return std::nullopt;
}

// ---------------------------------------------------------------- ingestion

namespace {

struct BinAccumulator {
    std::map<std::string, std::pair<double, int>> sums;  // feature -> (sum, count)
    double fluid = 0.0;
    double vaso = 0.0;
    std::optional<bool> mech_vent;
    std::optional<int> sofa;
    std::optional<int> sirs;
};

double median_of(std::vector<double> values) {
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    if (n % 2 == 1) return values[n / 2];
    return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

}  // namespace

IngestResult ingest_events(std::span<const EventRow> events,
                           const std::map<std::string, PatientInfo>& patients,
                           const FeatureSchema& schema) {
    if (events.empty()) {
        throw Error(ErrorCode::EmptyCohort, "empty cohort: event stream has no rows");
    }

    IngestResult result;
    const auto observed = schema.observation_features();
    const std::unordered_set<std::string> observed_set(observed.begin(), observed.end());

    // Accept or reject rows; dose sign is the only fatal row-level check.
    std::map<std::string, std::vector<const EventRow*>> by_patient;
    for (const auto& row : events) {
        const bool is_dose = row.channel == kFluidChannel || row.channel == kVasoChannel;
        if (is_dose && row.value < 0.0) {
            throw Error(ErrorCode::Validation,
                        fmt::format("negative dose on line {} (patient '{}', channel '{}', value {})",
                                    row.line, row.patient_id, row.channel, row.value));
        }
        if (!is_reserved_channel(row.channel) && !observed_set.contains(row.channel)) {
            result.report.rejected.push_back(
                {row.line, row.patient_id, fmt::format("unknown channel '{}'", row.channel)});
            continue;
        }
        if (!std::isfinite(row.value)) {
            result.report.rejected.push_back({row.line, row.patient_id, "non-finite value"});
            continue;
        }
        by_patient[row.patient_id].push_back(&row);
    }

    for (const auto& [id, info] : patients) {
        if (!by_patient.contains(id)) result.report.missing_events.push_back(id);
    }

    // Bin each patient; features are forward-filled here, medians come later.
    std::map<std::string, std::vector<double>> observed_values;
    for (auto& [id, rows] : by_patient) {
        auto info = patients.find(id);
        if (info == patients.end()) {
            result.report.missing_demographics.push_back(id);
            continue;
        }
        std::stable_sort(rows.begin(), rows.end(), [](const EventRow* a, const EventRow* b) {
            return a->timestamp < b->timestamp;
        });
        const std::int64_t anchor = rows.front()->timestamp;
        const int last_bin = static_cast<int>((rows.back()->timestamp - anchor) / kBinSeconds);
        std::vector<BinAccumulator> bins(static_cast<std::size_t>(last_bin) + 1);

        for (const EventRow* row : rows) {
            auto& bin = bins[static_cast<std::size_t>((row->timestamp - anchor) / kBinSeconds)];
            if (row->channel == kFluidChannel) {
                bin.fluid += row->value;
            } else if (row->channel == kVasoChannel) {
                bin.vaso = std::max(bin.vaso, row->value);
            } else if (row->channel == kMechVentChannel) {
                bin.mech_vent = bin.mech_vent.value_or(false) || row->value != 0.0;
            } else if (row->channel == kSofaChannel) {
                bin.sofa = std::max(bin.sofa.value_or(0), static_cast<int>(std::lround(row->value)));
            } else if (row->channel == kSirsChannel) {
                bin.sirs = std::max(bin.sirs.value_or(0), static_cast<int>(std::lround(row->value)));
            } else {
                auto& [sum, count] = bin.sums[row->channel];
                sum += row->value;
                ++count;
            }
        }

        PatientTrajectory traj;
        traj.patient_id = id;
        traj.demographics = info->second.demographics;
        traj.died = info->second.died;
        traj.timesteps.reserve(bins.size());

        std::map<std::string, double> carried;
        bool vent = false;
        std::optional<int> sofa;
        std::optional<int> sirs;
        for (std::size_t b = 0; b < bins.size(); ++b) {
            const auto& acc = bins[b];
            TimestepRecord rec;
            rec.bin_index = static_cast<int>(b);
            for (const auto& name : observed) {
                if (auto it = acc.sums.find(name); it != acc.sums.end()) {
                    const double mean = it->second.first / it->second.second;
                    carried[name] = mean;
                    observed_values[name].push_back(mean);
                    rec.features[name] = mean;
                } else {
                    rec.imputed.insert(name);
                    if (auto c = carried.find(name); c != carried.end()) {
                        rec.features[name] = c->second;
                    }
                }
            }
            rec.fluid_dose = acc.fluid;
            rec.vaso_dose = acc.vaso;
            if (acc.mech_vent) vent = *acc.mech_vent;
            if (acc.sofa) sofa = acc.sofa;
            if (acc.sirs) sirs = acc.sirs;
            rec.mech_vent = vent;
            rec.sofa = sofa.value_or(0);
            rec.sirs = sirs.value_or(0);
            traj.timesteps.push_back(std::move(rec));
        }
        result.cohort.push_back(std::move(traj));
    }

    if (result.cohort.empty()) {
        throw Error(ErrorCode::EmptyCohort, "empty cohort: no patient has both events and demographics");
    }

    // Cohort-median imputation for anything forward-fill could not reach.
    std::map<std::string, double> medians;
    for (const auto& name : observed) {
        auto it = observed_values.find(name);
        if (it != observed_values.end() && !it->second.empty()) {
            medians[name] = median_of(it->second);
        } else {
            const auto* spec = schema.find(name);
            medians[name] = 0.5 * (spec->lo + spec->hi);
            result.report.never_observed.push_back(name);
        }
    }
    for (auto& traj : result.cohort) {
        for (auto& rec : traj.timesteps) {
            for (const auto& name : observed) {
                if (!rec.features.contains(name)) {
                    rec.features[name] = medians[name];
                    ++result.report.median_imputed[name];
                }
            }
        }
    }
    return result;
}

// ---------------------------------------------------------------- validation

CohortSummary validate_cohort(const Cohort& cohort) {
    CohortSummary summary;
    summary.patients = cohort.size();
    if (cohort.empty()) {
        summary.violations.push_back({"", std::nullopt, "cohort empty"});
        return summary;
    }

    std::unordered_set<std::string> ids;
    std::map<std::string, std::size_t> imputed_counts;
    for (const auto& p : cohort) {
        const auto& id = p.patient_id;
        if (!ids.insert(id).second) {
            summary.violations.push_back({id, std::nullopt, "duplicate patient_id"});
        }
        summary.timesteps += p.timesteps.size();
        summary.deaths += p.died ? 1 : 0;
        if (p.timesteps.empty()) {
            summary.violations.push_back({id, std::nullopt, "trajectory has no timesteps"});
        }
        if (!(p.demographics.weight > 0.0)) {
            summary.violations.push_back({id, std::nullopt, "weight must be > 0"});
        }
        if (!(p.demographics.age >= 0.0)) {
            summary.violations.push_back({id, std::nullopt, "age must be >= 0"});
        }
        for (std::size_t t = 0; t < p.timesteps.size(); ++t) {
            const auto& rec = p.timesteps[t];
            if (rec.bin_index != static_cast<int>(t)) {
                summary.violations.push_back(
                    {id, rec.bin_index,
                     fmt::format("non-consecutive bin index {} at position {}", rec.bin_index, t)});
            }
            if (!(rec.fluid_dose >= 0.0)) {
                summary.violations.push_back({id, rec.bin_index, "fluid_dose must be >= 0"});
            }
            if (!(rec.vaso_dose >= 0.0)) {
                summary.violations.push_back({id, rec.bin_index, "vaso_dose must be >= 0"});
            }
            if (rec.sofa < 0 || rec.sofa > 24) {
                summary.violations.push_back({id, rec.bin_index, "sofa outside [0,24]"});
            }
            if (rec.sirs < 0 || rec.sirs > 4) {
                summary.violations.push_back({id, rec.bin_index, "sirs outside [0,4]"});
            }
            for (const auto& [name, value] : rec.features) {
                if (!std::isfinite(value)) {
                    summary.violations.push_back(
                        {id, rec.bin_index, fmt::format("feature '{}' is not finite", name)});
                }
                imputed_counts.try_emplace(name, 0);
            }
            for (const auto& name : rec.imputed) ++imputed_counts[name];
        }
    }
    if (summary.timesteps > 0) {
        for (const auto& [name, count] : imputed_counts) {
            summary.missingness[name] =
                static_cast<double>(count) / static_cast<double>(summary.timesteps);
        }
    }
    return summary;
}

nlohmann::json CohortSummary::to_json() const {
    nlohmann::json violations_json = nlohmann::json::array();
    for (const auto& v : violations) {
        nlohmann::json entry{{"patient_id", v.patient_id}, {"rule", v.rule}};
        entry["bin"] = v.bin ? nlohmann::json(*v.bin) : nlohmann::json(nullptr);
        violations_json.push_back(std::move(entry));
    }
    return {{"schema_version", kSchemaVersion},
            {"patients", patients},
            {"timesteps", timesteps},
            {"deaths", deaths},
            {"missingness", missingness},
            {"violations", std::move(violations_json)}};
}

// ---------------------------------------------------------------- display

AbnormalFlags flag_abnormal(const TimestepRecord& record, const FeatureSchema& schema) {
    AbnormalFlags out;
    for (const auto& [name, value] : record.features) {
        const auto* spec = schema.find(name);
        if (spec == nullptr) {
            out.flags[name] = RangeFlag::Normal;
            ++out.unknown_features;
            continue;
        }
        if (value < spec->lo) {
            out.flags[name] = RangeFlag::Below;
        } else if (value > spec->hi) {
            out.flags[name] = RangeFlag::Above;
        } else {
            out.flags[name] = RangeFlag::Normal;
        }
    }
    return out;
}

std::map<std::string, double> trend_deltas(const TimestepRecord& previous,
                                           const TimestepRecord& current) {
    std::map<std::string, double> out;
    for (const auto& [name, value] : current.features) {
        if (auto it = previous.features.find(name); it != previous.features.end()) {
            out[name] = value - it->second;
        }
    }
    return out;
}

}  // namespace sepsis
