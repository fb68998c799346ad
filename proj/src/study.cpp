#include "sepsis/study.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "sepsis/cohort.hpp"
#include "sepsis/error.hpp"

namespace sepsis {

std::string_view to_string(Role role) {
    switch (role) {
        case Role::Attending: return "attending";
        case Role::Fellow: return "fellow";
        case Role::App: return "app";
    }
    return "attending";
}

Role role_from_string(std::string_view text) {
    if (text == "attending") return Role::Attending;
    if (text == "fellow") return Role::Fellow;
    if (text == "app") return Role::App;
    throw Error(ErrorCode::Validation, fmt::format("unknown role '{}'", text));
}

std::string_view to_string(Condition condition) {
    switch (condition) {
        case Condition::NoAi: return "no_ai";
        case Condition::TextOnly: return "text_only";
        case Condition::FeatureExplanation: return "feature_explanation";
        case Condition::AlternativeTreatments: return "alternative_treatments";
    }
    return "no_ai";
}

Condition condition_from_string(std::string_view text) {
    for (auto c : kConditions) {
        if (to_string(c) == text) return c;
    }
    throw Error(ErrorCode::Validation, fmt::format("unknown condition '{}'", text));
}

std::string now_timestamp() {
    const auto now = std::chrono::system_clock::now();
    return format_timestamp(std::chrono::duration_cast<std::chrono::seconds>(now.time_since_epoch()).count());
}

namespace {

nlohmann::json decision_json(const TreatmentDecision& d) {
    return {{"fluid", std::string(to_string(d.fluid))}, {"vaso", std::string(to_string(d.vaso))}};
}

TreatmentDecision decision_from_json(const nlohmann::json& doc, std::string_view field) {
    if (!doc.is_object() || !doc.contains("fluid") || !doc.contains("vaso")) {
        throw Error(ErrorCode::Validation, fmt::format("{}: expected {{\"fluid\", \"vaso\"}}", field));
    }
    try {
        return {delta_from_string(doc.at("fluid").get<std::string>()),
                delta_from_string(doc.at("vaso").get<std::string>())};
    } catch (const nlohmann::json::exception&) {
        throw Error(ErrorCode::Validation, fmt::format("{}: deltas must be strings", field));
    }
}

template <class T>
T required(const nlohmann::json& doc, const char* field) {
    if (!doc.contains(field)) throw Error(ErrorCode::Validation, fmt::format("missing field '{}'", field));
    try {
        return doc.at(field).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw Error(ErrorCode::Validation, fmt::format("field '{}' has the wrong type", field));
    }
}

template <class T>
std::optional<T> optional_field(const nlohmann::json& doc, const char* field) {
    if (!doc.contains(field) || doc.at(field).is_null()) return std::nullopt;
    try {
        return doc.at(field).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw Error(ErrorCode::Validation, fmt::format("field '{}' has the wrong type", field));
    }
}

}  // namespace

nlohmann::json DecisionRecord::to_json() const {
    nlohmann::json likert_doc = {{"confidence", likert.confidence}, {"difficulty", likert.difficulty}};
    if (likert.usefulness) likert_doc["usefulness"] = *likert.usefulness;
    if (likert.ai_confidence_effect) likert_doc["ai_confidence_effect"] = *likert.ai_confidence_effect;
    nlohmann::json doc = {{"schema_version", kSchemaVersion},
                          {"record_id", record_id},
                          {"idempotency_key", idempotency_key},
                          {"participant_id", participant_id},
                          {"role", std::string(to_string(role))},
                          {"years_experience", years_experience},
                          {"case_id", case_id},
                          {"condition", std::string(to_string(condition))},
                          {"fluid_choice", std::string(to_string(choice.fluid))},
                          {"vaso_choice", std::string(to_string(choice.vaso))},
                          {"likert", std::move(likert_doc)},
                          {"timestamp", timestamp}};
    doc["supersedes"] = supersedes ? nlohmann::json(*supersedes) : nlohmann::json(nullptr);
    return doc;
}

DecisionRecord DecisionRecord::from_json(const nlohmann::json& doc) {
    if (!doc.is_object()) throw Error(ErrorCode::Validation, "decision must be a JSON object");
    DecisionRecord r;
    r.record_id = optional_field<std::string>(doc, "record_id").value_or("");
    r.idempotency_key = optional_field<std::string>(doc, "idempotency_key").value_or("");
    r.participant_id = required<std::string>(doc, "participant_id");
    r.role = role_from_string(required<std::string>(doc, "role"));
    r.years_experience = optional_field<std::string>(doc, "years_experience").value_or("");
    r.case_id = required<std::string>(doc, "case_id");
    r.condition = condition_from_string(required<std::string>(doc, "condition"));
    r.choice.fluid = delta_from_string(required<std::string>(doc, "fluid_choice"));
    r.choice.vaso = delta_from_string(required<std::string>(doc, "vaso_choice"));
    if (!doc.contains("likert") || !doc.at("likert").is_object()) {
        throw Error(ErrorCode::Validation, "missing field 'likert'");
    }
    const auto& lk = doc.at("likert");
    r.likert.confidence = required<int>(lk, "confidence");
    r.likert.difficulty = required<int>(lk, "difficulty");
    r.likert.usefulness = optional_field<int>(lk, "usefulness");
    r.likert.ai_confidence_effect = optional_field<int>(lk, "ai_confidence_effect");
    r.timestamp = optional_field<std::string>(doc, "timestamp").value_or("");
    r.supersedes = optional_field<std::string>(doc, "supersedes");
    if (r.participant_id.empty()) throw Error(ErrorCode::Validation, "participant_id must not be empty");
    if (r.case_id.empty()) throw Error(ErrorCode::Validation, "case_id must not be empty");
    return r;
}

nlohmann::json ReferenceCase::to_json() const {
    nlohmann::json doc = {{"patient_id", patient_id},
                          {"bin", bin_index},
                          {"pseudonym", pseudonym},
                          {"vignette", vignette},
                          {"current_dose", {{"fluid_ml", current_fluid_dose}, {"vaso_mcg_kg_min", current_vaso_dose}}},
                          {"ai", decision_json(ai)},
                          {"original_clinician", decision_json(original_clinician)}};
    doc["majority_attending"] = majority_attending ? decision_json(*majority_attending) : nlohmann::json(nullptr);
    return doc;
}

ReferenceCase ReferenceCase::from_json(const std::string& case_id, const nlohmann::json& doc) {
    ReferenceCase c;
    c.case_id = case_id;
    c.patient_id = optional_field<std::string>(doc, "patient_id").value_or("");
    c.bin_index = optional_field<int>(doc, "bin").value_or(0);
    c.pseudonym = optional_field<std::string>(doc, "pseudonym").value_or("");
    c.vignette = optional_field<std::string>(doc, "vignette").value_or("");
    if (doc.contains("current_dose")) {
        const auto& cd = doc.at("current_dose");
        c.current_fluid_dose = optional_field<double>(cd, "fluid_ml").value_or(0.0);
        c.current_vaso_dose = optional_field<double>(cd, "vaso_mcg_kg_min").value_or(0.0);
    }
    if (!doc.contains("ai")) throw Error(ErrorCode::Validation, fmt::format("case '{}': missing 'ai'", case_id));
    c.ai = decision_from_json(doc.at("ai"), "ai");
    if (!doc.contains("original_clinician")) {
        throw Error(ErrorCode::Validation, fmt::format("case '{}': missing 'original_clinician'", case_id));
    }
    c.original_clinician = decision_from_json(doc.at("original_clinician"), "original_clinician");
    if (doc.contains("majority_attending") && !doc.at("majority_attending").is_null()) {
        c.majority_attending = decision_from_json(doc.at("majority_attending"), "majority_attending");
    }
    return c;
}

const ReferenceCase* ReferenceDecisions::find(const std::string& case_id) const {
    auto it = cases.find(case_id);
    return it == cases.end() ? nullptr : &it->second;
}

nlohmann::json ReferenceDecisions::to_json() const {
    nlohmann::json doc = nlohmann::json::object();
    for (const auto& [id, c] : cases) doc[id] = c.to_json();
    return {{"schema_version", kSchemaVersion}, {"cases", std::move(doc)}};
}

ReferenceDecisions ReferenceDecisions::from_json(const nlohmann::json& doc) {
    ReferenceDecisions refs;
    const auto& cases = doc.contains("cases") ? doc.at("cases") : doc;
    if (!cases.is_object()) throw Error(ErrorCode::Validation, "references: expected an object keyed by case_id");
    for (const auto& [id, c] : cases.items()) {
        if (id == "schema_version") continue;
        refs.cases.emplace(id, ReferenceCase::from_json(id, c));
    }
    return refs;
}

ReferenceDecisions read_references(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::Io, fmt::format("cannot open references file '{}'", path));
    try {
        return ReferenceDecisions::from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(ErrorCode::Validation, fmt::format("references file '{}': {}", path, e.what()));
    }
}

void write_references(const std::string& path, const ReferenceDecisions& refs) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::Io, fmt::format("cannot write references file '{}'", path));
    out << refs.to_json().dump(2) << '\n';
}

std::vector<RuleViolation> validate_decision(const DecisionRecord& record, const ReferenceDecisions& refs) {
    std::vector<RuleViolation> out;
    auto likert_range = [&](const char* name, int v) {
        if (v < 1 || v > 7) out.push_back({"likert_range", fmt::format("likert.{} = {} outside [1, 7]", name, v)});
    };
    likert_range("confidence", record.likert.confidence);
    likert_range("difficulty", record.likert.difficulty);
    const bool ai = record.condition != Condition::NoAi;
    for (auto [name, value] : {std::pair{"usefulness", record.likert.usefulness},
                               std::pair{"ai_confidence_effect", record.likert.ai_confidence_effect}}) {
        if (ai && !value) {
            out.push_back({"likert_required", fmt::format("likert.{} is required under condition {}", name,
                                                          to_string(record.condition))});
        } else if (!ai && value) {
            out.push_back({"likert_not_applicable", fmt::format("likert.{} must be absent under condition no_ai", name)});
        } else if (value) {
            likert_range(name, *value);
        }
    }
    const ReferenceCase* c = refs.find(record.case_id);
    if (!c) {
        out.push_back({"unknown_case", fmt::format("case '{}' is not part of the study", record.case_id)});
        return out;
    }
    if (record.choice.fluid == Delta::Decrease && c->current_fluid_dose == 0.0) {
        out.push_back({"decrease_removed",
                       "the end/decrease option was removed: current IV fluid dose is zero"});
    }
    if (record.choice.vaso == Delta::Decrease && c->current_vaso_dose == 0.0) {
        out.push_back({"decrease_removed",
                       "the end/decrease option was removed: current vasopressor dose is zero"});
    }
    return out;
}

Concordance concordance(const TreatmentDecision& decision, const TreatmentDecision& reference) {
    const bool f = decision.fluid == reference.fluid;
    const bool v = decision.vaso == reference.vaso;
    return {f && v, f || v};
}

std::vector<DecisionRecord> effective_records(std::span<const DecisionRecord> log) {
    std::set<std::string> replaced;
    for (const auto& r : log) {
        if (r.supersedes) replaced.insert(*r.supersedes);
    }
    std::vector<DecisionRecord> out;
    for (const auto& r : log) {
        if (!r.record_id.empty() && replaced.count(r.record_id)) continue;
        out.push_back(r);
    }
    return out;
}

std::optional<TreatmentDecision> majority_attending(std::span<const DecisionRecord> log,
                                                    const std::string& case_id) {
    std::map<std::pair<int, int>, int> counts;
    for (const auto& r : effective_records(log)) {
        if (r.case_id != case_id || r.role != Role::Attending || r.condition != Condition::NoAi) continue;
        ++counts[{static_cast<int>(r.choice.fluid), static_cast<int>(r.choice.vaso)}];
    }
    if (counts.empty()) return std::nullopt;
    int best = 0;
    int ties = 0;
    std::pair<int, int> key;
    for (const auto& [k, n] : counts) {
        if (n > best) {
            best = n;
            ties = 1;
            key = k;
        } else if (n == best) {
            ++ties;
        }
    }
    if (ties > 1) return std::nullopt;
    return TreatmentDecision{static_cast<Delta>(key.first), static_cast<Delta>(key.second)};
}

nlohmann::json RateCell::to_json() const {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    nlohmann::json doc = {{"condition", std::string(to_string(condition))},
                          {"reference", reference},
                          {"n", n},
                          {"full_count", full_count},
                          {"any_count", any_count},
                          {"full_rate", opt(full_rate)},
                          {"any_rate", opt(any_rate)}};
    if (n > 0) {
        doc["full_ci"] = {full_ci.lo, full_ci.hi};
        doc["any_ci"] = {any_ci.lo, any_ci.hi};
    } else {
        doc["full_ci"] = nullptr;
        doc["any_ci"] = nullptr;
    }
    return doc;
}

std::vector<RateCell> concordance_rates(std::span<const DecisionRecord> log, const ReferenceDecisions& refs,
                                        IntervalMethod method) {
    const auto records = effective_records(log);
    for (const auto& r : records) {
        if (!refs.find(r.case_id)) {
            throw Error(ErrorCode::UnknownCase, fmt::format("record '{}' (participant '{}') names unknown case '{}'",
                                                            r.record_id, r.participant_id, r.case_id));
        }
    }
    std::map<std::string, std::optional<TreatmentDecision>> majority;
    for (const auto& [id, c] : refs.cases) {
        majority[id] = c.majority_attending ? c.majority_attending : majority_attending(records, id);
    }

    std::vector<RateCell> out;
    for (auto condition : kConditions) {
        for (auto ref_name : kReferenceNames) {
            RateCell cell;
            cell.condition = condition;
            cell.reference = std::string(ref_name);
            for (const auto& r : records) {
                if (r.condition != condition) continue;
                const auto& c = *refs.find(r.case_id);
                std::optional<TreatmentDecision> ref;
                if (ref_name == "ai") {
                    ref = c.ai;
                } else if (ref_name == "original_clinician") {
                    ref = c.original_clinician;
                } else {
                    ref = majority.at(r.case_id);
                }
                if (!ref) continue;
                const auto k = concordance(r.choice, *ref);
                ++cell.n;
                cell.full_count += k.full ? 1 : 0;
                cell.any_count += k.any ? 1 : 0;
            }
            if (cell.n > 0) {
                const double n = static_cast<double>(cell.n);
                cell.full_rate = static_cast<double>(cell.full_count) / n;
                cell.any_rate = static_cast<double>(cell.any_count) / n;
                auto ci = method == IntervalMethod::Wilson ? wilson_interval : normal_interval;
                cell.full_ci = ci(*cell.full_rate, cell.n, 1.959963984540054);
                cell.any_ci = ci(*cell.any_rate, cell.n, 1.959963984540054);
            }
            out.push_back(cell);
        }
    }
    return out;
}

// ---------------------------------------------------------------- log

namespace {

void write_line(const std::filesystem::path& path, const std::string& line) {
    std::ofstream out(path, std::ios::app);
    if (!out) throw Error(ErrorCode::Io, fmt::format("cannot append to decision log '{}'", path.string()));
    out << line << '\n';
    out.flush();
    if (!out) throw Error(ErrorCode::Io, fmt::format("write to decision log '{}' failed", path.string()));
}

}  // namespace

std::vector<DecisionRecord> read_decision_log(const std::string& path) {
    std::vector<DecisionRecord> out;
    std::ifstream in(path);
    if (!in) return out;
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (line.empty()) continue;
        try {
            out.push_back(DecisionRecord::from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::parse_error& e) {
            throw Error(ErrorCode::Io, fmt::format("decision log '{}' line {}: {}", path, number, e.what()));
        } catch (const Error& e) {
            throw Error(ErrorCode::Io, fmt::format("decision log '{}' line {}: {}", path, number, e.what()));
        }
    }
    return out;
}

DecisionLog::DecisionLog(std::filesystem::path path) : path_(std::move(path)) {
    records_ = read_decision_log(path_.string());
    for (std::size_t i = 0; i < records_.size(); ++i) {
        ids_.insert(records_[i].record_id);
        if (!records_[i].idempotency_key.empty()) by_key_.emplace(records_[i].idempotency_key, i);
    }
}

DecisionLog::AppendResult DecisionLog::append(DecisionRecord record) {
    std::lock_guard lock(mutex_);
    if (!record.idempotency_key.empty()) {
        auto it = by_key_.find(record.idempotency_key);
        if (it != by_key_.end()) return {records_[it->second], false};
    }
    if (record.supersedes && !ids_.count(*record.supersedes)) {
        throw Error(ErrorCode::Validation,
                    fmt::format("supersedes names unknown record '{}'", *record.supersedes));
    }
    record.record_id = fmt::format("D{:06d}", records_.size() + 1);
    if (record.timestamp.empty()) record.timestamp = now_timestamp();
    write_line(path_, record.to_json().dump());
    ids_.insert(record.record_id);
    if (!record.idempotency_key.empty()) by_key_.emplace(record.idempotency_key, records_.size());
    records_.push_back(record);
    return {std::move(record), true};
}

std::vector<DecisionRecord> DecisionLog::snapshot() const {
    std::lock_guard lock(mutex_);
    return records_;
}

std::size_t DecisionLog::size() const {
    std::lock_guard lock(mutex_);
    return records_.size();
}

// ---------------------------------------------------------------- report

namespace {

nlohmann::json adjusted_contrasts(const RegressionResult& r, double alpha) {
    std::vector<double> ps;
    for (const auto& c : r.contrasts) ps.push_back(std::isfinite(c.p_value) ? c.p_value : 1.0);
    const auto holm = holm_bonferroni(ps, alpha);
    nlohmann::json doc = r.to_json();
    for (std::size_t i = 0; i < holm.size(); ++i) {
        doc["contrasts"][i]["p_holm"] = holm[i].adjusted_p;
        doc["contrasts"][i]["reject"] = holm[i].reject;
    }
    return doc;
}

std::vector<std::string> present_levels(const std::vector<std::string>& conditions) {
    std::vector<std::string> levels;
    for (auto c : kConditions) {
        if (std::find(conditions.begin(), conditions.end(), to_string(c)) != conditions.end()) {
            levels.emplace_back(to_string(c));
        }
    }
    return levels;
}

}  // namespace

nlohmann::json study_report(std::span<const DecisionRecord> log, const ReferenceDecisions& refs,
                            const StudyReportOptions& options) {
    const auto records = effective_records(log);
    nlohmann::json report = {{"schema_version", kSchemaVersion}, {"n_records", records.size()}};
    std::set<std::string> participants;
    for (const auto& r : records) participants.insert(r.participant_id);
    report["n_participants"] = participants.size();

    nlohmann::json rates = nlohmann::json::array();
    for (const auto& cell : concordance_rates(records, refs, options.interval)) rates.push_back(cell.to_json());
    report["concordance"] = std::move(rates);
    report["interval_method"] = options.interval == IntervalMethod::Wilson ? "wilson" : "normal";

    struct Outcome {
        const char* name;
        bool ai_only;
        std::optional<int> (*get)(const DecisionRecord&);
    };
    const Outcome outcomes[] = {
        {"confidence", false, [](const DecisionRecord& r) -> std::optional<int> { return r.likert.confidence; }},
        {"difficulty", false, [](const DecisionRecord& r) -> std::optional<int> { return r.likert.difficulty; }},
        {"usefulness", true, [](const DecisionRecord& r) { return r.likert.usefulness; }},
        {"ai_confidence_effect", true, [](const DecisionRecord& r) { return r.likert.ai_confidence_effect; }},
    };
    nlohmann::json likert = nlohmann::json::object();
    for (const auto& o : outcomes) {
        std::vector<double> y;
        std::vector<std::string> cond;
        std::vector<std::string> cluster;
        for (const auto& r : records) {
            if (o.ai_only && r.condition == Condition::NoAi) continue;
            const auto v = o.get(r);
            if (!v) continue;
            y.push_back(*v);
            cond.emplace_back(to_string(r.condition));
            cluster.push_back(r.participant_id);
        }
        try {
            const auto levels = present_levels(cond);
            likert[o.name] = adjusted_contrasts(ols_cluster(y, cond, cluster, levels), options.alpha);
        } catch (const Error& e) {
            likert[o.name] = {{"error", e.what()}, {"code", std::string(to_string(e.code()))}};
        }
    }
    report["likert_ols"] = std::move(likert);

    nlohmann::json logit = nlohmann::json::object();
    for (auto ref_name : kReferenceNames) {
        std::vector<int> y;
        std::vector<std::string> cond;
        std::vector<std::string> cluster;
        for (const auto& r : records) {
            const auto& c = *refs.find(r.case_id);
            std::optional<TreatmentDecision> ref;
            if (ref_name == "ai") {
                ref = c.ai;
            } else if (ref_name == "original_clinician") {
                ref = c.original_clinician;
            } else {
                ref = c.majority_attending ? c.majority_attending : majority_attending(records, r.case_id);
            }
            if (!ref) continue;
            y.push_back(concordance(r.choice, *ref).full ? 1 : 0);
            cond.emplace_back(to_string(r.condition));
            cluster.push_back(r.participant_id);
        }
        try {
            const auto levels = present_levels(cond);
            logit[std::string(ref_name)] = adjusted_contrasts(logit_concordance(y, cond, cluster, levels), options.alpha);
        } catch (const Error& e) {
            logit[std::string(ref_name)] = {{"error", e.what()}, {"code", std::string(to_string(e.code()))}};
        }
    }
    report["concordance_logit"] = std::move(logit);
    return report;
}

std::string format_study_report(const nlohmann::json& report) {
    std::ostringstream out;
    out << fmt::format("Decisions: {}  Participants: {}\n\n", report.value("n_records", 0),
                       report.value("n_participants", 0));
    out << "Concordance (full / any)\n";
    out << fmt::format("{:<24}{:<22}{:>5}{:>22}{:>22}\n", "condition", "reference", "n", "full", "any");
    auto rate_text = [](const nlohmann::json& rate, const nlohmann::json& ci) {
        if (rate.is_null()) return std::string("-");
        return fmt::format("{:.2f} [{:.2f}, {:.2f}]", rate.get<double>(), ci[0].get<double>(), ci[1].get<double>());
    };
    for (const auto& cell : report.at("concordance")) {
        out << fmt::format("{:<24}{:<22}{:>5}{:>22}{:>22}\n", cell.at("condition").get<std::string>(),
                           cell.at("reference").get<std::string>(), cell.at("n").get<std::size_t>(),
                           rate_text(cell.at("full_rate"), cell.at("full_ci")),
                           rate_text(cell.at("any_rate"), cell.at("any_ci")));
    }
    auto models = [&](const char* title, const nlohmann::json& group) {
        out << "\n" << title << "\n";
        for (const auto& [name, m] : group.items()) {
            if (m.contains("error")) {
                out << fmt::format("  {}: not estimated ({})\n", name, m.at("error").get<std::string>());
                continue;
            }
            const auto& df = m.at("df");
            out << fmt::format("  {}: F({}, {}) = {}, p = {}\n", name, df[0].get<int>(), df[1].get<int>(),
                               m.at("f_stat").is_null() ? "NA" : fmt::format("{:.3f}", m.at("f_stat").get<double>()),
                               m.at("p_value").is_null() ? "NA" : fmt::format("{:.4f}", m.at("p_value").get<double>()));
            for (const auto& c : m.at("contrasts")) {
                const auto num = [](const nlohmann::json& v, const char* spec) {
                    return v.is_null() ? std::string("NA") : fmt::format(fmt::runtime(spec), v.get<double>());
                };
                out << fmt::format("    {} vs {}: diff {} (SE {}), p_holm {}{}\n", c.at("b").get<std::string>(),
                                   c.at("a").get<std::string>(), num(c.at("estimate"), "{:.3f}"),
                                   num(c.at("std_error"), "{:.3f}"), num(c.at("p_holm"), "{:.4f}"),
                                   c.at("reject").get<bool>() ? " *" : "");
            }
        }
    };
    models("Likert outcomes (OLS, cluster-robust SEs by participant)", report.at("likert_ols"));
    models("Full concordance (logistic, cluster-robust SEs by participant)", report.at("concordance_logit"));
    return out.str();
}

}  // namespace sepsis
