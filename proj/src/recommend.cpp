#include "sepsis/recommend.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "sepsis/error.hpp"

namespace sepsis {

namespace {

constexpr double kTieTolerance = 1e-9;

int model_action(const MdpModel& mdp, int state) {
    if (mdp.solved && static_cast<std::size_t>(state) < mdp.policy.size()) {
        return mdp.policy[static_cast<std::size_t>(state)];
    }
    if (auto best = best_estimated_action(mdp, state)) return *best;
    return mdp.behavior_mode(state);
}

std::string_view delta_phrase(Delta delta) {
    switch (delta) {
        case Delta::Increase: return "increasing";
        case Delta::Decrease: return "decreasing";
        case Delta::NoChange: return "not changing";
    }
    return "not changing";
}

nlohmann::json grid_json(const ActionGrid& grid) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : grid) {
        nlohmann::json cells = nlohmann::json::array();
        for (const auto& cell : row) cells.push_back(cell ? nlohmann::json(*cell) : nlohmann::json(nullptr));
        rows.push_back(std::move(cells));
    }
    return rows;
}

nlohmann::json grid_json(const ProbabilityGrid& grid) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : grid) rows.push_back(row);
    return rows;
}

const TimestepRecord* find_bin(const PatientTrajectory& patient, int bin_index, std::size_t* position) {
    for (std::size_t i = 0; i < patient.timesteps.size(); ++i) {
        if (patient.timesteps[i].bin_index == bin_index) {
            if (position) *position = i;
            return &patient.timesteps[i];
        }
    }
    return nullptr;
}

}  // namespace

std::optional<int> best_estimated_action(const MdpModel& mdp, int state) {
    double best = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (int a = 0; a < kNumActions; ++a) {
        if (!mdp.q_estimated(state, a)) continue;
        best = std::max(best, mdp.q(static_cast<std::size_t>(state), static_cast<std::size_t>(a)));
        any = true;
    }
    if (!any) return std::nullopt;
    for (int a = 0; a < kNumActions; ++a) {
        if (mdp.q_estimated(state, a) &&
            mdp.q(static_cast<std::size_t>(state), static_cast<std::size_t>(a)) >= best - kTieTolerance) {
            return a;
        }
    }
    return std::nullopt;
}

std::pair<double, double> current_doses(const PatientTrajectory& patient, std::size_t position) {
    if (position == 0 || position > patient.timesteps.size()) return {0.0, 0.0};
    const auto& prev = patient.timesteps[position - 1];
    return {prev.fluid_dose, prev.vaso_dose};
}

std::string render_recommendation(const std::string& text_template, Delta fluid, Delta vaso,
                                  double fluid_dose, double vaso_dose) {
    try {
        return fmt::format(fmt::runtime(text_template), fmt::arg("fluid_action", delta_phrase(fluid)),
                           fmt::arg("vaso_action", delta_phrase(vaso)), fmt::arg("fluid_dose", fluid_dose),
                           fmt::arg("vaso_dose", vaso_dose));
    } catch (const fmt::format_error& e) {
        throw Error(ErrorCode::Validation, fmt::format("recommendation template: {}", e.what()));
    }
}

RecommendationPayload build_payload(const MdpModel& mdp, const StateModel& states,
                                    const StateExplainer* explainer, const PatientTrajectory& patient,
                                    int bin_index, const PayloadOptions& options) {
    std::size_t position = 0;
    const TimestepRecord* record = find_bin(patient, bin_index, &position);
    if (!record) {
        throw Error(ErrorCode::NotFound,
                    fmt::format("patient '{}' has no bin {}", patient.patient_id, bin_index));
    }

    RecommendationPayload out;
    out.patient_id = patient.patient_id;
    out.bin_index = bin_index;
    const auto instance = extract_features(states, patient, *record);
    out.state_id = assign_state(states, instance);
    const int s = out.state_id;
    const auto su = static_cast<std::size_t>(s);

    for (int a = 0; a < kNumActions; ++a) {
        const auto f = static_cast<std::size_t>(fluid_bin_of(a));
        const auto v = static_cast<std::size_t>(vaso_bin_of(a));
        if (mdp.q_estimated(s, a)) out.q_heatmap[f][v] = mdp.q(su, static_cast<std::size_t>(a));
        out.clinician_probs[f][v] = mdp.behavior(su, static_cast<std::size_t>(a));
    }

    const auto best = best_estimated_action(mdp, s);
    out.low_data = !best.has_value();
    out.recommended_action = best ? *best : model_action(mdp, s);

    if (best) {
        std::vector<int> ranked;
        for (int a = 0; a < kNumActions; ++a) {
            if (a != *best && mdp.q_estimated(s, a)) ranked.push_back(a);
        }
        std::stable_sort(ranked.begin(), ranked.end(), [&](int a, int b) {
            return mdp.q(su, static_cast<std::size_t>(a)) > mdp.q(su, static_cast<std::size_t>(b));
        });
        ranked.insert(ranked.begin(), *best);
        for (std::size_t i = 0; i < std::min(ranked.size(), kMaxAlternatives); ++i) {
            const int a = ranked[i];
            out.alternatives.push_back(
                {a, mdp.q(su, static_cast<std::size_t>(a)), mdp.behavior(su, static_cast<std::size_t>(a))});
        }
    } else {
        out.alternatives_from_q = false;
        std::vector<int> ranked;
        for (int a = 0; a < kNumActions; ++a) {
            if (mdp.behavior(su, static_cast<std::size_t>(a)) > 0.0) ranked.push_back(a);
        }
        std::stable_sort(ranked.begin(), ranked.end(), [&](int a, int b) {
            return mdp.behavior(su, static_cast<std::size_t>(a)) > mdp.behavior(su, static_cast<std::size_t>(b));
        });
        for (std::size_t i = 0; i < std::min(ranked.size(), kMaxAlternatives); ++i) {
            out.alternatives.push_back({ranked[i], std::nullopt, mdp.behavior(su, static_cast<std::size_t>(ranked[i]))});
        }
    }

    const int fb = fluid_bin_of(out.recommended_action);
    const int vb = vaso_bin_of(out.recommended_action);
    out.recommended_fluid_dose = mdp.space.representative_dose(Channel::Fluid, fb);
    out.recommended_vaso_dose = mdp.space.representative_dose(Channel::Vaso, vb);
    std::tie(out.current_fluid_dose, out.current_vaso_dose) = current_doses(patient, position);
    out.fluid_delta = recommended_delta(mdp.space, Channel::Fluid, out.current_fluid_dose, fb);
    out.vaso_delta = recommended_delta(mdp.space, Channel::Vaso, out.current_vaso_dose, vb);
    out.text = render_recommendation(options.text_template, out.fluid_delta, out.vaso_delta,
                                     out.recommended_fluid_dose, out.recommended_vaso_dose);

    if (explainer && explainer->n_support(s) > 0) out.explanation = explainer->explain(s, instance);
    return out;
}

nlohmann::json RecommendationPayload::to_json() const {
    nlohmann::json alts = nlohmann::json::array();
    for (const auto& a : alternatives) {
        alts.push_back({{"action_id", a.action_id},
                        {"fluid_bin", fluid_bin_of(a.action_id)},
                        {"vaso_bin", vaso_bin_of(a.action_id)},
                        {"q", a.q ? nlohmann::json(*a.q) : nlohmann::json(nullptr)},
                        {"clinician_frequency", a.clinician_frequency}});
    }
    nlohmann::json doc = {
        {"schema_version", kSchemaVersion},
        {"patient_id", patient_id},
        {"bin", bin_index},
        {"state_id", state_id},
        {"q_heatmap", grid_json(q_heatmap)},
        {"clinician_probs", grid_json(clinician_probs)},
        {"recommended",
         {{"action_id", recommended_action},
          {"fluid_bin", fluid_bin_of(recommended_action)},
          {"vaso_bin", vaso_bin_of(recommended_action)},
          {"fluid_dose_ml", recommended_fluid_dose},
          {"vaso_dose_mcg_kg_min", recommended_vaso_dose},
          {"fluid_delta", std::string(to_string(fluid_delta))},
          {"vaso_delta", std::string(to_string(vaso_delta))}}},
        {"current_dose", {{"fluid_ml", current_fluid_dose}, {"vaso_mcg_kg_min", current_vaso_dose}}},
        {"text", text},
        {"alternatives", std::move(alts)},
        {"alternatives_ranked_by", alternatives_from_q ? "q" : "clinician_frequency"},
        {"low_data", low_data},
        {"explanation", explanation ? explanation->to_json() : nlohmann::json(nullptr)}};
    return doc;
}

// ---------------------------------------------------------------- browsing

void CohortFilter::validate() const {
    auto check = [](const std::optional<ValueRange>& r, std::string_view name) {
        if (r && !(r->lo <= r->hi)) {
            throw Error(ErrorCode::Validation, fmt::format("{} range has lo > hi", name));
        }
    };
    check(age, "age");
    check(sofa, "sofa");
    check(sirs, "sirs");
    for (const auto* set : {&clinician_actions, &model_actions}) {
        for (int a : *set) {
            if (a < 0 || a >= kNumActions) {
                throw Error(ErrorCode::Validation, fmt::format("action id {} outside [0, 24]", a));
            }
        }
    }
}

namespace {

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= text.size()) {
        const auto comma = text.find(',', start);
        const auto end = comma == std::string::npos ? text.size() : comma;
        if (end > start) out.push_back(text.substr(start, end - start));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

std::optional<double> parse_number(const std::string& text) {
    double v = 0.0;
    const auto* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc() || ptr != end || !std::isfinite(v)) return std::nullopt;
    return v;
}

}  // namespace

CohortFilter filter_from_params(const std::multimap<std::string, std::string>& params,
                                std::vector<FieldError>& errors) {
    static const std::set<std::string> known = {
        "age_min", "age_max", "gender", "comorbidity", "outcome", "sofa_min", "sofa_max",
        "sirs_min", "sirs_max", "clinician_actions", "model_actions", "sort", "order"};
    CohortFilter f;
    std::map<std::string, double> bounds;
    for (const auto& [key, value] : params) {
        if (!known.count(key)) {
            errors.push_back({key, "unknown filter field"});
        } else if (key.ends_with("_min") || key.ends_with("_max")) {
            if (auto v = parse_number(value)) {
                bounds[key] = *v;
            } else {
                errors.push_back({key, fmt::format("'{}' is not a number", value)});
            }
        } else if (key == "gender") {
            for (auto& g : split_list(value)) f.genders.insert(g);
        } else if (key == "comorbidity") {
            for (auto& c : split_list(value)) f.comorbidities.insert(c);
        } else if (key == "outcome") {
            if (value == "died") {
                f.died = true;
            } else if (value == "survived") {
                f.died = false;
            } else {
                errors.push_back({key, "expected 'died' or 'survived'"});
            }
        } else if (key == "clinician_actions" || key == "model_actions") {
            auto& target = key == "clinician_actions" ? f.clinician_actions : f.model_actions;
            for (const auto& item : split_list(value)) {
                int a = -1;
                auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), a);
                if (ec != std::errc() || ptr != item.data() + item.size() || a < 0 || a >= kNumActions) {
                    errors.push_back({key, fmt::format("'{}' is not an action id in [0, 24]", item)});
                } else {
                    target.insert(a);
                }
            }
        }
    }
    auto range = [&](const std::string& name, std::optional<ValueRange>& out) {
        const auto lo = bounds.find(name + "_min");
        const auto hi = bounds.find(name + "_max");
        if (lo == bounds.end() && hi == bounds.end()) return;
        ValueRange r{lo != bounds.end() ? lo->second : -std::numeric_limits<double>::infinity(),
                     hi != bounds.end() ? hi->second : std::numeric_limits<double>::infinity()};
        if (r.lo > r.hi) {
            errors.push_back({name, fmt::format("{}_min exceeds {}_max", name, name)});
            return;
        }
        out = r;
    };
    range("age", f.age);
    range("sofa", f.sofa);
    range("sirs", f.sirs);
    return f;
}

namespace {

bool patient_matches(const PatientTrajectory& p, const CohortFilter& f) {
    if (f.age && !f.age->contains(p.demographics.age)) return false;
    if (!f.genders.empty() && !f.genders.count(p.demographics.gender)) return false;
    for (const auto& c : f.comorbidities) {
        auto it = p.demographics.comorbidities.find(c);
        if (it == p.demographics.comorbidities.end() || !it->second) return false;
    }
    if (f.died && *f.died != p.died) return false;
    if (f.sofa || f.sirs) {
        int max_sofa = 0;
        int max_sirs = 0;
        for (const auto& t : p.timesteps) {
            max_sofa = std::max(max_sofa, t.sofa);
            max_sirs = std::max(max_sirs, t.sirs);
        }
        if (f.sofa && !f.sofa->contains(max_sofa)) return false;
        if (f.sirs && !f.sirs->contains(max_sirs)) return false;
    }
    return true;
}

}  // namespace

std::vector<FilterMatch> filter_cohort(const Cohort& cohort, const MdpModel& mdp, const StateModel& states,
                                       const CohortFilter& filter) {
    filter.validate();
    std::vector<FilterMatch> out;
    for (const auto& p : cohort) {
        if (!patient_matches(p, filter)) continue;
        FilterMatch m;
        m.patient_id = p.patient_id;
        for (const auto& rec : p.timesteps) {
            if (filter.has_timestep_predicates()) {
                if (!filter.clinician_actions.empty() &&
                    !filter.clinician_actions.count(discretize_action(mdp.space, rec.fluid_dose, rec.vaso_dose))) {
                    continue;
                }
                if (!filter.model_actions.empty() &&
                    !filter.model_actions.count(model_action(mdp, assign_state(states, p, rec)))) {
                    continue;
                }
            }
            m.bins.push_back(rec.bin_index);
        }
        if (!m.bins.empty()) out.push_back(std::move(m));
    }
    return out;
}

std::string DiscordantCase::label() const {
    if (fluid_differs && vaso_differs) return "both components differ";
    if (fluid_differs) return "fluid component differs";
    return "vasopressor component differs";
}

nlohmann::json DiscordantCase::to_json() const {
    return {{"patient_id", patient_id},
            {"bin", bin_index},
            {"state_id", state_id},
            {"clinician_action", clinician_action},
            {"model_action", model_action},
            {"plurality_action", plurality_action},
            {"fluid_differs", fluid_differs},
            {"vaso_differs", vaso_differs},
            {"label", label()}};
}

int plurality_action(const MdpModel& mdp, int state) { return mdp.behavior_mode(state); }

namespace {

bool state_has_behavior(const MdpModel& mdp, int state) {
    const auto row = mdp.behavior.row(static_cast<std::size_t>(state));
    return std::accumulate(row.begin(), row.end(), 0.0) > 0.0;
}

}  // namespace

std::vector<DiscordantCase> find_discordant_cases(const Cohort& cohort, const MdpModel& mdp,
                                                  const StateModel& states) {
    std::vector<DiscordantCase> out;
    for (const auto& p : cohort) {
        for (const auto& rec : p.timesteps) {
            const int s = assign_state(states, p, rec);
            if (!state_has_behavior(mdp, s)) continue;
            const int plural = plurality_action(mdp, s);
            const int model = model_action(mdp, s);
            const bool fd = fluid_bin_of(plural) != fluid_bin_of(model);
            const bool vd = vaso_bin_of(plural) != vaso_bin_of(model);
            if (!fd && !vd) continue;
            out.push_back({p.patient_id, rec.bin_index, s,
                           discretize_action(mdp.space, rec.fluid_dose, rec.vaso_dose), model, plural, fd, vd});
        }
    }
    return out;
}

SortKey sort_key_from_string(std::string_view text) {
    if (text == "age") return SortKey::Age;
    if (text == "sofa") return SortKey::Sofa;
    if (text == "stay_length") return SortKey::StayLength;
    if (text == "discordant") return SortKey::Discordant;
    throw Error(ErrorCode::Validation,
                fmt::format("unknown sort key '{}' (expected age, sofa, stay_length or discordant)", text));
}

nlohmann::json BrowseEntry::to_json() const {
    return {{"patient_id", patient_id},   {"age", age},
            {"gender", gender},           {"died", died},
            {"max_sofa", max_sofa},       {"max_sirs", max_sirs},
            {"stay_length", stay_length}, {"discordant_bins", discordant_bins},
            {"matching_bins", matching_bins}};
}

std::vector<BrowseEntry> browse(const Cohort& cohort, const MdpModel& mdp, const StateModel& states,
                                const CohortFilter& filter) {
    const auto matches = filter_cohort(cohort, mdp, states, filter);
    std::map<std::string, const PatientTrajectory*> by_id;
    for (const auto& p : cohort) by_id[p.patient_id] = &p;

    std::vector<BrowseEntry> out;
    for (const auto& m : matches) {
        const auto& p = *by_id.at(m.patient_id);
        BrowseEntry e;
        e.patient_id = p.patient_id;
        e.age = p.demographics.age;
        e.gender = p.demographics.gender;
        e.died = p.died;
        e.stay_length = p.timesteps.size();
        for (const auto& rec : p.timesteps) {
            e.max_sofa = std::max(e.max_sofa, rec.sofa);
            e.max_sirs = std::max(e.max_sirs, rec.sirs);
            const int s = assign_state(states, p, rec);
            if (state_has_behavior(mdp, s) && model_action(mdp, s) != plurality_action(mdp, s)) {
                ++e.discordant_bins;
            }
        }
        e.matching_bins = m.bins;
        out.push_back(std::move(e));
    }
    return out;
}

void sort_entries(std::vector<BrowseEntry>& entries, SortKey key, bool descending) {
    auto value = [key](const BrowseEntry& e) -> double {
        switch (key) {
            case SortKey::Age: return e.age;
            case SortKey::Sofa: return e.max_sofa;
            case SortKey::StayLength: return static_cast<double>(e.stay_length);
            case SortKey::Discordant: return static_cast<double>(e.discordant_bins);
        }
        return 0.0;
    };
    std::stable_sort(entries.begin(), entries.end(), [&](const BrowseEntry& a, const BrowseEntry& b) {
        const double va = value(a);
        const double vb = value(b);
        if (va != vb) return descending ? va > vb : va < vb;
        return a.patient_id < b.patient_id;
    });
}

}  // namespace sepsis
