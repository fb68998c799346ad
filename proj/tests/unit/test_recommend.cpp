#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "fixtures.hpp"
#include "sepsis/error.hpp"
#include "sepsis/recommend.hpp"

using namespace sepsis;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// hr 70 -> state 0, hr 90 -> state 1, hr 110 -> state 2.
StateModel hr_states() {
    StateModel m;
    m.feature_order = {"hr"};
    m.means = {80.0};
    m.stds = {10.0};
    m.k = 3;
    m.centroids = RowMatrix(3, 1);
    m.centroids(0, 0) = -1.0;
    m.centroids(1, 0) = 1.0;
    m.centroids(2, 0) = 3.0;
    return m;
}

MdpModel small_mdp() {
    auto m = fixtures::model_from_counts(3, 0.99, 5,
                                         {{0, 7, 3, 10},
                                          {0, 12, 3, 3},
                                          {1, 0, 3, 6},
                                          {1, 6, 4, 6},
                                          {2, 12, 3, 2},
                                          {2, 13, 4, 3}});
    m.space.fluid_edges = {50.0, 100.0, 200.0};
    m.space.vaso_edges = {0.04, 0.1, 0.2};
    m.space.fluid_top = 400.0;
    m.space.vaso_top = 0.4;
    m.q = RowMatrix(3, kNumActions, kNaN);
    m.q(0, 7) = 50.0;
    m.q(1, 0) = 20.0;
    m.q(1, 6) = 20.0;
    return m;
}

TimestepRecord step(int bin, double hr, double fluid, double vaso, int sofa = 2, int sirs = 1) {
    TimestepRecord r;
    r.bin_index = bin;
    r.features["hr"] = hr;
    r.fluid_dose = fluid;
    r.vaso_dose = vaso;
    r.sofa = sofa;
    r.sirs = sirs;
    return r;
}

PatientTrajectory patient(std::string id, double age, std::string gender, bool died,
                          std::vector<TimestepRecord> steps) {
    PatientTrajectory p;
    p.patient_id = std::move(id);
    p.demographics.age = age;
    p.demographics.gender = std::move(gender);
    p.demographics.weight = 70.0;
    p.died = died;
    p.timesteps = std::move(steps);
    return p;
}

Cohort small_cohort() {
    return {patient("p1", 64, "F", false, {step(0, 70, 0, 0), step(1, 70, 150, 0.3, 7), step(2, 90, 0, 0)}),
            patient("p2", 51, "M", false, {step(0, 110, 30, 0.05, 3, 3), step(1, 90, 80, 0.0)}),
            patient("p3", 64, "M", false, {step(0, 70, 120, 0.08)}),
            patient("p4", 77, "F", false, {step(0, 90, 0, 0, 11, 4), step(1, 70, 60, 0.15), step(2, 70, 0, 0),
                                           step(3, 110, 0, 0)})};
}

nlohmann::json null_grid() {
    nlohmann::json rows = nlohmann::json::array();
    for (int i = 0; i < kDoseBins; ++i) rows.push_back(nlohmann::json::array({nullptr, nullptr, nullptr, nullptr, nullptr}));
    return rows;
}

nlohmann::json zero_grid() {
    nlohmann::json rows = nlohmann::json::array();
    for (int i = 0; i < kDoseBins; ++i) rows.push_back(nlohmann::json::array({0.0, 0.0, 0.0, 0.0, 0.0}));
    return rows;
}

}  // namespace

TEST(Payload, MatchesHandWrittenGolden) {
    const auto mdp = small_mdp();
    const auto states = hr_states();
    const auto cohort = small_cohort();
    const auto payload = build_payload(mdp, states, nullptr, cohort[0], 1);

    auto q = null_grid();
    q[1][2] = 50.0;
    auto probs = zero_grid();
    probs[1][2] = 10.0 / 13.0;
    probs[2][2] = 3.0 / 13.0;
    const nlohmann::json expected = {
        {"schema_version", 1},
        {"patient_id", "p1"},
        {"bin", 1},
        {"state_id", 0},
        {"q_heatmap", q},
        {"clinician_probs", probs},
        {"recommended",
         {{"action_id", 7},
          {"fluid_bin", 1},
          {"vaso_bin", 2},
          {"fluid_dose_ml", 25.0},
          {"vaso_dose_mcg_kg_min", 0.07},
          {"fluid_delta", "increase"},
          {"vaso_delta", "increase"}}},
        {"current_dose", {{"fluid_ml", 0.0}, {"vaso_mcg_kg_min", 0.0}}},
        {"text",
         "For this patient, the AI recommends increasing IV fluids (25 mL over the next 4 hours) and "
         "increasing vasopressors (0.07 mcg/kg/min)."},
        {"alternatives",
         nlohmann::json::array({{{"action_id", 7},
                                 {"fluid_bin", 1},
                                 {"vaso_bin", 2},
                                 {"q", 50.0},
                                 {"clinician_frequency", 10.0 / 13.0}}})},
        {"alternatives_ranked_by", "q"},
        {"low_data", false},
        {"explanation", nullptr}};
    EXPECT_EQ(payload.to_json(), expected) << payload.to_json().dump(2);
}

TEST(Payload, OnlyOneEstimatedActionIsRecommended) {
    const auto payload = build_payload(small_mdp(), hr_states(), nullptr, small_cohort()[2], 0);
    EXPECT_EQ(payload.state_id, 0);
    EXPECT_EQ(payload.recommended_action, 7);
    ASSERT_EQ(payload.alternatives.size(), 1u);
    int cells = 0;
    for (const auto& row : payload.q_heatmap) {
        for (const auto& c : row) cells += c.has_value();
    }
    EXPECT_EQ(cells, 1);
}

TEST(Payload, QTieGoesToLowestActionAndDecreases) {
    const auto payload = build_payload(small_mdp(), hr_states(), nullptr, small_cohort()[0], 2);
    EXPECT_EQ(payload.state_id, 1);
    EXPECT_EQ(payload.recommended_action, 0);
    EXPECT_EQ(payload.current_fluid_dose, 150.0);
    EXPECT_EQ(payload.current_vaso_dose, 0.3);
    EXPECT_EQ(payload.fluid_delta, Delta::Decrease);
    EXPECT_EQ(payload.vaso_delta, Delta::Decrease);
    ASSERT_EQ(payload.alternatives.size(), 2u);
    EXPECT_EQ(payload.alternatives[0].action_id, 0);
    EXPECT_EQ(payload.alternatives[1].action_id, 6);
    EXPECT_NE(payload.text.find("decreasing IV fluids (0 mL"), std::string::npos);
}

TEST(Payload, LowDataFallsBackToClinicianFrequency) {
    const auto payload = build_payload(small_mdp(), hr_states(), nullptr, small_cohort()[1], 0);
    EXPECT_EQ(payload.state_id, 2);
    EXPECT_TRUE(payload.low_data);
    EXPECT_FALSE(payload.alternatives_from_q);
    EXPECT_EQ(payload.recommended_action, 13);
    ASSERT_EQ(payload.alternatives.size(), 2u);
    EXPECT_EQ(payload.alternatives[0].action_id, 13);
    EXPECT_FALSE(payload.alternatives[0].q.has_value());
    EXPECT_DOUBLE_EQ(payload.alternatives[1].clinician_frequency, 0.4);
    const auto j = payload.to_json();
    EXPECT_EQ(j["alternatives_ranked_by"], "clinician_frequency");
    EXPECT_TRUE(j["alternatives"][0]["q"].is_null());
}

TEST(Payload, MissingBinIsNotFound) {
    try {
        build_payload(small_mdp(), hr_states(), nullptr, small_cohort()[2], 5);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::NotFound);
    }
}

TEST(Payload, BadTemplateIsValidationError) {
    PayloadOptions o;
    o.text_template = "{unknown}";
    EXPECT_THROW(build_payload(small_mdp(), hr_states(), nullptr, small_cohort()[0], 0, o), Error);
}

TEST(Filter, EmptyFilterReturnsEverything) {
    const auto cohort = small_cohort();
    const auto matches = filter_cohort(cohort, small_mdp(), hr_states(), {});
    ASSERT_EQ(matches.size(), cohort.size());
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        EXPECT_EQ(matches[i].patient_id, cohort[i].patient_id);
        EXPECT_EQ(matches[i].bins.size(), cohort[i].timesteps.size());
    }
}

TEST(Filter, DiedWithNoDeathsIsEmpty) {
    CohortFilter f;
    f.died = true;
    EXPECT_TRUE(filter_cohort(small_cohort(), small_mdp(), hr_states(), f).empty());
}

TEST(Filter, PatientLevelPredicates) {
    CohortFilter f;
    f.age = ValueRange{60, 70};
    f.genders = {"M"};
    auto m = filter_cohort(small_cohort(), small_mdp(), hr_states(), f);
    ASSERT_EQ(m.size(), 1u);
    EXPECT_EQ(m[0].patient_id, "p3");

    CohortFilter sofa;
    sofa.sofa = ValueRange{7, 20};
    m = filter_cohort(small_cohort(), small_mdp(), hr_states(), sofa);
    ASSERT_EQ(m.size(), 2u);
    EXPECT_EQ(m[0].patient_id, "p1");
    EXPECT_EQ(m[1].patient_id, "p4");
    // Whole-stay matches keep every bin.
    EXPECT_EQ(m[1].bins.size(), 4u);
}

TEST(Filter, ActionGridMatchesBruteForce) {
    const auto cohort = small_cohort();
    const auto mdp = small_mdp();
    const auto states = hr_states();
    for (int a = 0; a < kNumActions; ++a) {
        CohortFilter f;
        f.clinician_actions = {a};
        std::vector<std::pair<std::string, int>> expected;
        for (const auto& p : cohort) {
            for (const auto& r : p.timesteps) {
                if (discretize_action(mdp.space, r.fluid_dose, r.vaso_dose) == a) expected.emplace_back(p.patient_id, r.bin_index);
            }
        }
        std::vector<std::pair<std::string, int>> got;
        for (const auto& m : filter_cohort(cohort, mdp, states, f)) {
            for (int b : m.bins) got.emplace_back(m.patient_id, b);
        }
        EXPECT_EQ(got, expected) << "action " << a;
    }

    // Model action 0 is recommended only in state 1 (hr 90).
    CohortFilter f;
    f.model_actions = {0};
    std::vector<std::pair<std::string, int>> got;
    for (const auto& m : filter_cohort(cohort, mdp, states, f)) {
        for (int b : m.bins) got.emplace_back(m.patient_id, b);
    }
    const std::vector<std::pair<std::string, int>> expected{{"p1", 2}, {"p2", 1}, {"p4", 0}};
    EXPECT_EQ(got, expected);
}

TEST(Filter, InvalidFilterRejected) {
    CohortFilter f;
    f.age = ValueRange{70, 60};
    EXPECT_THROW(filter_cohort(small_cohort(), small_mdp(), hr_states(), f), Error);
    CohortFilter g;
    g.model_actions = {25};
    EXPECT_THROW(g.validate(), Error);
}

TEST(Filter, FromParamsCollectsErrors) {
    std::vector<FieldError> errors;
    const std::multimap<std::string, std::string> bad{{"age_min", "abc"},
                                                      {"foo", "1"},
                                                      {"clinician_actions", "3,25"},
                                                      {"outcome", "maybe"},
                                                      {"sofa_min", "9"},
                                                      {"sofa_max", "2"}};
    filter_from_params(bad, errors);
    std::set<std::string> fields;
    for (const auto& e : errors) fields.insert(e.field);
    EXPECT_EQ(fields, (std::set<std::string>{"age_min", "foo", "clinician_actions", "outcome", "sofa"}));

    errors.clear();
    const auto f = filter_from_params({{"age_min", "40"}, {"gender", "F,M"}, {"outcome", "survived"},
                                       {"model_actions", "0,7"}},
                                      errors);
    EXPECT_TRUE(errors.empty());
    ASSERT_TRUE(f.age.has_value());
    EXPECT_EQ(f.age->lo, 40.0);
    EXPECT_TRUE(std::isinf(f.age->hi));
    EXPECT_EQ(f.genders.size(), 2u);
    EXPECT_EQ(f.died, false);
    EXPECT_EQ(f.model_actions, (std::set<int>{0, 7}));
}

TEST(Discordant, MatchesBruteForceAndLabels) {
    auto mdp = small_mdp();
    mdp.solved = true;
    mdp.policy = {12, 6, 13};
    const auto states = hr_states();
    const auto cohort = small_cohort();
    const auto cases = find_discordant_cases(cohort, mdp, states);

    std::vector<std::pair<std::string, int>> expected;
    for (const auto& p : cohort) {
        for (const auto& r : p.timesteps) {
            const double hr = r.features.at("hr");
            const int s = hr < 80 ? 0 : (hr < 100 ? 1 : 2);
            if (s != 2) expected.emplace_back(p.patient_id, r.bin_index);
        }
    }
    std::vector<std::pair<std::string, int>> got;
    for (const auto& c : cases) got.emplace_back(c.patient_id, c.bin_index);
    EXPECT_EQ(got, expected);

    for (const auto& c : cases) {
        if (c.state_id == 0) {
            EXPECT_EQ(c.plurality_action, 7);
            EXPECT_EQ(c.label(), "fluid component differs");
        } else {
            EXPECT_EQ(c.plurality_action, 0);
            EXPECT_EQ(c.label(), "both components differ");
        }
    }
    DiscordantCase v;
    v.vaso_differs = true;
    EXPECT_EQ(v.label(), "vasopressor component differs");
}

TEST(Browse, SortsWithPatientIdTieBreak) {
    auto entries = browse(small_cohort(), small_mdp(), hr_states(), {});
    sort_entries(entries, SortKey::Age, false);
    std::vector<std::string> ids;
    for (const auto& e : entries) ids.push_back(e.patient_id);
    EXPECT_EQ(ids, (std::vector<std::string>{"p2", "p1", "p3", "p4"}));

    sort_entries(entries, SortKey::Age, true);
    ids.clear();
    for (const auto& e : entries) ids.push_back(e.patient_id);
    EXPECT_EQ(ids, (std::vector<std::string>{"p4", "p1", "p3", "p2"}));

    sort_entries(entries, SortKey::StayLength, true);
    EXPECT_EQ(entries[0].patient_id, "p4");
    EXPECT_EQ(entries[0].stay_length, 4u);
    EXPECT_EQ(entries[0].max_sofa, 11);

    EXPECT_EQ(sort_key_from_string("sofa"), SortKey::Sofa);
    EXPECT_THROW(sort_key_from_string("height"), Error);
}

TEST(CurrentDoses, PreviousBinOrZero) {
    const auto p = small_cohort()[0];
    EXPECT_EQ(current_doses(p, 0), (std::pair<double, double>{0.0, 0.0}));
    EXPECT_EQ(current_doses(p, 2), (std::pair<double, double>{150.0, 0.3}));
}
