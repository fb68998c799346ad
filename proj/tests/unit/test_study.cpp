#include <gtest/gtest.h>

#include <fstream>
#include <thread>

#include "fixtures.hpp"
#include "sepsis/error.hpp"
#include "sepsis/study.hpp"

using namespace sepsis;

namespace {

ReferenceDecisions refs() { return read_references(fixtures::data_path("concordance/references.json").string()); }

std::vector<DecisionRecord> fixture_log() {
    return read_decision_log(fixtures::data_path("concordance/decisions.jsonl").string());
}

DecisionRecord decision(std::string participant, Role role, std::string case_id, Condition cond, Delta fluid,
                        Delta vaso) {
    DecisionRecord r;
    r.participant_id = std::move(participant);
    r.role = role;
    r.years_experience = "5-10";
    r.case_id = std::move(case_id);
    r.condition = cond;
    r.choice = {fluid, vaso};
    r.likert.confidence = 4;
    r.likert.difficulty = 3;
    if (cond != Condition::NoAi) {
        r.likert.usefulness = 5;
        r.likert.ai_confidence_effect = 4;
    }
    r.timestamp = "2150-01-01T00:00:00Z";
    return r;
}

bool has_rule(const std::vector<RuleViolation>& v, const std::string& rule) {
    return std::any_of(v.begin(), v.end(), [&](const RuleViolation& x) { return x.rule == rule; });
}

}  // namespace

TEST(Concordance, ReferenceCasesFromTheStudy) {
    const auto r = refs();
    const auto& jeffrey = r.cases.at("jeffrey-williams");
    const auto j = concordance(jeffrey.ai, jeffrey.original_clinician);
    EXPECT_TRUE(j.full);
    EXPECT_TRUE(j.any);
    const auto& ruth = r.cases.at("ruth-silva");
    const auto c = concordance(ruth.ai, ruth.original_clinician);
    EXPECT_FALSE(c.full);
    EXPECT_FALSE(c.any);
    const auto& loretta = r.cases.at("loretta-sturtevant");
    const auto l = concordance(loretta.ai, loretta.original_clinician);
    EXPECT_FALSE(l.full);
    EXPECT_TRUE(l.any);
}

TEST(Concordance, ReflexiveAndSymmetric) {
    const std::array<Delta, 3> all{Delta::Increase, Delta::Decrease, Delta::NoChange};
    for (auto f1 : all) {
        for (auto v1 : all) {
            const TreatmentDecision a{f1, v1};
            EXPECT_TRUE(concordance(a, a).full);
            for (auto f2 : all) {
                for (auto v2 : all) {
                    const TreatmentDecision b{f2, v2};
                    const auto ab = concordance(a, b);
                    const auto ba = concordance(b, a);
                    EXPECT_EQ(ab.full, ba.full);
                    EXPECT_EQ(ab.any, ba.any);
                    EXPECT_TRUE(!ab.full || ab.any);
                }
            }
        }
    }
}

TEST(Concordance, FixtureCountsMatchHandTally) {
    const auto expected = fixtures::read_json("concordance/expected.json")["cells"];
    const auto cells = concordance_rates(fixture_log(), refs());
    ASSERT_EQ(cells.size(), expected.size());
    for (std::size_t i = 0; i < cells.size(); ++i) {
        const auto& e = expected[i];
        EXPECT_EQ(std::string(to_string(cells[i].condition)), e["condition"].get<std::string>());
        EXPECT_EQ(cells[i].reference, e["reference"].get<std::string>());
        EXPECT_EQ(cells[i].n, e["n"].get<std::size_t>());
        EXPECT_EQ(cells[i].full_count, e["full_count"].get<std::size_t>()) << e.dump();
        EXPECT_EQ(cells[i].any_count, e["any_count"].get<std::size_t>()) << e.dump();
        ASSERT_TRUE(cells[i].full_rate.has_value());
        EXPECT_DOUBLE_EQ(*cells[i].full_rate, static_cast<double>(cells[i].full_count) / static_cast<double>(cells[i].n));
    }
}

TEST(Concordance, UnknownCaseNamesRecord) {
    auto log = fixture_log();
    log[3].case_id = "nobody";
    try {
        concordance_rates(log, refs());
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::UnknownCase);
        EXPECT_NE(std::string(e.what()).find(log[3].record_id), std::string::npos) << e.what();
    }
}

TEST(Concordance, EmptyCellHasNoRate) {
    auto log = fixture_log();
    std::erase_if(log, [](const DecisionRecord& r) { return r.condition == Condition::TextOnly; });
    for (const auto& c : concordance_rates(log, refs())) {
        if (c.condition == Condition::TextOnly) {
            EXPECT_EQ(c.n, 0u);
            EXPECT_FALSE(c.full_rate.has_value());
            EXPECT_TRUE(c.to_json()["full_rate"].is_null());
        }
    }
}

TEST(Validate, DecisionRules) {
    const auto r = refs();
    // Ruth Silva has no IV fluids running, so decrease is not offered.
    auto d = decision("u1", Role::Fellow, "ruth-silva", Condition::NoAi, Delta::Decrease, Delta::Increase);
    EXPECT_TRUE(has_rule(validate_decision(d, r), "decrease_removed"));
    d.choice.fluid = Delta::Increase;
    EXPECT_TRUE(validate_decision(d, r).empty());

    d.likert.confidence = 8;
    EXPECT_TRUE(has_rule(validate_decision(d, r), "likert_range"));
    d.likert.confidence = 4;
    d.likert.usefulness = 3;
    EXPECT_TRUE(has_rule(validate_decision(d, r), "likert_not_applicable"));

    auto ai = decision("u1", Role::App, "jeffrey-williams", Condition::FeatureExplanation, Delta::Increase,
                       Delta::Decrease);
    EXPECT_TRUE(validate_decision(ai, r).empty());
    ai.likert.ai_confidence_effect.reset();
    EXPECT_TRUE(has_rule(validate_decision(ai, r), "likert_required"));

    ai.case_id = "unknown";
    EXPECT_TRUE(has_rule(validate_decision(ai, r), "unknown_case"));
}

TEST(Majority, PluralityAndTies) {
    std::vector<DecisionRecord> log{
        decision("a", Role::Attending, "c", Condition::NoAi, Delta::Increase, Delta::NoChange),
        decision("b", Role::Attending, "c", Condition::NoAi, Delta::Increase, Delta::NoChange),
        decision("c", Role::Attending, "c", Condition::NoAi, Delta::NoChange, Delta::NoChange),
        decision("d", Role::Fellow, "c", Condition::NoAi, Delta::NoChange, Delta::NoChange),
        decision("e", Role::Attending, "c", Condition::TextOnly, Delta::NoChange, Delta::NoChange)};
    const auto m = majority_attending(log, "c");
    ASSERT_TRUE(m.has_value());
    EXPECT_EQ(*m, (TreatmentDecision{Delta::Increase, Delta::NoChange}));
    log.push_back(decision("f", Role::Attending, "c", Condition::NoAi, Delta::NoChange, Delta::NoChange));
    EXPECT_FALSE(majority_attending(log, "c").has_value());
    EXPECT_FALSE(majority_attending(log, "other").has_value());
}

TEST(Record, JsonRoundTripAndValidation) {
    const auto log = fixture_log();
    ASSERT_EQ(log.size(), 24u);
    for (const auto& r : log) EXPECT_EQ(DecisionRecord::from_json(r.to_json()), r);
    auto j = log[0].to_json();
    j["condition"] = "maybe";
    EXPECT_THROW(DecisionRecord::from_json(j), Error);
    j = log[0].to_json();
    j.erase("participant_id");
    try {
        DecisionRecord::from_json(j);
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("participant_id"), std::string::npos);
    }
}

TEST(DecisionLog, IdempotentConcurrentAppends) {
    fixtures::TempDir dir;
    DecisionLog log(dir.str("decisions.jsonl"));
    auto d = decision("u1", Role::Attending, "ruth-silva", Condition::NoAi, Delta::Increase, Delta::NoChange);
    d.idempotency_key = "same-key";
    std::vector<std::string> ids(16);
    std::vector<bool> created(16);
    std::vector<std::thread> threads;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        threads.emplace_back([&, i] {
            const auto res = log.append(d);
            ids[i] = res.record.record_id;
            created[i] = res.created;
        });
    }
    for (auto& t : threads) t.join();
    EXPECT_EQ(log.size(), 1u);
    EXPECT_EQ(std::count(created.begin(), created.end(), true), 1);
    for (const auto& id : ids) EXPECT_EQ(id, ids[0]);
    EXPECT_EQ(read_decision_log(dir.str("decisions.jsonl")).size(), 1u);
}

TEST(DecisionLog, SupersedesAndPersistence) {
    fixtures::TempDir dir;
    const auto path = dir.str("decisions.jsonl");
    std::string first_id;
    {
        DecisionLog log(path);
        auto d = decision("u1", Role::Attending, "ruth-silva", Condition::NoAi, Delta::Increase, Delta::NoChange);
        d.idempotency_key = "k1";
        first_id = log.append(d).record.record_id;
        auto fix = d;
        fix.idempotency_key = "k2";
        fix.choice.vaso = Delta::Increase;
        fix.supersedes = first_id;
        log.append(fix);
        auto bad = d;
        bad.idempotency_key = "k3";
        bad.supersedes = "D999999";
        EXPECT_THROW(log.append(bad), Error);
        EXPECT_EQ(log.size(), 2u);
    }
    DecisionLog reopened(path);
    const auto snap = reopened.snapshot();
    ASSERT_EQ(snap.size(), 2u);
    EXPECT_EQ(snap[0].record_id, first_id);
    // A replayed key after restart still maps to the stored record.
    auto replay = decision("u1", Role::Attending, "ruth-silva", Condition::NoAi, Delta::Increase, Delta::NoChange);
    replay.idempotency_key = "k1";
    EXPECT_FALSE(reopened.append(replay).created);
    const auto eff = effective_records(snap);
    ASSERT_EQ(eff.size(), 1u);
    EXPECT_EQ(eff[0].choice.vaso, Delta::Increase);
    const auto next = reopened.append(decision("u2", Role::Fellow, "ruth-silva", Condition::NoAi, Delta::NoChange,
                                               Delta::NoChange));
    EXPECT_EQ(next.record.record_id, "D000003");
}

TEST(Report, ContainsTablesAndModels) {
    const auto report = study_report(fixture_log(), refs());
    EXPECT_EQ(report["schema_version"], 1);
    EXPECT_EQ(report["n_records"], 24);
    EXPECT_EQ(report["n_participants"], 6);
    EXPECT_EQ(report["concordance"].size(), 12u);
    EXPECT_TRUE(report.contains("likert_ols"));
    for (const char* name : {"ai", "original_clinician", "majority_attending"}) {
        EXPECT_TRUE(report["concordance_logit"].contains(name)) << name;
    }
    const auto text = format_study_report(report);
    EXPECT_NE(text.find("Concordance"), std::string::npos);
    EXPECT_NE(text.find("feature_explanation"), std::string::npos);

    StudyReportOptions w;
    w.interval = IntervalMethod::Wilson;
    EXPECT_EQ(study_report(fixture_log(), refs(), w)["interval_method"], "wilson");
}
