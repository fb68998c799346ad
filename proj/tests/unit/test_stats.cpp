#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "fixtures.hpp"
#include "sepsis/error.hpp"
#include "sepsis/stats.hpp"

using namespace sepsis;

namespace {

template <class T>
std::vector<T> get(const nlohmann::json& j, const char* key) {
    return j.at(key).get<std::vector<T>>();
}

ErrorCode code_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "expected an Error";
    return ErrorCode::Io;
}

}  // namespace

TEST(Ols, SixRowClusterFixture) {
    const auto fx = fixtures::read_json("stats_oracle.json")["ols_six_row"];
    const auto y = get<double>(fx, "y");
    const auto cond = get<std::string>(fx, "condition");
    const auto clusters = get<std::string>(fx, "clusters");
    const auto r = ols_cluster(y, cond, clusters);
    const auto coef = get<double>(fx, "coef");
    const auto se = get<double>(fx, "std_errors");
    ASSERT_EQ(r.coef.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_NEAR(r.coef[i], coef[i], 1e-10);
        EXPECT_NEAR(r.std_errors[i], se[i], 1e-10);
        for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(r.vcov(i, j), fx["vcov"][i][j].get<double>(), 1e-10);
    }
    EXPECT_NEAR(r.f_stat, fx["f_stat"].get<double>(), 1e-10);
    EXPECT_EQ(r.df1, fx["df1"].get<int>());
    EXPECT_EQ(r.df2, fx["df2"].get<int>());
    EXPECT_NEAR(r.p_value, fx["p_value"].get<double>(), 1e-10);
    EXPECT_EQ(r.n, 6u);
    EXPECT_EQ(r.n_clusters, 2u);
    EXPECT_EQ(r.names, (std::vector<std::string>{"(intercept)", "B"}));
}

TEST(Ols, SingletonClustersReduceToHc1) {
    const auto fx = fixtures::read_json("stats_oracle.json")["hc1"];
    const auto y = get<double>(fx, "y");
    const auto cond = get<std::string>(fx, "condition");
    std::vector<std::string> clusters;
    for (std::size_t i = 0; i < y.size(); ++i) clusters.push_back("row" + std::to_string(i));
    const auto r = ols_cluster(y, cond, clusters);
    const auto coef = get<double>(fx, "coef");
    const auto se = get<double>(fx, "std_errors");
    ASSERT_EQ(r.coef.size(), coef.size());
    for (std::size_t i = 0; i < coef.size(); ++i) {
        EXPECT_NEAR(r.coef[i], coef[i], 1e-10);
        EXPECT_NEAR(r.std_errors[i], se[i], 1e-10);
    }
}

TEST(Ols, ConstantOutcomeHasZeroEffects) {
    const std::vector<double> y(8, 0.5);
    const std::vector<std::string> cond{"a", "b", "a", "b", "a", "b", "a", "b"};
    const std::vector<std::string> cl{"1", "1", "2", "2", "3", "3", "4", "4"};
    const auto r = ols_cluster(y, cond, cl);
    EXPECT_NEAR(r.coef[0], 0.5, 1e-12);
    EXPECT_NEAR(r.coef[1], 0.0, 1e-12);
    EXPECT_NEAR(r.std_errors[1], 0.0, 1e-12);
}

TEST(Ols, SingleClusterRejected) {
    const std::vector<double> y{1, 2, 3, 4};
    const std::vector<std::string> cond{"a", "b", "a", "b"};
    const std::vector<std::string> cl(4, "only");
    EXPECT_EQ(code_of([&] { ols_cluster(y, cond, cl); }), ErrorCode::Validation);
}

TEST(Ols, RankDeficiencyNamesColumns) {
    RowMatrix x;
    for (int i = 0; i < 6; ++i) x.append_row(std::vector<double>{1.0, i % 2 ? 1.0 : 0.0, i % 2 ? 2.0 : 0.0});
    const std::vector<double> y{1, 2, 3, 4, 5, 6};
    const std::vector<std::string> cl{"a", "a", "b", "b", "c", "c"};
    const std::vector<std::string> names{"(intercept)", "treated", "treated_twice"};
    try {
        ols_cluster_design(x, y, cl, names);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::RankDeficient);
        EXPECT_NE(std::string(e.what()).find("treated_twice"), std::string::npos) << e.what();
    }
}

TEST(Holm, MatchesReferenceCases) {
    for (const auto& c : fixtures::read_json("stats_oracle.json")["holm"]) {
        const auto p = get<double>(c, "p");
        const auto res = holm_bonferroni(p);
        const auto reject = get<bool>(c, "reject");
        const auto adjusted = get<double>(c, "adjusted");
        ASSERT_EQ(res.size(), p.size());
        for (std::size_t i = 0; i < p.size(); ++i) {
            EXPECT_EQ(res[i].reject, reject[i]) << c.dump();
            EXPECT_NEAR(res[i].adjusted_p, adjusted[i], 1e-12) << c.dump();
        }
    }
}

TEST(Logit, MatchesClusterFixture) {
    const auto fx = fixtures::read_json("stats_oracle.json")["logit"];
    const auto y = get<int>(fx, "y");
    const auto cond = get<std::string>(fx, "condition");
    const auto clusters = get<std::string>(fx, "clusters");
    const auto r = logit_concordance(y, cond, clusters);
    const auto coef = get<double>(fx, "coef");
    const auto se = get<double>(fx, "std_errors");
    ASSERT_EQ(r.coef.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_NEAR(r.coef[i], coef[i], 1e-6);
        EXPECT_NEAR(r.std_errors[i], se[i], 1e-6);
    }
    EXPECT_GT(r.iterations, 0);
    for (std::size_t i = 1; i < r.deviance_trace.size(); ++i) {
        EXPECT_LE(r.deviance_trace[i], r.deviance_trace[i - 1] + 1e-9);
    }
    EXPECT_EQ(r.df1, 2);
}

TEST(Logit, InterceptOnlyIsLogOdds) {
    RowMatrix x(100, 1, 1.0);
    std::vector<int> y(100, 0);
    std::vector<std::string> cl;
    for (int i = 0; i < 100; ++i) {
        if (i % 10 < 3) y[static_cast<std::size_t>(i)] = 1;
        cl.push_back("c" + std::to_string(i % 7));
    }
    const std::vector<std::string> names{"(intercept)"};
    const auto r = logit_cluster_design(x, y, cl, names);
    EXPECT_NEAR(r.coef[0], std::log(0.3 / 0.7), 1e-8);
}

TEST(Logit, RecoversKnownCoefficients) {
    // Each condition gets exactly its expected number of positives, scattered
    // over participants, so the check is not dominated by sampling noise.
    std::mt19937_64 rng(2024);
    const std::vector<std::string> levels{"no_ai", "ai", "ai_explained"};
    const std::vector<double> truth{-0.4, 0.6, 1.1};
    std::vector<int> y(2000, 0);
    std::vector<std::string> cond;
    std::vector<std::string> cl;
    std::vector<std::vector<std::size_t>> rows(3);
    for (std::size_t i = 0; i < 2000; ++i) {
        rows[i % 3].push_back(i);
        cond.push_back(levels[i % 3]);
        cl.push_back("p" + std::to_string(i / 20));
    }
    for (std::size_t c = 0; c < 3; ++c) {
        const double eta = truth[0] + (c > 0 ? truth[c] : 0.0);
        const auto positives = static_cast<std::size_t>(std::lround(rows[c].size() / (1.0 + std::exp(-eta))));
        std::shuffle(rows[c].begin(), rows[c].end(), rng);
        for (std::size_t j = 0; j < positives; ++j) y[rows[c][j]] = 1;
    }
    const auto r = logit_concordance(y, cond, cl, levels);
    ASSERT_EQ(r.names, (std::vector<std::string>{"(intercept)", "ai", "ai_explained"}));
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(r.coef[i], truth[i], 0.15);
}

TEST(Logit, NullFixtureRejectsRarely) {
    // Under no condition effect the joint test rejects near the nominal rate.
    std::mt19937_64 rng(77);
    std::bernoulli_distribution coin(0.4);
    int rejections = 0;
    const int reps = 200;
    for (int rep = 0; rep < reps; ++rep) {
        std::vector<int> y;
        std::vector<std::string> cond;
        std::vector<std::string> cl;
        for (int i = 0; i < 500; ++i) {
            y.push_back(coin(rng) ? 1 : 0);
            cond.push_back(i % 2 ? "ai" : "no_ai");
            cl.push_back("p" + std::to_string(i / 10));
        }
        if (logit_concordance(y, cond, cl).p_value < 0.05) ++rejections;
    }
    EXPECT_LE(rejections, reps * 0.10);
}

TEST(Logit, SeparationDetected) {
    const std::vector<int> y{0, 1, 0, 1, 0, 1, 0, 1};
    const std::vector<std::string> cond{"a", "b", "a", "b", "a", "b", "a", "b"};
    const std::vector<std::string> cl{"1", "1", "2", "2", "3", "3", "4", "4"};
    EXPECT_EQ(code_of([&] { logit_concordance(y, cond, cl); }), ErrorCode::Separation);
}

TEST(Intervals, WilsonAndNormal) {
    const auto n = normal_interval(0.5, 100);
    EXPECT_NEAR(n.lo, 0.5 - 1.959963984540054 * 0.05, 1e-12);
    const auto w = wilson_interval(0.0, 10);
    EXPECT_NEAR(w.lo, 0.0, 1e-12);
    EXPECT_GT(w.hi, 0.0);
    const double z = 1.959963984540054;
    const double center = (0.3 + z * z / 40.0) / (1.0 + z * z / 20.0);
    const auto w2 = wilson_interval(0.3, 20);
    EXPECT_NEAR(0.5 * (w2.lo + w2.hi), center, 1e-12);
}
