#include <gtest/gtest.h>

#include <random>

#include "fixtures.hpp"
#include "sepsis/error.hpp"
#include "sepsis/statespace.hpp"

using namespace sepsis;

namespace {

const std::vector<std::string> kXY{"x", "y"};

RowMatrix two_groups() {
    RowMatrix m;
    for (int i = 0; i < 10; ++i) m.append_row(std::vector<double>{0.0, 0.0});
    for (int i = 0; i < 10; ++i) m.append_row(std::vector<double>{10.0, 10.0});
    return m;
}

KMeansOptions opts(int k, std::uint64_t seed = 1, int restarts = 3) {
    KMeansOptions o;
    o.k = k;
    o.seed = seed;
    o.n_restarts = restarts;
    return o;
}

}  // namespace

TEST(FitStates, TwoSeparatedGroups) {
    const auto model = fit_states(two_groups(), kXY, opts(2));
    ASSERT_EQ(model.k, 2);
    // Standardized, the groups sit at -1 and +1 on both axes.
    std::vector<std::vector<double>> centers{{model.centroids(0, 0), model.centroids(0, 1)},
                                             {model.centroids(1, 0), model.centroids(1, 1)}};
    std::sort(centers.begin(), centers.end());
    EXPECT_NEAR(centers[0][0], -1.0, 1e-12);
    EXPECT_NEAR(centers[0][1], -1.0, 1e-12);
    EXPECT_NEAR(centers[1][0], 1.0, 1e-12);
    EXPECT_NEAR(centers[1][1], 1.0, 1e-12);
    EXPECT_NEAR(model.wcss, 0.0, 1e-12);
}

TEST(FitStates, WcssMatchesAnalyticValue) {
    RowMatrix m;
    for (double v : {-1.0, 1.0}) m.append_row(std::vector<double>{v, 0.0});
    for (double v : {9.0, 11.0}) m.append_row(std::vector<double>{v, 1.0});
    const auto model = fit_states(m, kXY, opts(2));
    // x std over the four points is sqrt(26), y std is 0.5.
    const double sx = std::sqrt(((-6.0) * (-6.0) + 16 + 16 + 36) / 4.0);
    EXPECT_NEAR(model.stds[0], sx, 1e-12);
    EXPECT_NEAR(model.wcss, 4.0 / (sx * sx), 1e-12);
}

TEST(FitStates, DeterministicForSeed) {
    const auto sim = fixtures::separated_cohort(300, 3);
    const auto names = sim.mdp.schema.clustering_features();
    const auto a = fit_states(sim.sampled.cohort, names, opts(6, 42));
    const auto b = fit_states(sim.sampled.cohort, names, opts(6, 42));
    EXPECT_EQ(a, b);
    EXPECT_EQ(a.centroids.data(), b.centroids.data());
}

TEST(FitStates, InsufficientDistinctPoints) {
    try {
        fit_states(two_groups(), kXY, opts(3));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::InsufficientData);
    }
}

TEST(FitStates, NonFiniteFeatureRejected) {
    auto m = two_groups();
    m(3, 1) = std::nan("");
    try {
        fit_states(m, kXY, opts(2));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::Validation);
    }
}

TEST(FitStates, ConstantFeatureDroppedWithWarning) {
    RowMatrix m;
    for (int i = 0; i < 10; ++i) m.append_row(std::vector<double>{i < 5 ? 0.0 : 5.0, 7.0, static_cast<double>(i)});
    KMeansTrace trace;
    const std::vector<std::string> names{"a", "const", "b"};
    const auto model = fit_states(m, names, opts(2), &trace);
    EXPECT_EQ(model.feature_order, (std::vector<std::string>{"a", "b"}));
    EXPECT_EQ(model.dropped_features, std::vector<std::string>{"const"});
    ASSERT_FALSE(trace.warnings.empty());
    EXPECT_NE(trace.warnings[0].find("const"), std::string::npos);
}

TEST(FitStates, WcssNonIncreasingAcrossIterations) {
    const auto sim = fixtures::separated_cohort(400, 9, 6, 2.0);
    KMeansTrace trace;
    fit_states(sim.sampled.cohort, sim.mdp.schema.clustering_features(), opts(12, 5, 4), &trace);
    for (const auto& series : trace.wcss) {
        for (std::size_t i = 1; i < series.size(); ++i) EXPECT_LE(series[i], series[i - 1] + 1e-9);
    }
}

TEST(FitStates, StandardizedTrainingFeatures) {
    const auto sim = fixtures::separated_cohort(300, 4);
    const auto names = sim.mdp.schema.clustering_features();
    const auto model = fit_states(sim.sampled.cohort, names, opts(6));
    const auto raw = extract_feature_matrix(sim.sampled.cohort, model.feature_order);
    const std::size_t d = model.dims();
    std::vector<double> sum(d, 0.0);
    std::vector<double> sq(d, 0.0);
    for (std::size_t i = 0; i < raw.rows(); ++i) {
        const auto z = model.standardize(raw.row(i));
        for (std::size_t j = 0; j < d; ++j) {
            sum[j] += z[j];
            sq[j] += z[j] * z[j];
        }
    }
    const double n = static_cast<double>(raw.rows());
    for (std::size_t j = 0; j < d; ++j) {
        EXPECT_NEAR(sum[j] / n, 0.0, 1e-9);
        EXPECT_NEAR(std::sqrt(sq[j] / n - (sum[j] / n) * (sum[j] / n)), 1.0, 1e-9);
    }
}

TEST(AssignState, CentroidMapsToItself) {
    const auto sim = fixtures::separated_cohort(300, 4);
    const auto model = fit_states(sim.sampled.cohort, sim.mdp.schema.clustering_features(), opts(6));
    for (int i = 0; i < model.k; ++i) {
        const auto raw = model.unstandardize(model.centroids.row(static_cast<std::size_t>(i)));
        EXPECT_EQ(assign_state(model, raw), i);
    }
}

TEST(AssignState, TieGoesToLowestId) {
    StateModel m;
    m.feature_order = {"x"};
    m.means = {0.0};
    m.stds = {1.0};
    m.k = 5;
    m.centroids = RowMatrix(5, 1);
    for (int i = 0; i < 5; ++i) m.centroids(static_cast<std::size_t>(i), 0) = 100.0 + i;
    m.centroids(1, 0) = -1.0;
    m.centroids(4, 0) = 1.0;
    EXPECT_EQ(assign_state(m, std::vector<double>{0.0}), 1);
    EXPECT_EQ(assign_state(m, std::vector<double>{102.0}), 2);
}

TEST(AssignState, MatchesBruteForceScan) {
    const auto sim = fixtures::separated_cohort(300, 8, 6, 3.0);
    const auto model = fit_states(sim.sampled.cohort, sim.mdp.schema.clustering_features(), opts(6));
    std::mt19937_64 rng(17);
    std::normal_distribution<double> noise(0.0, 2.0);
    for (int n = 0; n < 200; ++n) {
        std::vector<double> z(model.dims());
        for (auto& v : z) v = noise(rng);
        const auto raw = model.unstandardize(z);
        int best = 0;
        double best_d = 1e300;
        for (int c = 0; c < model.k; ++c) {
            double d = 0.0;
            for (std::size_t j = 0; j < model.dims(); ++j) {
                const double zj = (raw[j] - model.means[j]) / model.stds[j];
                d += (zj - model.centroids(static_cast<std::size_t>(c), j)) *
                     (zj - model.centroids(static_cast<std::size_t>(c), j));
            }
            if (d < best_d) {
                best_d = d;
                best = c;
            }
        }
        EXPECT_EQ(assign_state(model, raw), best);
    }
}

TEST(StateModel, JsonRoundTripIsExact) {
    const auto sim = fixtures::separated_cohort(200, 2);
    const auto model = fit_states(sim.sampled.cohort, sim.mdp.schema.clustering_features(), opts(6));
    const auto text = model.to_json().dump();
    const auto back = StateModel::from_json(nlohmann::json::parse(text));
    EXPECT_EQ(back, model);
}
