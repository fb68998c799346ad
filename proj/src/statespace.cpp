#include "sepsis/statespace.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include <fmt/format.h>

#include "sepsis/error.hpp"

namespace sepsis {

namespace {

double squared_distance(std::span<const double> a, std::span<const double> b) {
    double sum = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) {
        const double diff = a[j] - b[j];
        sum += diff * diff;
    }
    return sum;
}

// Relative slack applied to Hamerly bounds so rounding can never let a point
// skip a recomputation it needed.
constexpr double kBoundSlack = 1e-9;

struct ScanResult {
    int best = 0;
    double best_d2 = 0.0;
    double second_d2 = std::numeric_limits<double>::infinity();
};

ScanResult nearest_two(std::span<const double> x, const RowMatrix& centers) {
    ScanResult r;
    r.best_d2 = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < centers.rows(); ++c) {
        const double d2 = squared_distance(x, centers.row(c));
        if (d2 < r.best_d2) {
            r.second_d2 = r.best_d2;
            r.best_d2 = d2;
            r.best = static_cast<int>(c);
        } else if (d2 < r.second_d2) {
            r.second_d2 = d2;
        }
    }
    return r;
}

bool has_k_distinct_rows(const RowMatrix& data, int k) {
    std::vector<std::size_t> order(data.rows());
    std::iota(order.begin(), order.end(), 0);
    auto less = [&](std::size_t a, std::size_t b) {
        auto ra = data.row(a);
        auto rb = data.row(b);
        return std::lexicographical_compare(ra.begin(), ra.end(), rb.begin(), rb.end());
    };
    std::sort(order.begin(), order.end(), less);
    int distinct = order.empty() ? 0 : 1;
    for (std::size_t i = 1; i < order.size() && distinct < k; ++i) {
        auto ra = data.row(order[i - 1]);
        auto rb = data.row(order[i]);
        if (!std::equal(ra.begin(), ra.end(), rb.begin())) ++distinct;
    }
    return distinct >= k;
}

RowMatrix seed_plus_plus(const RowMatrix& z, int k, std::mt19937_64& rng) {
    const std::size_t n = z.rows();
    RowMatrix centers;
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    centers.append_row(z.row(pick(rng)));

    std::vector<double> d2(n);
    for (std::size_t i = 0; i < n; ++i) d2[i] = squared_distance(z.row(i), centers.row(0));

    std::uniform_real_distribution<double> unit(0.0, 1.0);
    while (static_cast<int>(centers.rows()) < k) {
        const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
        std::size_t chosen = n - 1;
        if (total > 0.0) {
            const double target = unit(rng) * total;
            double running = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                running += d2[i];
                if (running > target && d2[i] > 0.0) {
                    chosen = i;
                    break;
                }
            }
            // Rounding can leave the target past the end; fall back to the last positive weight.
            if (running <= target) {
                for (std::size_t i = n; i-- > 0;) {
                    if (d2[i] > 0.0) {
                        chosen = i;
                        break;
                    }
                }
            }
        } else {
            chosen = pick(rng);
        }
        centers.append_row(z.row(chosen));
        const auto c = centers.row(centers.rows() - 1);
        for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], squared_distance(z.row(i), c));
    }
    return centers;
}

struct LloydResult {
    RowMatrix centers;
    double wcss = 0.0;
    std::vector<double> trace;
    int iterations = 0;
};

// Lloyd's algorithm with Hamerly's bounds: a point whose upper bound stays
// strictly below its lower bound keeps its (unique) nearest center, so the
// assignments match a plain exhaustive Lloyd iteration step for step.
LloydResult lloyd(const RowMatrix& z, RowMatrix centers, int max_iterations) {
    const std::size_t n = z.rows();
    const std::size_t d = z.cols();
    const std::size_t k = centers.rows();

    std::vector<int> assign(n);
    std::vector<double> upper(n);
    std::vector<double> lower(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto r = nearest_two(z.row(i), centers);
        assign[i] = r.best;
        upper[i] = std::sqrt(r.best_d2);
        lower[i] = std::sqrt(r.second_d2);
    }

    LloydResult out;
    std::vector<double> half_gap(k);
    std::vector<double> moved(k);
    std::vector<std::size_t> counts(k);
    RowMatrix sums(k, d);

    for (int iter = 0; iter < max_iterations; ++iter) {
        // Update step.
        std::fill(sums.data().begin(), sums.data().end(), 0.0);
        std::fill(counts.begin(), counts.end(), 0);
        for (std::size_t i = 0; i < n; ++i) {
            auto s = sums.row(static_cast<std::size_t>(assign[i]));
            const auto x = z.row(i);
            for (std::size_t j = 0; j < d; ++j) s[j] += x[j];
            ++counts[static_cast<std::size_t>(assign[i])];
        }

        // Empty clusters take the point farthest from its own center.
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] != 0) continue;
            std::size_t far = n;
            double far_d2 = -1.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (counts[static_cast<std::size_t>(assign[i])] < 2) continue;
                const double d2 = squared_distance(z.row(i), centers.row(static_cast<std::size_t>(assign[i])));
                if (d2 > far_d2) {
                    far_d2 = d2;
                    far = i;
                }
            }
            if (far == n) break;
            auto old = sums.row(static_cast<std::size_t>(assign[far]));
            auto fresh = sums.row(c);
            const auto x = z.row(far);
            for (std::size_t j = 0; j < d; ++j) {
                old[j] -= x[j];
                fresh[j] = x[j];
            }
            --counts[static_cast<std::size_t>(assign[far])];
            counts[c] = 1;
            assign[far] = static_cast<int>(c);
            upper[far] = 0.0;
            lower[far] = 0.0;
        }

        double max_move = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            auto center = centers.row(c);
            if (counts[c] == 0) {
                moved[c] = 0.0;
                continue;
            }
            const auto s = sums.row(c);
            double m2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double updated = s[j] / static_cast<double>(counts[c]);
                const double diff = updated - center[j];
                m2 += diff * diff;
                center[j] = updated;
            }
            moved[c] = std::sqrt(m2);
            max_move = std::max(max_move, moved[c]);
        }

        double wcss = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            wcss += squared_distance(z.row(i), centers.row(static_cast<std::size_t>(assign[i])));
        }
        out.trace.push_back(wcss);
        out.iterations = iter + 1;

        for (std::size_t i = 0; i < n; ++i) {
            upper[i] = (upper[i] + moved[static_cast<std::size_t>(assign[i])]) * (1.0 + kBoundSlack);
            lower[i] = (lower[i] - max_move) * (1.0 - kBoundSlack);
        }

        // Assignment step.
        for (std::size_t c = 0; c < k; ++c) {
            double nearest = std::numeric_limits<double>::infinity();
            for (std::size_t o = 0; o < k; ++o) {
                if (o == c) continue;
                nearest = std::min(nearest, squared_distance(centers.row(c), centers.row(o)));
            }
            half_gap[c] = 0.5 * std::sqrt(nearest) * (1.0 - kBoundSlack);
        }

        std::size_t changed = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const auto a = static_cast<std::size_t>(assign[i]);
            const double bound = std::max(half_gap[a], lower[i]);
            if (upper[i] < bound) continue;
            upper[i] = std::sqrt(squared_distance(z.row(i), centers.row(a))) * (1.0 + kBoundSlack);
            if (upper[i] < bound) continue;
            const auto r = nearest_two(z.row(i), centers);
            upper[i] = std::sqrt(r.best_d2) * (1.0 + kBoundSlack);
            lower[i] = std::sqrt(r.second_d2) * (1.0 - kBoundSlack);
            if (r.best != assign[i]) {
                assign[i] = r.best;
                ++changed;
            }
        }
        if (changed == 0) break;
    }
    out.wcss = out.trace.empty() ? 0.0 : out.trace.back();
    out.centers = std::move(centers);
    return out;
}

}  // namespace

std::vector<double> StateModel::standardize(std::span<const double> raw) const {
    std::vector<double> z(raw.size());
    for (std::size_t j = 0; j < raw.size(); ++j) z[j] = (raw[j] - means[j]) / stds[j];
    return z;
}

std::vector<double> StateModel::unstandardize(std::span<const double> z) const {
    std::vector<double> raw(z.size());
    for (std::size_t j = 0; j < z.size(); ++j) raw[j] = z[j] * stds[j] + means[j];
    return raw;
}

RowMatrix extract_feature_matrix(const Cohort& cohort, std::span<const std::string> names) {
    RowMatrix out;
    std::vector<double> row(names.size());
    for (const auto& p : cohort) {
        for (const auto& rec : p.timesteps) {
            for (std::size_t j = 0; j < names.size(); ++j) {
                auto v = feature_value(p, rec, names[j]);
                if (!v) {
                    throw Error(ErrorCode::Validation,
                                fmt::format("patient '{}' bin {}: missing feature '{}'", p.patient_id,
                                            rec.bin_index, names[j]));
                }
                row[j] = *v;
            }
            out.append_row(row);
        }
    }
    return out;
}

std::vector<double> extract_features(const StateModel& model, const PatientTrajectory& patient,
                                     const TimestepRecord& record) {
    std::vector<double> out(model.dims());
    for (std::size_t j = 0; j < model.dims(); ++j) {
        auto v = feature_value(patient, record, model.feature_order[j]);
        if (!v) {
            throw Error(ErrorCode::Validation,
                        fmt::format("patient '{}' bin {}: missing feature '{}'", patient.patient_id,
                                    record.bin_index, model.feature_order[j]));
        }
        out[j] = *v;
    }
    return out;
}

StateModel fit_states(const RowMatrix& raw, std::span<const std::string> names,
                      const KMeansOptions& options, KMeansTrace* trace) {
    if (options.k < 2) throw Error(ErrorCode::Validation, "fit_states: k must be >= 2");
    if (raw.cols() != names.size()) {
        throw Error(ErrorCode::Validation, "fit_states: feature name count does not match data");
    }
    for (double v : raw.data()) {
        if (!std::isfinite(v)) throw Error(ErrorCode::Validation, "fit_states: non-finite feature value");
    }
    if (!has_k_distinct_rows(raw, options.k)) {
        throw Error(ErrorCode::InsufficientData,
                    fmt::format("insufficient data: fewer than k={} distinct feature vectors", options.k));
    }

    const std::size_t n = raw.rows();
    StateModel model;
    model.k = options.k;
    model.seed = options.seed;
    model.n_restarts = options.n_restarts;

    std::vector<std::size_t> kept;
    for (std::size_t j = 0; j < raw.cols(); ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += raw(i, j);
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) var += (raw(i, j) - mean) * (raw(i, j) - mean);
        const double sd = std::sqrt(var / static_cast<double>(n));
        if (sd <= 1e-12 * std::max(1.0, std::abs(mean))) {
            model.dropped_features.push_back(names[j]);
            if (trace) trace->warnings.push_back(fmt::format("dropped constant feature '{}'", names[j]));
            continue;
        }
        kept.push_back(j);
        model.feature_order.push_back(names[j]);
        model.means.push_back(mean);
        model.stds.push_back(sd);
    }
    if (kept.empty()) {
        throw Error(ErrorCode::InsufficientData, "insufficient data: every feature is constant");
    }

    RowMatrix z(n, kept.size());
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < kept.size(); ++c) {
            z(i, c) = (raw(i, kept[c]) - model.means[c]) / model.stds[c];
        }
    }

    const int restarts = std::max(1, options.n_restarts);
    double best = std::numeric_limits<double>::infinity();
    for (int r = 0; r < restarts; ++r) {
        std::seed_seq seq{static_cast<std::uint32_t>(options.seed),
                          static_cast<std::uint32_t>(options.seed >> 32),
                          static_cast<std::uint32_t>(r)};
        std::mt19937_64 rng(seq);
        auto result = lloyd(z, seed_plus_plus(z, options.k, rng), options.max_iterations);
        if (trace) {
            trace->wcss.push_back(result.trace);
            trace->iterations.push_back(result.iterations);
        }
        if (result.wcss < best) {
            best = result.wcss;
            model.centroids = std::move(result.centers);
            model.wcss = result.wcss;
            if (trace) trace->best_restart = r;
        }
    }
    return model;
}

StateModel fit_states(const Cohort& cohort, std::span<const std::string> names,
                      const KMeansOptions& options, KMeansTrace* trace) {
    return fit_states(extract_feature_matrix(cohort, names), names, options, trace);
}

int assign_state(const StateModel& model, std::span<const double> raw_features) {
    if (raw_features.size() != model.dims()) {
        throw Error(ErrorCode::Validation,
                    fmt::format("assign_state: expected {} features, got {}", model.dims(), raw_features.size()));
    }
    const auto z = model.standardize(raw_features);
    int best = 0;
    double best_d2 = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < model.centroids.rows(); ++c) {
        const double d2 = squared_distance(z, model.centroids.row(c));
        if (d2 < best_d2) {
            best_d2 = d2;
            best = static_cast<int>(c);
        }
    }
    return best;
}

int assign_state(const StateModel& model, const PatientTrajectory& patient,
                 const TimestepRecord& record) {
    return assign_state(model, extract_features(model, patient, record));
}

std::vector<int> assign_states(const StateModel& model, const Cohort& cohort) {
    std::vector<int> out;
    for (const auto& p : cohort) {
        for (const auto& rec : p.timesteps) out.push_back(assign_state(model, p, rec));
    }
    return out;
}

nlohmann::json StateModel::to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t c = 0; c < centroids.rows(); ++c) {
        const auto r = centroids.row(c);
        rows.push_back(std::vector<double>(r.begin(), r.end()));
    }
    return {{"schema_version", kSchemaVersion},
            {"feature_order", feature_order},
            {"dropped_features", dropped_features},
            {"means", means},
            {"stds", stds},
            {"k", k},
            {"seed", seed},
            {"n_restarts", n_restarts},
            {"wcss", wcss},
            {"centroids", std::move(rows)}};
}

StateModel StateModel::from_json(const nlohmann::json& doc) {
    StateModel m;
    try {
        if (doc.at("schema_version").get<int>() != kSchemaVersion) {
            throw Error(ErrorCode::Validation, "state model: unsupported schema_version");
        }
        m.feature_order = doc.at("feature_order").get<std::vector<std::string>>();
        m.dropped_features = doc.at("dropped_features").get<std::vector<std::string>>();
        m.means = doc.at("means").get<std::vector<double>>();
        m.stds = doc.at("stds").get<std::vector<double>>();
        m.k = doc.at("k").get<int>();
        m.seed = doc.at("seed").get<std::uint64_t>();
        m.n_restarts = doc.at("n_restarts").get<int>();
        m.wcss = doc.at("wcss").get<double>();
        for (const auto& row : doc.at("centroids")) {
            m.centroids.append_row(row.get<std::vector<double>>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Validation, fmt::format("state model json: {}", e.what()));
    }
    if (static_cast<int>(m.centroids.rows()) != m.k || m.centroids.cols() != m.feature_order.size() ||
        m.means.size() != m.feature_order.size() || m.stds.size() != m.feature_order.size()) {
        throw Error(ErrorCode::Validation, "state model json: inconsistent dimensions");
    }
    return m;
}

}  // namespace sepsis
