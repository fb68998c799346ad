#include "sepsis/simgen.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <queue>
#include <random>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "sepsis/error.hpp"

namespace sepsis {

namespace {

constexpr double kRowTolerance = 1e-9;

template <typename Rng>
int draw_index(Rng& rng, const double* probs, int n) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double u = unit(rng);
    double running = 0.0;
    int last_positive = 0;
    for (int i = 0; i < n; ++i) {
        if (probs[i] <= 0.0) continue;
        running += probs[i];
        last_positive = i;
        if (u < running) return i;
    }
    return last_positive;
}

// Uniform draw on (lo, hi].
template <typename Rng>
double draw_half_open(Rng& rng, double lo, double hi) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    return hi - unit(rng) * (hi - lo);
}

double dose_for_bin(int bin, const std::array<double, 3>& edges, double max, std::mt19937_64& rng) {
    switch (bin) {
        case 0: return 0.0;
        case 1: return draw_half_open(rng, 0.0, edges[0]);
        case 2: return draw_half_open(rng, edges[0], edges[1]);
        case 3: return draw_half_open(rng, edges[1], edges[2]);
        default: return draw_half_open(rng, edges[2], max);
    }
}

std::vector<std::vector<double>> nested(const std::vector<double>& flat, int rows, int cols) {
    std::vector<std::vector<double>> out(static_cast<std::size_t>(rows));
    for (int r = 0; r < rows; ++r) {
        out[static_cast<std::size_t>(r)].assign(flat.begin() + r * cols, flat.begin() + (r + 1) * cols);
    }
    return out;
}

std::vector<double> flatten(const nlohmann::json& rows) {
    std::vector<double> out;
    for (const auto& row : rows) {
        for (const auto& v : row) out.push_back(v.get<double>());
    }
    return out;
}

}  // namespace

void GroundTruthMdp::validate() const {
    auto fail = [](const std::string& msg) { throw Error(ErrorCode::Validation, "ground-truth mdp: " + msg); };
    if (n_states < 1 || n_actions < 1) fail("need at least one state and one action");
    if (!(gamma > 0.0 && gamma <= 1.0)) fail("gamma must lie in (0, 1]");
    if (static_cast<int>(action_ids.size()) != n_actions) fail("action_ids must list one grid id per action");
    for (int id : action_ids) {
        if (id < 0 || id >= kNumActions) fail(fmt::format("grid action id {} outside [0,24]", id));
    }
    if (static_cast<int>(initial.size()) != n_states) fail("initial distribution has wrong size");
    if (transitions.size() != static_cast<std::size_t>(n_states * n_actions * successor_count())) {
        fail("transition tensor has wrong size");
    }
    if (behavior.size() != static_cast<std::size_t>(n_states * n_actions)) fail("behavior has wrong size");
    if (emission_mean.size() != n_states * dims() || emission_scale.size() != n_states * dims()) {
        fail("emission parameters have wrong size");
    }
    double init_sum = 0.0;
    for (double p : initial) {
        if (p < 0.0) fail("negative initial probability");
        init_sum += p;
    }
    if (std::abs(init_sum - 1.0) > kRowTolerance) fail("initial distribution does not sum to 1");
    for (int s = 0; s < n_states; ++s) {
        double bsum = 0.0;
        for (int a = 0; a < n_actions; ++a) {
            if (b(s, a) < 0.0) fail("negative behavior probability");
            bsum += b(s, a);
            double tsum = 0.0;
            for (int n = 0; n < successor_count(); ++n) {
                if (t(s, a, n) < 0.0) fail("negative transition probability");
                tsum += t(s, a, n);
            }
            if (std::abs(tsum - 1.0) > kRowTolerance) {
                fail(fmt::format("T[{}][{}] sums to {}", s, a, tsum));
            }
        }
        if (std::abs(bsum - 1.0) > kRowTolerance) fail(fmt::format("B[{}] sums to {}", s, bsum));
    }
    for (double sc : emission_scale) {
        if (!(sc >= 0.0)) fail("emission scale must be >= 0");
    }
    ActionSpace edges;
    edges.fluid_edges = fluid_edges;
    edges.vaso_edges = vaso_edges;
    edges.validate();
    if (!(fluid_max > fluid_edges[2] && vaso_max > vaso_edges[2])) fail("dose maxima must exceed the top edge");
}

int GroundTruthMdp::latent_action(int grid_action) const {
    for (int a = 0; a < n_actions; ++a) {
        if (action_ids[static_cast<std::size_t>(a)] == grid_action) return a;
    }
    return -1;
}

nlohmann::json GroundTruthMdp::to_json() const {
    nlohmann::json tensor = nlohmann::json::array();
    for (int s = 0; s < n_states; ++s) {
        nlohmann::json per_action = nlohmann::json::array();
        for (int a = 0; a < n_actions; ++a) {
            std::vector<double> row;
            for (int n = 0; n < successor_count(); ++n) row.push_back(t(s, a, n));
            per_action.push_back(row);
        }
        tensor.push_back(std::move(per_action));
    }
    const int d = static_cast<int>(dims());
    return {{"schema_version", kSchemaVersion},
            {"n_states", n_states},
            {"n_actions", n_actions},
            {"gamma", gamma},
            {"action_ids", action_ids},
            {"initial", initial},
            {"transitions", std::move(tensor)},
            {"behavior", nested(behavior, n_states, n_actions)},
            {"schema", schema.to_json()},
            {"emission", {{"means", nested(emission_mean, n_states, d)}, {"scales", nested(emission_scale, n_states, d)}}},
            {"doses",
             {{"fluid_edges", fluid_edges},
              {"vaso_edges", vaso_edges},
              {"fluid_max", fluid_max},
              {"vaso_max", vaso_max}}},
            {"demographics", {{"age", age_range}, {"weight", weight_range}}}};
}

GroundTruthMdp GroundTruthMdp::from_json(const nlohmann::json& doc) {
    GroundTruthMdp m;
    try {
        m.n_states = doc.at("n_states").get<int>();
        m.n_actions = doc.at("n_actions").get<int>();
        m.gamma = doc.value("gamma", 1.0);
        if (doc.contains("action_ids")) {
            m.action_ids = doc.at("action_ids").get<std::vector<int>>();
        } else {
            for (int a = 0; a < m.n_actions; ++a) m.action_ids.push_back(a);
        }
        m.initial = doc.at("initial").get<std::vector<double>>();
        for (const auto& per_state : doc.at("transitions")) {
            for (const auto& row : per_state) {
                for (const auto& v : row) m.transitions.push_back(v.get<double>());
            }
        }
        m.behavior = flatten(doc.at("behavior"));
        m.schema = FeatureSchema::from_json(doc.at("schema"));
        m.emission_mean = flatten(doc.at("emission").at("means"));
        m.emission_scale = flatten(doc.at("emission").at("scales"));
        if (doc.contains("doses")) {
            const auto& d = doc.at("doses");
            m.fluid_edges = d.value("fluid_edges", m.fluid_edges);
            m.vaso_edges = d.value("vaso_edges", m.vaso_edges);
            m.fluid_max = d.value("fluid_max", m.fluid_max);
            m.vaso_max = d.value("vaso_max", m.vaso_max);
        }
        if (doc.contains("demographics")) {
            m.age_range = doc.at("demographics").value("age", m.age_range);
            m.weight_range = doc.at("demographics").value("weight", m.weight_range);
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Validation, fmt::format("ground-truth mdp json: {}", e.what()));
    }
    m.validate();
    return m;
}

SampledCohort sample_cohort(const GroundTruthMdp& mdp, int n_patients, std::uint64_t seed, int max_len) {
    mdp.validate();
    if (n_patients < 1) throw Error(ErrorCode::Validation, "sample_cohort: n_patients must be >= 1");
    if (max_len < 1) throw Error(ErrorCode::Validation, "sample_cohort: max_len must be >= 1");

    const auto& features = mdp.schema.features();
    const std::size_t d = features.size();
    SampledCohort out;
    out.cohort.reserve(static_cast<std::size_t>(n_patients));
    for (int i = 0; i < n_patients; ++i) {
        std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                          static_cast<std::uint32_t>(i)};
        std::mt19937_64 rng(seq);
        std::normal_distribution<double> noise(0.0, 1.0);
        std::uniform_real_distribution<double> unit(0.0, 1.0);

        PatientTrajectory p;
        p.patient_id = fmt::format("P{:06d}", i);
        p.demographics.age = mdp.age_range[0] + unit(rng) * (mdp.age_range[1] - mdp.age_range[0]);
        p.demographics.weight = mdp.weight_range[0] + unit(rng) * (mdp.weight_range[1] - mdp.weight_range[0]);
        p.demographics.gender = unit(rng) < 0.5 ? "F" : "M";

        std::vector<int> states;
        std::vector<int> actions;
        int s = draw_index(rng, mdp.initial.data(), mdp.n_states);
        for (int step = 0; step < max_len; ++step) {
            const int a = draw_index(rng, mdp.behavior.data() + s * mdp.n_actions, mdp.n_actions);
            const int grid = mdp.action_ids[static_cast<std::size_t>(a)];

            TimestepRecord rec;
            rec.bin_index = step;
            for (std::size_t j = 0; j < d; ++j) {
                const auto idx = static_cast<std::size_t>(s) * d + j;
                rec.features[features[j].name] = mdp.emission_mean[idx] + mdp.emission_scale[idx] * noise(rng);
            }
            rec.fluid_dose = dose_for_bin(fluid_bin_of(grid), mdp.fluid_edges, mdp.fluid_max, rng);
            rec.vaso_dose = dose_for_bin(vaso_bin_of(grid), mdp.vaso_edges, mdp.vaso_max, rng);
            rec.sofa = std::min(24, 2 + 3 * s + static_cast<int>(unit(rng) * 3.0));
            rec.sirs = std::min(4, s / 2 + static_cast<int>(unit(rng) * 2.0));
            rec.mech_vent = s * 2 >= mdp.n_states;
            p.timesteps.push_back(std::move(rec));
            states.push_back(s);
            actions.push_back(a);

            const int next = draw_index(rng, &mdp.transitions[static_cast<std::size_t>(
                                                  (s * mdp.n_actions + a) * mdp.successor_count())],
                                        mdp.successor_count());
            if (next >= mdp.n_states) {
                p.died = next == mdp.n_states + 1;
                break;
            }
            s = next;
        }
        out.cohort.push_back(std::move(p));
        out.latent_states.push_back(std::move(states));
        out.latent_actions.push_back(std::move(actions));
    }
    return out;
}

std::vector<double> exact_state_values_stochastic(const GroundTruthMdp& mdp, std::span<const double> policy) {
    const int n = mdp.n_states;
    if (policy.size() != static_cast<std::size_t>(n * mdp.n_actions)) {
        throw Error(ErrorCode::Validation, "policy has wrong size");
    }
    Eigen::MatrixXd a = Eigen::MatrixXd::Identity(n, n);
    Eigen::VectorXd r = Eigen::VectorXd::Zero(n);
    std::vector<std::vector<int>> reverse(static_cast<std::size_t>(n));
    std::vector<bool> reach(static_cast<std::size_t>(n), false);
    std::queue<int> frontier;
    for (int s = 0; s < n; ++s) {
        for (int act = 0; act < mdp.n_actions; ++act) {
            const double pa = policy[static_cast<std::size_t>(s * mdp.n_actions + act)];
            if (pa <= 0.0) continue;
            r(s) += pa * (mdp.t(s, act, n) * kSurviveReward + mdp.t(s, act, n + 1) * kDieReward);
            if (mdp.t(s, act, n) + mdp.t(s, act, n + 1) > 0.0 && !reach[static_cast<std::size_t>(s)]) {
                reach[static_cast<std::size_t>(s)] = true;
                frontier.push(s);
            }
            for (int next = 0; next < n; ++next) {
                const double p = mdp.t(s, act, next);
                if (p <= 0.0) continue;
                a(s, next) -= mdp.gamma * pa * p;
                reverse[static_cast<std::size_t>(next)].push_back(s);
            }
        }
    }
    if (mdp.gamma >= 1.0) {
        while (!frontier.empty()) {
            const int s = frontier.front();
            frontier.pop();
            for (int prev : reverse[static_cast<std::size_t>(s)]) {
                if (!reach[static_cast<std::size_t>(prev)]) {
                    reach[static_cast<std::size_t>(prev)] = true;
                    frontier.push(prev);
                }
            }
        }
        for (int s = 0; s < n; ++s) {
            if (!reach[static_cast<std::size_t>(s)]) {
                throw Error(ErrorCode::NonContractive,
                            fmt::format("non-contractive: gamma = 1 and state {} never reaches a terminal state", s));
            }
        }
    }
    const Eigen::VectorXd v = a.partialPivLu().solve(r);
    return {v.data(), v.data() + n};
}

double exact_policy_value_stochastic(const GroundTruthMdp& mdp, std::span<const double> policy) {
    const auto v = exact_state_values_stochastic(mdp, policy);
    double value = 0.0;
    for (int s = 0; s < mdp.n_states; ++s) value += mdp.initial[static_cast<std::size_t>(s)] * v[static_cast<std::size_t>(s)];
    return value;
}

double exact_policy_value(const GroundTruthMdp& mdp, std::span<const int> policy) {
    if (policy.size() != static_cast<std::size_t>(mdp.n_states)) {
        throw Error(ErrorCode::Validation, "policy must name one action per non-terminal state");
    }
    std::vector<double> dist(static_cast<std::size_t>(mdp.n_states * mdp.n_actions), 0.0);
    for (int s = 0; s < mdp.n_states; ++s) {
        const int a = policy[static_cast<std::size_t>(s)];
        if (a < 0 || a >= mdp.n_actions) {
            throw Error(ErrorCode::Validation, fmt::format("policy action {} for state {} out of range", a, s));
        }
        dist[static_cast<std::size_t>(s * mdp.n_actions + a)] = 1.0;
    }
    return exact_policy_value_stochastic(mdp, dist);
}

std::vector<double> behavior_as_policy(const GroundTruthMdp& mdp) { return mdp.behavior; }

ActionSpace reference_action_space(const GroundTruthMdp& mdp, const Cohort& cohort) {
    return fixed_action_space(mdp.fluid_edges, mdp.vaso_edges, cohort);
}

GroundTruthMdp make_separated_oracle(int n_states, double separation, double gamma) {
    GroundTruthMdp m;
    m.n_states = n_states;
    m.n_actions = 4;
    m.gamma = gamma;
    // none, fluids only, vasopressors only, both
    m.action_ids = {action_id(0, 0), action_id(2, 0), action_id(0, 2), action_id(3, 3)};

    // Means move along a diagonal, so neighbouring states sit `separation`
    // noise units apart in Euclidean distance.
    const std::array<double, 4> base{80.0, 90.0, 1.0, 420.0};
    const std::array<double, 4> noise{3.0, 3.0, 0.25, 12.0};
    const std::array<double, 4> direction{1.0, -1.0, 1.0, -1.0};
    const double per_axis = separation / 2.0;
    m.schema = FeatureSchema({{"hr", 60.0, 100.0, DisplayGroup::Vitals},
                              {"map", 65.0, 110.0, DisplayGroup::Vitals},
                              {"lactate", 0.5, 2.0, DisplayGroup::Labs},
                              {"pf_ratio", 300.0, 500.0, DisplayGroup::Ventilation}});
    for (int s = 0; s < n_states; ++s) {
        for (std::size_t j = 0; j < base.size(); ++j) {
            m.emission_mean.push_back(base[j] + direction[j] * per_axis * noise[j] * s);
            m.emission_scale.push_back(noise[j]);
        }
    }

    const int succ = n_states + 2;
    const double terminate = 0.4;
    m.transitions.assign(static_cast<std::size_t>(n_states * m.n_actions * succ), 0.0);
    m.behavior.assign(static_cast<std::size_t>(n_states * m.n_actions), 0.0);
    std::vector<int> best(static_cast<std::size_t>(n_states));
    std::vector<int> favourite(static_cast<std::size_t>(n_states));
    for (int s = 0; s < n_states; ++s) {
        const double severity = n_states > 1 ? static_cast<double>(s) / (n_states - 1) : 0.0;
        best[static_cast<std::size_t>(s)] = std::min(3, (s * 4) / n_states);
        // Clinicians favour the right action except in the middle of the range.
        favourite[static_cast<std::size_t>(s)] =
            (s == n_states / 2 || s == n_states / 2 - 1) ? (best[static_cast<std::size_t>(s)] + 1) % 4
                                                          : best[static_cast<std::size_t>(s)];
        for (int a = 0; a < m.n_actions; ++a) {
            const bool good = a == best[static_cast<std::size_t>(s)];
            const double survive_share = (good ? 0.95 : 0.7) - 0.45 * severity;
            auto cell = [&](int next) -> double& {
                return m.transitions[static_cast<std::size_t>((s * m.n_actions + a) * succ + next)];
            };
            cell(n_states) = terminate * survive_share;
            cell(n_states + 1) = terminate * (1.0 - survive_share);
            const int better = std::max(0, s - 1);
            const int worse = std::min(n_states - 1, s + 1);
            cell(good ? better : worse) += 0.4;
            cell(s) += 0.2;
        }
        const int fav = favourite[static_cast<std::size_t>(s)];
        const int opt = best[static_cast<std::size_t>(s)];
        for (int a = 0; a < m.n_actions; ++a) {
            double p = 0.0;
            if (fav == opt) {
                p = a == opt ? 0.6 : 0.4 / 3.0;
            } else {
                p = a == fav ? 0.45 : (a == opt ? 0.35 : 0.1);
            }
            m.behavior[static_cast<std::size_t>(s * m.n_actions + a)] = p;
        }
    }
    m.initial.assign(static_cast<std::size_t>(n_states), 0.0);
    double total = 0.0;
    for (int s = 0; s < n_states; ++s) total += n_states - s;
    for (int s = 0; s < n_states; ++s) m.initial[static_cast<std::size_t>(s)] = (n_states - s) / total;
    m.validate();
    return m;
}

void write_sampled_cohort(const SampledCohort& sampled, const GroundTruthMdp& mdp, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const fs::path root(dir);
    {
        std::ofstream out(root / "events.csv");
        write_events_csv(out, sampled.cohort, parse_timestamp("2150-01-01T00:00:00Z"));
    }
    {
        std::ofstream out(root / "demographics.csv");
        write_demographics_csv(out, sampled.cohort);
    }
    {
        std::ofstream out(root / "schema.json");
        // age and weight are clustering inputs even though they are not emitted as events
        auto features = mdp.schema.features();
        bool has_age = false;
        bool has_weight = false;
        for (const auto& f : features) {
            has_age |= f.name == "age";
            has_weight |= f.name == "weight";
        }
        if (!has_age) features.push_back({"age", 18.0, 90.0, DisplayGroup::Demographics});
        if (!has_weight) features.push_back({"weight", 40.0, 150.0, DisplayGroup::Demographics});
        out << FeatureSchema(features).to_json().dump(1) << '\n';
    }
    {
        std::ofstream out(root / "latent.jsonl");
        for (std::size_t i = 0; i < sampled.cohort.size(); ++i) {
            out << nlohmann::json{{"patient_id", sampled.cohort[i].patient_id},
                                  {"states", sampled.latent_states[i]},
                                  {"actions", sampled.latent_actions[i]}}
                       .dump()
                << '\n';
        }
    }
    {
        std::ofstream out(root / "reference_action_space.json");
        out << reference_action_space(mdp, sampled.cohort).to_json().dump(1) << '\n';
    }
    {
        std::ofstream out(root / "mdp.json");
        out << mdp.to_json().dump(1) << '\n';
    }
}

}  // namespace sepsis
