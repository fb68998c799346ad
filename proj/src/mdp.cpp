#include "sepsis/mdp.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <queue>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "sepsis/error.hpp"

namespace sepsis {

double percentile(std::vector<double> values, double p) {
    if (values.empty()) throw Error(ErrorCode::InsufficientData, "percentile of an empty sample");
    std::sort(values.begin(), values.end());
    const double h = static_cast<double>(values.size() - 1) * p;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

// ---------------------------------------------------------------- action space

namespace {

const std::array<double, 3>& edges_of(const ActionSpace& space, Channel channel) {
    return channel == Channel::Fluid ? space.fluid_edges : space.vaso_edges;
}

std::string_view channel_name(Channel channel) {
    return channel == Channel::Fluid ? "fluid" : "vaso";
}

void check_edges(const std::array<double, 3>& edges, Channel channel) {
    if (!(edges[0] > 0.0 && edges[0] < edges[1] && edges[1] < edges[2])) {
        throw Error(ErrorCode::DegenerateQuantiles,
                    fmt::format("degenerate quantiles for {} channel: edges ({}, {}, {}) not strictly ascending and > 0",
                                channel_name(channel), edges[0], edges[1], edges[2]));
    }
}

std::vector<double> nonzero_doses(const Cohort& cohort, Channel channel) {
    std::vector<double> out;
    for (const auto& p : cohort) {
        for (const auto& rec : p.timesteps) {
            const double dose = channel == Channel::Fluid ? rec.fluid_dose : rec.vaso_dose;
            if (dose > 0.0) out.push_back(dose);
        }
    }
    return out;
}

double top_representative(const std::vector<double>& doses, double last_edge) {
    std::vector<double> top;
    for (double d : doses) {
        if (d > last_edge) top.push_back(d);
    }
    return top.empty() ? last_edge : percentile(std::move(top), 0.9);
}

}  // namespace

void ActionSpace::validate() const {
    check_edges(fluid_edges, Channel::Fluid);
    check_edges(vaso_edges, Channel::Vaso);
}

int ActionSpace::bin(Channel channel, double dose) const {
    if (dose <= 0.0) return 0;
    const auto& e = edges_of(*this, channel);
    if (dose <= e[0]) return 1;
    if (dose <= e[1]) return 2;
    if (dose <= e[2]) return 3;
    return 4;
}

double ActionSpace::representative_dose(Channel channel, int b) const {
    const auto& e = edges_of(*this, channel);
    switch (b) {
        case 0: return 0.0;
        case 1: return 0.5 * e[0];
        case 2: return 0.5 * (e[0] + e[1]);
        case 3: return 0.5 * (e[1] + e[2]);
        default: return channel == Channel::Fluid ? fluid_top : vaso_top;
    }
}

nlohmann::json ActionSpace::to_json() const {
    return {{"fluid_edges", fluid_edges},
            {"vaso_edges", vaso_edges},
            {"fluid_top", fluid_top},
            {"vaso_top", vaso_top}};
}

ActionSpace ActionSpace::from_json(const nlohmann::json& doc) {
    ActionSpace s;
    try {
        s.fluid_edges = doc.at("fluid_edges").get<std::array<double, 3>>();
        s.vaso_edges = doc.at("vaso_edges").get<std::array<double, 3>>();
        s.fluid_top = doc.value("fluid_top", s.fluid_edges[2]);
        s.vaso_top = doc.value("vaso_top", s.vaso_edges[2]);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Validation, fmt::format("action space json: {}", e.what()));
    }
    s.validate();
    return s;
}

ActionSpace fit_action_space(const Cohort& cohort) {
    ActionSpace space;
    for (Channel channel : {Channel::Fluid, Channel::Vaso}) {
        auto doses = nonzero_doses(cohort, channel);
        if (doses.empty()) {
            throw Error(ErrorCode::InsufficientData,
                        fmt::format("{} channel has no nonzero doses", channel_name(channel)));
        }
        std::array<double, 3> edges{percentile(doses, 0.25), percentile(doses, 0.5),
                                    percentile(doses, 0.75)};
        check_edges(edges, channel);
        const double top = top_representative(doses, edges[2]);
        if (channel == Channel::Fluid) {
            space.fluid_edges = edges;
            space.fluid_top = top;
        } else {
            space.vaso_edges = edges;
            space.vaso_top = top;
        }
    }
    return space;
}

ActionSpace fixed_action_space(std::array<double, 3> fluid_edges, std::array<double, 3> vaso_edges,
                               const Cohort& cohort) {
    ActionSpace space;
    space.fluid_edges = fluid_edges;
    space.vaso_edges = vaso_edges;
    space.validate();
    space.fluid_top = top_representative(nonzero_doses(cohort, Channel::Fluid), fluid_edges[2]);
    space.vaso_top = top_representative(nonzero_doses(cohort, Channel::Vaso), vaso_edges[2]);
    return space;
}

int discretize_action(const ActionSpace& space, double fluid_dose, double vaso_dose) {
    return action_id(space.bin(Channel::Fluid, fluid_dose), space.bin(Channel::Vaso, vaso_dose));
}

std::string_view to_string(Delta delta) {
    switch (delta) {
        case Delta::Increase: return "increase";
        case Delta::Decrease: return "decrease";
        case Delta::NoChange: return "no_change";
    }
    return "no_change";
}

Delta delta_from_string(std::string_view text) {
    if (text == "increase") return Delta::Increase;
    if (text == "decrease") return Delta::Decrease;
    if (text == "no_change") return Delta::NoChange;
    throw Error(ErrorCode::Validation, fmt::format("unknown treatment delta '{}'", text));
}

Delta recommended_delta(const ActionSpace& space, Channel channel, double current_dose,
                        int recommended_bin) {
    if (recommended_bin < 0 || recommended_bin >= kDoseBins) {
        throw Error(ErrorCode::Validation, fmt::format("recommended bin {} outside [0,4]", recommended_bin));
    }
    const int current = space.bin(channel, current_dose);
    if (recommended_bin > current) return Delta::Increase;
    if (recommended_bin < current) return Delta::Decrease;
    return Delta::NoChange;
}

// ---------------------------------------------------------------- episodes

std::vector<Episode> to_episodes(const Cohort& cohort, const StateModel& states,
                                 const ActionSpace& space) {
    std::vector<Episode> out;
    out.reserve(cohort.size());
    for (const auto& p : cohort) {
        Episode e;
        e.patient_id = p.patient_id;
        e.died = p.died;
        for (const auto& rec : p.timesteps) {
            e.states.push_back(assign_state(states, p, rec));
            e.actions.push_back(discretize_action(space, rec.fluid_dose, rec.vaso_dose));
        }
        out.push_back(std::move(e));
    }
    return out;
}

// ---------------------------------------------------------------- estimation

double MdpModel::transition_probability(int s, int a, int next) const {
    const double n = visits(s, a);
    if (n <= 0.0) return 0.0;
    for (const auto& [succ, count] : successors(s, a)) {
        if (succ == next) return count / n;
    }
    return 0.0;
}

int MdpModel::behavior_mode(int s) const {
    int best = 0;
    for (int a = 1; a < kNumActions; ++a) {
        if (behavior(s, a) > behavior(s, best)) best = a;
    }
    return best;
}

MdpModel estimate_mdp(std::span<const Episode> episodes, int k, const ActionSpace& space,
                      double gamma, int min_count) {
    if (episodes.empty()) throw Error(ErrorCode::EmptyCohort, "estimate_mdp: empty cohort");
    if (!(gamma > 0.0 && gamma <= 1.0)) throw Error(ErrorCode::Validation, "gamma must lie in (0, 1]");

    MdpModel m;
    m.k = k;
    m.gamma = gamma;
    m.min_count = min_count;
    m.space = space;
    m.visits = RowMatrix(static_cast<std::size_t>(k), kNumActions);
    m.behavior = RowMatrix(static_cast<std::size_t>(k), kNumActions);
    m.q = RowMatrix(static_cast<std::size_t>(k), kNumActions, std::numeric_limits<double>::quiet_NaN());

    std::vector<std::map<int, double>> counts(static_cast<std::size_t>(k) * kNumActions);
    for (const auto& e : episodes) {
        if (e.states.empty() || e.states.size() != e.actions.size()) {
            throw Error(ErrorCode::Validation, fmt::format("episode '{}' is malformed", e.patient_id));
        }
        for (std::size_t t = 0; t < e.states.size(); ++t) {
            const int s = e.states[t];
            const int a = e.actions[t];
            if (s < 0 || s >= k || a < 0 || a >= kNumActions) {
                throw Error(ErrorCode::Validation,
                            fmt::format("episode '{}' step {}: state/action out of range", e.patient_id, t));
            }
            const int next = t + 1 < e.states.size() ? e.states[t + 1] : (e.died ? k + 1 : k);
            counts[static_cast<std::size_t>(s * kNumActions + a)][next] += 1.0;
            m.visits(s, a) += 1.0;
        }
    }

    m.transitions.resize(counts.size());
    for (std::size_t i = 0; i < counts.size(); ++i) {
        m.transitions[i].assign(counts[i].begin(), counts[i].end());
    }
    for (int s = 0; s < k; ++s) {
        double total = 0.0;
        for (int a = 0; a < kNumActions; ++a) total += m.visits(s, a);
        if (total == 0.0) continue;
        for (int a = 0; a < kNumActions; ++a) m.behavior(s, a) = m.visits(s, a) / total;
    }
    return m;
}

MdpModel estimate_mdp(const Cohort& cohort, const StateModel& states, const ActionSpace& space,
                      double gamma, int min_count) {
    if (cohort.empty()) throw Error(ErrorCode::EmptyCohort, "estimate_mdp: empty cohort");
    const auto episodes = to_episodes(cohort, states, space);
    return estimate_mdp(episodes, states.k, space, gamma, min_count);
}

// ---------------------------------------------------------------- solving

namespace {

// States from which a terminal is reachable along edges allowed by `use`.
template <typename UseAction>
std::vector<bool> reaches_terminal(const MdpModel& m, UseAction use) {
    const int k = m.k;
    std::vector<std::vector<int>> reverse(static_cast<std::size_t>(k));
    std::vector<bool> reach(static_cast<std::size_t>(k), false);
    std::queue<int> frontier;
    for (int s = 0; s < k; ++s) {
        for (int a = 0; a < kNumActions; ++a) {
            if (!use(s, a) || m.visits(s, a) <= 0.0) continue;
            for (const auto& [next, count] : m.successors(s, a)) {
                if (next >= k) {
                    if (!reach[static_cast<std::size_t>(s)]) {
                        reach[static_cast<std::size_t>(s)] = true;
                        frontier.push(s);
                    }
                } else {
                    reverse[static_cast<std::size_t>(next)].push_back(s);
                }
            }
        }
    }
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
    return reach;
}

constexpr double kTieTolerance = 1e-9;

}  // namespace

std::vector<double> evaluate_policy(const MdpModel& m, std::span<const int> policy) {
    const int k = m.k;
    if (static_cast<int>(policy.size()) != k) {
        throw Error(ErrorCode::Validation, "evaluate_policy: policy size does not match state count");
    }
    std::vector<bool> proper(static_cast<std::size_t>(k), true);
    if (m.gamma >= 1.0) {
        proper = reaches_terminal(m, [&](int s, int a) { return policy[static_cast<std::size_t>(s)] == a; });
    }

    Eigen::MatrixXd a = Eigen::MatrixXd::Identity(k, k);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(k);
    for (int s = 0; s < k; ++s) {
        const int act = policy[static_cast<std::size_t>(s)];
        const double n = m.visits(s, act);
        if (n <= 0.0 || !proper[static_cast<std::size_t>(s)]) continue;
        for (const auto& [next, count] : m.successors(s, act)) {
            const double p = count / n;
            if (next == m.survive_index()) {
                b(s) += p * kSurviveReward;
            } else if (next == m.die_index()) {
                b(s) += p * kDieReward;
            } else if (proper[static_cast<std::size_t>(next)]) {
                a(s, next) -= m.gamma * p;
            }
        }
    }
    const Eigen::VectorXd v = a.partialPivLu().solve(b);
    return {v.data(), v.data() + k};
}

RowMatrix q_values(const MdpModel& m, std::span<const double> values) {
    RowMatrix q(static_cast<std::size_t>(m.k), kNumActions, std::numeric_limits<double>::quiet_NaN());
    for (int s = 0; s < m.k; ++s) {
        for (int a = 0; a < kNumActions; ++a) {
            if (!m.estimated(s, a)) continue;
            const double n = m.visits(s, a);
            double total = 0.0;
            for (const auto& [next, count] : m.successors(s, a)) {
                const double p = count / n;
                if (next == m.survive_index()) {
                    total += p * kSurviveReward;
                } else if (next == m.die_index()) {
                    total += p * kDieReward;
                } else {
                    total += p * m.gamma * values[static_cast<std::size_t>(next)];
                }
            }
            q(s, a) = total;
        }
    }
    return q;
}

MdpModel policy_iteration(MdpModel m, PolicyIterationTrace* trace) {
    const int k = m.k;
    if (!(m.gamma > 0.0 && m.gamma <= 1.0)) throw Error(ErrorCode::Validation, "gamma must lie in (0, 1]");
    if (m.gamma >= 1.0) {
        const auto reach = reaches_terminal(m, [](int, int) { return true; });
        for (int s = 0; s < k; ++s) {
            double total = 0.0;
            for (int a = 0; a < kNumActions; ++a) total += m.visits(s, a);
            if (total > 0.0 && !reach[static_cast<std::size_t>(s)]) {
                throw Error(ErrorCode::NonContractive,
                            fmt::format("non-contractive: gamma = 1 and state {} cannot reach a terminal state", s));
            }
        }
    }

    std::vector<int> policy(static_cast<std::size_t>(k));
    std::vector<bool> covered(static_cast<std::size_t>(k), false);
    m.uncovered_states.clear();
    for (int s = 0; s < k; ++s) {
        int best = -1;
        for (int a = 0; a < kNumActions; ++a) {
            if (m.estimated(s, a) && (best < 0 || m.behavior(s, a) > m.behavior(s, best))) best = a;
        }
        covered[static_cast<std::size_t>(s)] = best >= 0;
        if (best < 0) {
            m.uncovered_states.push_back(s);
            best = m.behavior_mode(s);
        }
        policy[static_cast<std::size_t>(s)] = best;
    }

    constexpr int kMaxIterations = 1000;
    RowMatrix q;
    for (int iter = 0;; ++iter) {
        if (iter == kMaxIterations) {
            throw Error(ErrorCode::NonConvergence, "policy iteration did not stabilize");
        }
        const auto values = evaluate_policy(m, policy);
        q = q_values(m, values);
        if (trace) trace->values.push_back(values);

        int changed = 0;
        for (int s = 0; s < k; ++s) {
            if (!covered[static_cast<std::size_t>(s)]) continue;
            int best = -1;
            for (int a = 0; a < kNumActions; ++a) {
                if (m.estimated(s, a) && (best < 0 || q(s, a) > q(s, best))) best = a;
            }
            int& current = policy[static_cast<std::size_t>(s)];
            if (!m.estimated(s, current) || q(s, best) > q(s, current) + kTieTolerance) {
                current = best;
                ++changed;
            }
        }
        if (trace) trace->changed.push_back(changed);
        if (changed == 0) break;
    }

    // Among near-equal maxima pick the lowest action id.
    for (int s = 0; s < k; ++s) {
        if (!covered[static_cast<std::size_t>(s)]) continue;
        double best = -std::numeric_limits<double>::infinity();
        for (int a = 0; a < kNumActions; ++a) {
            if (m.estimated(s, a)) best = std::max(best, q(s, a));
        }
        for (int a = 0; a < kNumActions; ++a) {
            if (m.estimated(s, a) && q(s, a) >= best - kTieTolerance) {
                policy[static_cast<std::size_t>(s)] = a;
                break;
            }
        }
    }

    m.q = std::move(q);
    m.policy = std::move(policy);
    m.solved = true;
    return m;
}

// ---------------------------------------------------------------- persistence

void write_f64_blob(const std::string& path, std::span<const double> values) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::Io, fmt::format("cannot write '{}'", path));
    for (double v : values) {
        auto bits = std::bit_cast<std::uint64_t>(v);
        if constexpr (std::endian::native == std::endian::big) {
            bits = __builtin_bswap64(bits);
        }
        char bytes[8];
        std::memcpy(bytes, &bits, 8);
        out.write(bytes, 8);
    }
    if (!out) throw Error(ErrorCode::Io, fmt::format("short write to '{}'", path));
}

std::vector<double> read_f64_blob(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::Io, fmt::format("cannot read '{}'", path));
    std::vector<double> out;
    char bytes[8];
    while (in.read(bytes, 8)) {
        std::uint64_t bits = 0;
        std::memcpy(&bits, bytes, 8);
        if constexpr (std::endian::native == std::endian::big) {
            bits = __builtin_bswap64(bits);
        }
        out.push_back(std::bit_cast<double>(bits));
    }
    if (in.gcount() != 0) throw Error(ErrorCode::Io, fmt::format("'{}' is not a whole number of float64", path));
    return out;
}

void save_mdp(const MdpModel& m, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json transitions = nlohmann::json::array();
    for (int s = 0; s < m.k; ++s) {
        for (int a = 0; a < kNumActions; ++a) {
            for (const auto& [next, count] : m.successors(s, a)) {
                transitions.push_back({s, a, next, count});
            }
        }
    }
    const nlohmann::json blob_shape = {m.k, kNumActions};
    nlohmann::json doc{{"schema_version", kSchemaVersion},
                       {"k", m.k},
                       {"n_actions", kNumActions},
                       {"gamma", m.gamma},
                       {"min_count", m.min_count},
                       {"rewards", {{"survive", kSurviveReward}, {"die", kDieReward}}},
                       {"action_space", m.space.to_json()},
                       {"policy", m.policy},
                       {"uncovered_states", m.uncovered_states},
                       {"solved", m.solved},
                       {"transitions", std::move(transitions)},
                       {"blobs",
                        {{"layout", "little-endian float64, row-major"},
                         {"q", {{"file", "q.bin"}, {"shape", blob_shape}}},
                         {"behavior", {{"file", "behavior.bin"}, {"shape", blob_shape}}},
                         {"visits", {{"file", "visits.bin"}, {"shape", blob_shape}}}}}};
    std::ofstream out(fs::path(dir) / "mdp.json");
    out << doc.dump(1) << '\n';
    write_f64_blob((fs::path(dir) / "q.bin").string(), m.q.data());
    write_f64_blob((fs::path(dir) / "behavior.bin").string(), m.behavior.data());
    write_f64_blob((fs::path(dir) / "visits.bin").string(), m.visits.data());
}

MdpModel load_mdp(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream in(fs::path(dir) / "mdp.json");
    if (!in) throw Error(ErrorCode::Io, fmt::format("cannot open '{}/mdp.json'", dir));
    MdpModel m;
    try {
        const auto doc = nlohmann::json::parse(in);
        if (doc.at("schema_version").get<int>() != kSchemaVersion) {
            throw Error(ErrorCode::Validation, "mdp: unsupported schema_version");
        }
        m.k = doc.at("k").get<int>();
        m.gamma = doc.at("gamma").get<double>();
        m.min_count = doc.at("min_count").get<int>();
        m.space = ActionSpace::from_json(doc.at("action_space"));
        m.policy = doc.at("policy").get<std::vector<int>>();
        m.uncovered_states = doc.at("uncovered_states").get<std::vector<int>>();
        m.solved = doc.at("solved").get<bool>();
        m.transitions.assign(static_cast<std::size_t>(m.k) * kNumActions, {});
        for (const auto& t : doc.at("transitions")) {
            const int s = t.at(0).get<int>();
            const int a = t.at(1).get<int>();
            m.transitions.at(static_cast<std::size_t>(s * kNumActions + a))
                .emplace_back(t.at(2).get<int>(), t.at(3).get<double>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Validation, fmt::format("mdp json: {}", e.what()));
    }
    const std::size_t cells = static_cast<std::size_t>(m.k) * kNumActions;
    auto load = [&](const char* name) {
        RowMatrix mat(static_cast<std::size_t>(m.k), kNumActions);
        auto values = read_f64_blob((fs::path(dir) / name).string());
        if (values.size() != cells) throw Error(ErrorCode::Validation, fmt::format("{} has wrong size", name));
        mat.data() = std::move(values);
        return mat;
    };
    m.q = load("q.bin");
    m.behavior = load("behavior.bin");
    m.visits = load("visits.bin");
    return m;
}

}  // namespace sepsis
