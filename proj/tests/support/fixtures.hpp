#pragma once

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "sepsis/bundle.hpp"
#include "sepsis/mdp.hpp"
#include "sepsis/simgen.hpp"

#ifndef SEPSIS_TEST_DATA
#error "SEPSIS_TEST_DATA must point at tests/data"
#endif

namespace fixtures {

inline std::filesystem::path data_path(const std::string& rel) {
    return std::filesystem::path(SEPSIS_TEST_DATA) / rel;
}

inline nlohmann::json read_json(const std::string& rel) {
    std::ifstream in(data_path(rel));
    return nlohmann::json::parse(in);
}

// Scratch directory removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "sepsis") {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                (tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::string str(const std::string& rel = "") const { return rel.empty() ? path_.string() : (path_ / rel).string(); }

private:
    std::filesystem::path path_;
};

struct Count {
    int s;
    int a;
    int next;
    double count;
};

// MdpModel with counts filled in and nothing solved.
inline sepsis::MdpModel model_from_counts(int k, double gamma, int min_count, const std::vector<Count>& counts) {
    sepsis::MdpModel m;
    m.k = k;
    m.gamma = gamma;
    m.min_count = min_count;
    m.transitions.assign(static_cast<std::size_t>(k * sepsis::kNumActions), {});
    m.visits = sepsis::RowMatrix(static_cast<std::size_t>(k), sepsis::kNumActions);
    m.behavior = sepsis::RowMatrix(static_cast<std::size_t>(k), sepsis::kNumActions);
    for (const auto& c : counts) {
        auto& succ = m.transitions[static_cast<std::size_t>(c.s * sepsis::kNumActions + c.a)];
        bool merged = false;
        for (auto& [next, n] : succ) {
            if (next == c.next) {
                n += c.count;
                merged = true;
            }
        }
        if (!merged) succ.emplace_back(c.next, c.count);
        m.visits(c.s, c.a) += c.count;
    }
    for (auto& succ : m.transitions) std::sort(succ.begin(), succ.end());
    for (int s = 0; s < k; ++s) {
        double total = 0.0;
        for (int a = 0; a < sepsis::kNumActions; ++a) total += m.visits(s, a);
        for (int a = 0; a < sepsis::kNumActions; ++a) {
            if (total > 0.0) m.behavior(s, a) = m.visits(s, a) / total;
        }
    }
    return m;
}

// Random count-based MDP over actions 0..n_actions-1, every (s, a) visited and
// able to terminate.
struct RandomMdp {
    int k = 0;
    int n_actions = 0;
    double gamma = 0.9;
    std::vector<Count> counts;
};

inline RandomMdp random_mdp(std::mt19937_64& rng) {
    std::uniform_int_distribution<int> states(2, 8);
    std::uniform_int_distribution<int> actions(2, 4);
    std::uniform_int_distribution<int> count(0, 12);
    std::uniform_real_distribution<double> gamma(0.5, 0.99);
    RandomMdp r;
    r.k = states(rng);
    r.n_actions = actions(rng);
    r.gamma = gamma(rng);
    for (int s = 0; s < r.k; ++s) {
        for (int a = 0; a < r.n_actions; ++a) {
            for (int next = 0; next < r.k + 2; ++next) {
                int c = count(rng);
                if (next >= r.k && c == 0) c = 1;
                if (c > 0) r.counts.push_back({s, a, next, static_cast<double>(c)});
            }
        }
    }
    return r;
}

// Optimal values by evaluating every deterministic policy with a dense linear
// solve; the optimum dominates every other policy state by state.
struct EnumerationResult {
    std::vector<double> values;
    Eigen::MatrixXd q;  // k x n_actions
    std::vector<int> policy;
};

inline EnumerationResult enumerate_policies(const RandomMdp& r) {
    const int k = r.k;
    const int na = r.n_actions;
    std::vector<Eigen::MatrixXd> p(static_cast<std::size_t>(na), Eigen::MatrixXd::Zero(k, k));
    Eigen::MatrixXd reward = Eigen::MatrixXd::Zero(k, na);
    Eigen::MatrixXd totals = Eigen::MatrixXd::Zero(k, na);
    for (const auto& c : r.counts) totals(c.s, c.a) += c.count;
    for (const auto& c : r.counts) {
        const double prob = c.count / totals(c.s, c.a);
        if (c.next < k) {
            p[static_cast<std::size_t>(c.a)](c.s, c.next) += prob;
        } else {
            reward(c.s, c.a) += prob * (c.next == k ? 100.0 : -100.0);
        }
    }

    Eigen::VectorXd best = Eigen::VectorXd::Constant(k, -1e300);
    std::vector<int> policy(static_cast<std::size_t>(k), 0);
    while (true) {
        Eigen::MatrixXd a = Eigen::MatrixXd::Identity(k, k);
        Eigen::VectorXd b(k);
        for (int s = 0; s < k; ++s) {
            const int act = policy[static_cast<std::size_t>(s)];
            a.row(s) -= r.gamma * p[static_cast<std::size_t>(act)].row(s);
            b(s) = reward(s, act);
        }
        const Eigen::VectorXd v = a.fullPivLu().solve(b);
        best = best.cwiseMax(v);
        int pos = 0;
        while (pos < k && ++policy[static_cast<std::size_t>(pos)] == na) policy[static_cast<std::size_t>(pos++)] = 0;
        if (pos == k) break;
    }

    EnumerationResult out;
    out.values.assign(best.data(), best.data() + k);
    out.q = Eigen::MatrixXd(k, na);
    for (int s = 0; s < k; ++s) {
        for (int act = 0; act < na; ++act) {
            out.q(s, act) = reward(s, act) + r.gamma * p[static_cast<std::size_t>(act)].row(s).dot(best);
        }
    }
    for (int s = 0; s < k; ++s) {
        const double top = out.q.row(s).maxCoeff();
        int choice = 0;
        while (out.q(s, choice) < top - 1e-9) ++choice;
        out.policy.push_back(choice);
    }
    return out;
}

// Cohort sampled from the separated oracle plus everything needed to load it
// back through the ingestion path.
struct SimCohort {
    sepsis::GroundTruthMdp mdp;
    sepsis::SampledCohort sampled;
    sepsis::LoadedCohort loaded;
};

inline SimCohort separated_cohort(int n, std::uint64_t seed, int n_states = 6, double separation = 8.0) {
    SimCohort out;
    out.mdp = sepsis::make_separated_oracle(n_states, separation);
    out.sampled = sepsis::sample_cohort(out.mdp, n, seed, 40);
    out.loaded.cohort = out.sampled.cohort;
    out.loaded.schema = out.mdp.schema;
    return out;
}

inline sepsis::TrainConfig small_config(const sepsis::GroundTruthMdp& mdp, int k = 6, int n_boot = 50) {
    sepsis::TrainConfig c;
    c.k = k;
    c.gamma = 0.99;
    c.n_restarts = 3;
    c.n_boot = n_boot;
    c.action_space_mode = "fixed";
    c.fluid_edges = mdp.fluid_edges;
    c.vaso_edges = mdp.vaso_edges;
    return c;
}

}  // namespace fixtures
