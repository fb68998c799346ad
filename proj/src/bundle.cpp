#include "sepsis/bundle.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include <fmt/format.h>
#include <unistd.h>

#include "sepsis/error.hpp"
#include "sepsis/study.hpp"

namespace sepsis {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- config

void TrainConfig::validate() const {
    auto fail = [](std::string_view field, std::string_view why) {
        throw Error(ErrorCode::Validation, fmt::format("config.{}: {}", field, why));
    };
    if (k < 2) fail("k", "must be >= 2");
    if (!(gamma > 0.0 && gamma <= 1.0)) fail("gamma", "must lie in (0, 1]");
    if (min_count < 0) fail("min_count", "must be >= 0");
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) fail("test_fraction", "must lie in (0, 1)");
    if (n_restarts < 1) fail("n_restarts", "must be >= 1");
    if (max_iterations < 1) fail("max_iterations", "must be >= 1");
    if (n_boot < 1) fail("n_boot", "must be >= 1");
    if (!(epsilon >= 0.0 && epsilon < 1.0)) fail("epsilon", "must lie in [0, 1)");
    if (!(behavior_alpha > 0.0)) fail("behavior_alpha", "must be > 0");
    if (action_space_mode != "quantile" && action_space_mode != "fixed") {
        fail("action_space.mode", "expected 'quantile' or 'fixed'");
    }
    if (action_space_mode == "fixed" && (!fluid_edges || !vaso_edges)) {
        fail("action_space", "fixed mode needs fluid_edges and vaso_edges");
    }
}

nlohmann::json TrainConfig::to_json() const {
    nlohmann::json space = {{"mode", action_space_mode}};
    if (fluid_edges) space["fluid_edges"] = *fluid_edges;
    if (vaso_edges) space["vaso_edges"] = *vaso_edges;
    return {{"schema_version", kSchemaVersion},
            {"k", k},
            {"gamma", gamma},
            {"min_count", min_count},
            {"test_fraction", test_fraction},
            {"seeds", {{"split", split_seed}, {"states", state_seed}, {"bootstrap", bootstrap_seed}}},
            {"n_restarts", n_restarts},
            {"max_iterations", max_iterations},
            {"n_boot", n_boot},
            {"epsilon", epsilon},
            {"behavior_alpha", behavior_alpha},
            {"action_space", std::move(space)},
            {"features", features}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& doc) {
    static const std::set<std::string> known = {
        "schema_version", "k", "gamma", "min_count", "test_fraction", "seeds", "n_restarts",
        "max_iterations", "n_boot", "epsilon", "behavior_alpha", "action_space", "features"};
    if (!doc.is_object()) throw Error(ErrorCode::Validation, "config must be a JSON object");
    for (const auto& [key, value] : doc.items()) {
        if (!known.count(key)) throw Error(ErrorCode::Validation, fmt::format("config: unknown field '{}'", key));
    }
    TrainConfig c;
    try {
        c.k = doc.value("k", c.k);
        c.gamma = doc.value("gamma", c.gamma);
        c.min_count = doc.value("min_count", c.min_count);
        c.test_fraction = doc.value("test_fraction", c.test_fraction);
        if (doc.contains("seeds")) {
            const auto& s = doc.at("seeds");
            c.split_seed = s.value("split", c.split_seed);
            c.state_seed = s.value("states", c.state_seed);
            c.bootstrap_seed = s.value("bootstrap", c.bootstrap_seed);
        }
        c.n_restarts = doc.value("n_restarts", c.n_restarts);
        c.max_iterations = doc.value("max_iterations", c.max_iterations);
        c.n_boot = doc.value("n_boot", c.n_boot);
        c.epsilon = doc.value("epsilon", c.epsilon);
        c.behavior_alpha = doc.value("behavior_alpha", c.behavior_alpha);
        if (doc.contains("action_space")) {
            const auto& a = doc.at("action_space");
            c.action_space_mode = a.value("mode", c.action_space_mode);
            if (a.contains("fluid_edges")) c.fluid_edges = a.at("fluid_edges").get<std::array<double, 3>>();
            if (a.contains("vaso_edges")) c.vaso_edges = a.at("vaso_edges").get<std::array<double, 3>>();
        }
        if (doc.contains("features")) c.features = doc.at("features").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Validation, fmt::format("config: {}", e.what()));
    }
    c.validate();
    return c;
}

std::uint64_t TrainConfig::hash() const {
    const std::string text = to_json().dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

TrainConfig read_train_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::Io, fmt::format("cannot open config '{}'", path));
    try {
        return TrainConfig::from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(ErrorCode::Validation, fmt::format("config '{}': {}", path, e.what()));
    }
}

std::string hex64(std::uint64_t value) { return fmt::format("{:016x}", value); }

nlohmann::json Provenance::to_json() const {
    return {{"config_hash", config_hash},
            {"trained_at", trained_at},
            {"cohort_source", cohort_source},
            {"n_train_patients", n_train_patients},
            {"n_test_patients", n_test_patients},
            {"test_patients", test_patients}};
}

Provenance Provenance::from_json(const nlohmann::json& doc) {
    Provenance p;
    p.config_hash = doc.at("config_hash").get<std::string>();
    p.trained_at = doc.value("trained_at", "");
    p.cohort_source = doc.value("cohort_source", "");
    p.n_train_patients = doc.value("n_train_patients", std::size_t{0});
    p.n_test_patients = doc.value("n_test_patients", std::size_t{0});
    p.test_patients = doc.value("test_patients", std::vector<std::string>{});
    return p;
}

// ---------------------------------------------------------------- persistence

namespace {

void write_json(const fs::path& path, const nlohmann::json& doc) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::Io, fmt::format("cannot write '{}'", path.string()));
    out << doc.dump(1) << '\n';
    if (!out) throw Error(ErrorCode::Io, fmt::format("write to '{}' failed", path.string()));
}

nlohmann::json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::Io, fmt::format("cannot open '{}'", path.string()));
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(ErrorCode::Validation, fmt::format("'{}': {}", path.string(), e.what()));
    }
}

fs::path staging_path(const fs::path& dir, const char* tag) {
    return dir.parent_path() / fmt::format(".{}.{}-{}", dir.filename().string(), tag, ::getpid());
}

// Replaces `target` with the fully written `staged` directory.
void publish(const fs::path& staged, const fs::path& target) {
    if (fs::exists(target)) {
        const auto old = staging_path(target, "old");
        fs::remove_all(old);
        fs::rename(target, old);
        fs::rename(staged, target);
        fs::remove_all(old);
    } else {
        fs::rename(staged, target);
    }
}

void write_bundle_files(const ModelBundle& b, const fs::path& dir) {
    fs::create_directories(dir);
    const std::string hash = hex64(b.config.hash());
    write_json(dir / "bundle.json", {{"schema_version", kSchemaVersion},
                                     {"config_hash", hash},
                                     {"config", b.config.to_json()},
                                     {"provenance", b.provenance.to_json()},
                                     {"schema", b.schema.to_json()},
                                     {"components",
                                      {{"states", {{"file", "states.json"}}},
                                       {"mdp", {{"dir", "mdp"}}}}}});
    write_json(dir / "states.json", {{"schema_version", kSchemaVersion}, {"config_hash", hash}, {"model", b.states.to_json()}});
    save_mdp(b.mdp, (dir / "mdp").string());
    write_json(dir / "mdp" / "stamp.json", {{"schema_version", kSchemaVersion}, {"config_hash", hash}});
}

}  // namespace

void save_bundle(const ModelBundle& bundle, const std::string& dir) {
    const fs::path target = fs::absolute(dir);
    fs::create_directories(target.parent_path());
    const auto staged = staging_path(target, "tmp");
    fs::remove_all(staged);
    try {
        write_bundle_files(bundle, staged);
        publish(staged, target);
    } catch (...) {
        std::error_code ec;
        fs::remove_all(staged, ec);
        throw;
    }
}

ModelBundle load_bundle(const std::string& dir) {
    const fs::path root(dir);
    const auto doc = read_json(root / "bundle.json");
    ModelBundle b;
    try {
        if (doc.at("schema_version").get<int>() != kSchemaVersion) {
            throw Error(ErrorCode::Validation, "bundle: unsupported schema_version");
        }
        b.config = TrainConfig::from_json(doc.at("config"));
        b.provenance = Provenance::from_json(doc.at("provenance"));
        b.schema = FeatureSchema::from_json(doc.at("schema"));
        const std::string hash = doc.at("config_hash").get<std::string>();
        if (hash != hex64(b.config.hash())) {
            throw Error(ErrorCode::Validation, "bundle: config_hash does not match the stored config");
        }
        const auto states = read_json(root / "states.json");
        if (states.at("config_hash").get<std::string>() != hash) {
            throw Error(ErrorCode::Validation, "bundle: states.json was trained under a different config");
        }
        b.states = StateModel::from_json(states.at("model"));
        const auto stamp = read_json(root / "mdp" / "stamp.json");
        if (stamp.at("config_hash").get<std::string>() != hash) {
            throw Error(ErrorCode::Validation, "bundle: mdp/ was trained under a different config");
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Validation, fmt::format("bundle '{}': {}", dir, e.what()));
    }
    b.mdp = load_mdp((root / "mdp").string());
    if (b.mdp.k != b.states.k) {
        throw Error(ErrorCode::Validation, "bundle: state model and MDP disagree on k");
    }
    return b;
}

// ---------------------------------------------------------------- pipeline

std::pair<Cohort, Cohort> split_patients(const Cohort& cohort, double test_fraction, std::uint64_t seed) {
    std::vector<std::size_t> order(cohort.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(cohort.size())));
    if (cohort.size() >= 2) n_test = std::clamp<std::size_t>(n_test, 1, cohort.size() - 1);
    std::vector<bool> is_test(cohort.size(), false);
    for (std::size_t i = 0; i < n_test && i < order.size(); ++i) is_test[order[i]] = true;
    Cohort train;
    Cohort test;
    for (std::size_t i = 0; i < cohort.size(); ++i) (is_test[i] ? test : train).push_back(cohort[i]);
    return {std::move(train), std::move(test)};
}

nlohmann::json evaluate_bundle(const ModelBundle& bundle, const Cohort& cohort, const EvaluationOptions& options) {
    const auto episodes = to_episodes(cohort, bundle.states, bundle.mdp.space);
    const auto behavior = smoothed_behavior(bundle.mdp, options.behavior_alpha);
    const auto target = soften_policy(bundle.mdp.policy, options.epsilon);
    WisOptions wis;
    wis.gamma = bundle.mdp.gamma;

    auto optimal = wis_bootstrap(target, behavior, episodes, wis, options.n_boot, options.seed);
    auto clinicians = wis_bootstrap(behavior, behavior, episodes, wis, options.n_boot, options.seed);

    std::size_t steps = 0;
    for (const auto& e : episodes) steps += e.length();
    auto optimal_doc = optimal.to_json();
    optimal_doc["config"]["epsilon"] = options.epsilon;
    optimal_doc["config"]["behavior_alpha"] = options.behavior_alpha;
    optimal_doc["config"]["seed"] = options.seed;
    auto clinician_doc = clinicians.to_json();
    clinician_doc["config"]["behavior_alpha"] = options.behavior_alpha;
    clinician_doc["config"]["seed"] = options.seed;
    return {{"schema_version", kSchemaVersion},
            {"n_trajectories", episodes.size()},
            {"n_timesteps", steps},
            {"policy", std::move(optimal_doc)},
            {"behavior", std::move(clinician_doc)},
            {"uncovered_states", bundle.mdp.uncovered_states.size()}};
}

namespace {

template <class F>
auto run_stage(std::string_view stage, const StageObserver& observer, F&& f) {
    if (observer) observer(stage);
    try {
        return f();
    } catch (const Error& e) {
        throw Error(e.code(), fmt::format("stage '{}' failed: {}: {}", stage, to_string(e.code()), e.what()));
    }
}

}  // namespace

TrainResult train_pipeline(const LoadedCohort& input, const TrainConfig& config,
                           const std::string& cohort_source, const StageObserver& observer) {
    config.validate();
    run_stage("validate", observer, [&] {
        const auto summary = validate_cohort(input.cohort);
        if (!summary.ok()) {
            const auto& v = summary.violations.front();
            throw Error(ErrorCode::Validation,
                        fmt::format("{} violation(s); first: patient '{}': {}", summary.violations.size(),
                                    v.patient_id, v.rule));
        }
        return 0;
    });
    auto [train, test] = run_stage("split", observer, [&] {
        if (input.cohort.size() < 2) {
            throw Error(ErrorCode::InsufficientData, "need at least two patients to split");
        }
        return split_patients(input.cohort, config.test_fraction, config.split_seed);
    });

    std::vector<std::string> features = config.features;
    if (features.empty()) features = input.schema.clustering_features();

    ModelBundle b;
    b.schema = input.schema;
    b.config = config;
    b.states = run_stage("fit_states", observer, [&] {
        KMeansOptions km;
        km.k = config.k;
        km.seed = config.state_seed;
        km.n_restarts = config.n_restarts;
        km.max_iterations = config.max_iterations;
        return fit_states(train, features, km);
    });
    const auto space = run_stage("fit_action_space", observer, [&] {
        if (config.action_space_mode == "fixed") {
            return fixed_action_space(*config.fluid_edges, *config.vaso_edges, train);
        }
        return fit_action_space(train);
    });
    auto mdp = run_stage("estimate_mdp", observer, [&] {
        return estimate_mdp(train, b.states, space, config.gamma, config.min_count);
    });
    b.mdp = run_stage("policy_iteration", observer, [&] { return policy_iteration(std::move(mdp)); });

    b.provenance.config_hash = hex64(config.hash());
    b.provenance.trained_at = now_timestamp();
    b.provenance.cohort_source = cohort_source;
    b.provenance.n_train_patients = train.size();
    b.provenance.n_test_patients = test.size();
    for (const auto& p : test) b.provenance.test_patients.push_back(p.patient_id);

    EvaluationOptions eval;
    eval.n_boot = config.n_boot;
    eval.seed = config.bootstrap_seed;
    eval.epsilon = config.epsilon;
    eval.behavior_alpha = config.behavior_alpha;
    auto report = run_stage("wis_bootstrap", observer, [&] { return evaluate_bundle(b, test, eval); });
    report["split"] = "held-out patients";
    report["config_hash"] = b.provenance.config_hash;
    report["states"] = {{"k", b.states.k}, {"wcss", b.states.wcss}, {"features", b.states.feature_order},
                        {"dropped_features", b.states.dropped_features}};
    report["mdp"] = {{"gamma", b.mdp.gamma}, {"min_count", b.mdp.min_count},
                     {"action_space", b.mdp.space.to_json()}};
    return {std::move(b), std::move(report)};
}

TrainResult train_to_disk(const std::string& cohort_path, const std::string& config_path,
                          const std::string& out_dir, const StageObserver& observer) {
    const auto config = run_stage("config", observer, [&] { return read_train_config(config_path); });
    const auto input = run_stage("ingest", observer, [&] { return load_cohort(cohort_path); });
    auto result = train_pipeline(input, config, cohort_path, observer);

    run_stage("write", observer, [&] {
        const fs::path target = fs::absolute(out_dir);
        fs::create_directories(target.parent_path());
        const auto staged = staging_path(target, "tmp");
        fs::remove_all(staged);
        try {
            write_bundle_files(result.bundle, staged);
            write_json(staged / "evaluation.json", result.report);
            publish(staged, target);
        } catch (...) {
            std::error_code ec;
            fs::remove_all(staged, ec);
            throw;
        }
        return 0;
    });
    return result;
}

}  // namespace sepsis
