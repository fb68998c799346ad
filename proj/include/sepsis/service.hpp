#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include "json.hpp"
#include "sepsis/bundle.hpp"
#include "sepsis/cohort.hpp"
#include "sepsis/explain.hpp"
#include "sepsis/recommend.hpp"
#include "sepsis/study.hpp"

namespace httplib {
class Server;
}

namespace sepsis {

struct ServiceConfig {
    std::string bundle_path;
    std::string cohort_path;
    std::string decision_log_path = "decisions.jsonl";
    std::string references_path;  // generated from discordant cases when missing
    std::string host = "127.0.0.1";
    int port = 8080;
    std::optional<std::string> bearer_token;
    std::uint64_t pseudonym_seed = 7;
    std::size_t n_study_cases = 8;
    PayloadOptions payload;
    ExplainOptions explain;

    // SEPSIS_BIND (host:port), SEPSIS_BUNDLE, SEPSIS_COHORT, SEPSIS_DECISION_LOG
    // and SEPSIS_REFERENCES replace the corresponding fields when set.
    void apply_env();
};

// Seeded "First Last" names, one per patient id, stable for a given seed.
std::map<std::string, std::string> make_pseudonyms(const Cohort& cohort, std::uint64_t seed);

// Study cases from the discordant-case finder: one case per patient, at most
// `n`, in a seeded order. Reference decisions are expressed as changes from the
// dose in effect before the case bin.
ReferenceDecisions select_study_cases(const ModelBundle& bundle, const Cohort& cohort,
                                      const std::map<std::string, std::string>& pseudonyms,
                                      std::size_t n, std::uint64_t seed);

// Trims a full payload to what the named condition may show: no_ai carries no
// recommendation fields; text_only adds the sentence; feature_explanation adds
// the explanation; alternative_treatments adds the ranked alternatives.
nlohmann::json gate_payload(const RecommendationPayload& payload, std::optional<Condition> condition);

// Read-only view of everything a request needs. Swapped as a unit on reload.
struct ServiceSnapshot {
    ModelBundle bundle;
    LoadedCohort cohort;
    std::map<std::string, std::size_t> index;
    std::map<std::string, std::string> pseudonyms;
    ReferenceDecisions references;
    std::unique_ptr<StateExplainer> explainer;
};

std::shared_ptr<const ServiceSnapshot> load_snapshot(const ServiceConfig& config);

class Service {
public:
    explicit Service(ServiceConfig config);
    ~Service();

    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    // Loads a fresh snapshot and swaps it in; readers see the old or the new one.
    void reload();

    std::shared_ptr<const ServiceSnapshot> snapshot() const;
    DecisionLog& decision_log() { return *log_; }

    // Binds config.host:config.port (port 0 picks a free port) and returns the port.
    int bind();
    // Serves until stop(); call after bind().
    void run();
    void stop();

    const ServiceConfig& config() const { return config_; }

private:
    void install_routes();

    ServiceConfig config_;
    mutable std::mutex snapshot_mutex_;
    std::shared_ptr<const ServiceSnapshot> snapshot_;
    std::unique_ptr<DecisionLog> log_;
    std::unique_ptr<httplib::Server> server_;
};

}  // namespace sepsis
