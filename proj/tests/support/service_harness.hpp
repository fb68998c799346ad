#pragma once

#include <chrono>
#include <memory>
#include <optional>
#include <string>
#include <thread>

#include "fixtures.hpp"
#include "httplib.h"
#include "sepsis/bundle.hpp"
#include "sepsis/service.hpp"

namespace fixtures {

// Trains a small bundle on a simulated cohort and serves it on a free local port.
class ServiceHarness {
public:
    explicit ServiceHarness(int n_patients = 300, std::optional<std::string> token = std::nullopt,
                            std::optional<sepsis::ReferenceDecisions> references = std::nullopt,
                            std::uint64_t seed = 31) {
        sim_ = separated_cohort(n_patients, seed);
        sepsis::write_sampled_cohort(sim_.sampled, sim_.mdp, dir_.str("cohort"));
        const auto loaded = sepsis::load_cohort(dir_.str("cohort"));
        const auto trained = sepsis::train_pipeline(loaded, small_config(sim_.mdp, 6, 20));
        sepsis::save_bundle(trained.bundle, dir_.str("bundle"));

        sepsis::ServiceConfig config;
        config.bundle_path = dir_.str("bundle");
        config.cohort_path = dir_.str("cohort");
        config.decision_log_path = dir_.str("decisions.jsonl");
        config.host = "127.0.0.1";
        config.port = 0;
        config.bearer_token = std::move(token);
        if (references) {
            sepsis::write_references(dir_.str("references.json"), *references);
            config.references_path = dir_.str("references.json");
        }
        config.explain.gbdt.n_trees = 20;
        config.explain.background_size = 64;
        service_ = std::make_unique<sepsis::Service>(config);
        port_ = service_->bind();
        thread_ = std::thread([this] { service_->run(); });

        auto probe = client();
        for (int i = 0; i < 200; ++i) {
            if (auto r = probe.Get("/health"); r && r->status == 200) break;
            std::this_thread::sleep_for(std::chrono::milliseconds(20));
        }
    }

    ~ServiceHarness() {
        service_->stop();
        if (thread_.joinable()) thread_.join();
    }

    ServiceHarness(const ServiceHarness&) = delete;
    ServiceHarness& operator=(const ServiceHarness&) = delete;

    httplib::Client client() const {
        httplib::Client c("127.0.0.1", port_);
        c.set_read_timeout(120, 0);
        return c;
    }

    sepsis::Service& service() { return *service_; }
    const SimCohort& sim() const { return sim_; }
    int port() const { return port_; }

private:
    TempDir dir_;
    SimCohort sim_;
    std::unique_ptr<sepsis::Service> service_;
    std::thread thread_;
    int port_ = 0;
};

// Parses a response body, failing loudly on transport errors.
inline nlohmann::json body_of(const httplib::Result& r) {
    if (!r) throw std::runtime_error("request failed: " + httplib::to_string(r.error()));
    return nlohmann::json::parse(r->body);
}

}  // namespace fixtures
