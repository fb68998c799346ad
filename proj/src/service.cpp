#include "sepsis/service.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <random>
#include <set>

#include <fmt/format.h>

#include "httplib.h"
#include "sepsis/error.hpp"

namespace sepsis {

namespace {

constexpr std::array<std::string_view, 24> kFirstNames = {
    "Jeffrey", "Ruth",  "Maria",   "James",  "Linda", "Robert", "Patricia", "Michael",
    "Barbara", "David", "Susan",   "Joseph", "Karen", "Thomas", "Nancy",    "Daniel",
    "Helen",   "Paul",  "Dorothy", "Mark",   "Sandra", "George", "Carol",   "Steven"};
constexpr std::array<std::string_view, 24> kLastNames = {
    "Williams", "Silva",  "Johnson", "Brown",  "Garcia",   "Miller", "Davis",  "Lopez",
    "Wilson",   "Moore",  "Taylor",  "Martin", "Thompson", "White",  "Harris", "Clark",
    "Lewis",    "Walker", "Hall",    "Young",  "Allen",    "King",   "Wright", "Scott"};

nlohmann::json error_body(int status, std::string_view message) {
    return {{"schema_version", kSchemaVersion}, {"status", status}, {"error", std::string(message)}};
}

void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, std::string_view message) {
    send_json(res, status, error_body(status, message));
}

int status_for(ErrorCode code) {
    switch (code) {
        case ErrorCode::NotFound:
        case ErrorCode::UnsupportedState: return 404;
        case ErrorCode::Validation:
        case ErrorCode::UnknownCase: return 400;
        default: return 500;
    }
}

std::optional<int> parse_int(const std::string& text) {
    int v = 0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || ptr != text.data() + text.size()) return std::nullopt;
    return v;
}

nlohmann::json trajectory_json(const ServiceSnapshot& snap, const PatientTrajectory& p) {
    const auto& schema = snap.cohort.schema;
    nlohmann::json steps = nlohmann::json::array();
    for (std::size_t i = 0; i < p.timesteps.size(); ++i) {
        const auto& rec = p.timesteps[i];
        const auto flags = flag_abnormal(rec, schema);
        nlohmann::json flag_doc = nlohmann::json::object();
        for (const auto& [name, flag] : flags.flags) flag_doc[name] = std::string(to_string(flag));
        const int s = assign_state(snap.bundle.states, p, rec);
        const auto& mdp = snap.bundle.mdp;
        nlohmann::json step = {
            {"bin", rec.bin_index},
            {"features", rec.features},
            {"imputed", rec.imputed},
            {"fluid_dose", rec.fluid_dose},
            {"vaso_dose", rec.vaso_dose},
            {"mech_vent", rec.mech_vent},
            {"sofa", rec.sofa},
            {"sirs", rec.sirs},
            {"flags", std::move(flag_doc)},
            {"state_id", s},
            {"clinician_action", discretize_action(mdp.space, rec.fluid_dose, rec.vaso_dose)},
            {"model_action", mdp.policy.empty() ? -1 : mdp.policy[static_cast<std::size_t>(s)]}};
        step["trend"] = i == 0 ? nlohmann::json(nullptr) : nlohmann::json(trend_deltas(p.timesteps[i - 1], rec));
        steps.push_back(std::move(step));
    }
    nlohmann::json groups = nlohmann::json::object();
    for (const auto& f : schema.features()) groups[f.name] = std::string(to_string(f.group));
    const auto pseudo = snap.pseudonyms.find(p.patient_id);
    return {{"schema_version", kSchemaVersion},
            {"patient_id", p.patient_id},
            {"pseudonym", pseudo == snap.pseudonyms.end() ? "" : pseudo->second},
            {"demographics",
             {{"age", p.demographics.age},
              {"gender", p.demographics.gender},
              {"weight", p.demographics.weight},
              {"comorbidities", p.demographics.comorbidities}}},
            {"died", p.died},
            {"feature_groups", std::move(groups)},
            {"timesteps", std::move(steps)}};
}

bool authorized(const ServiceConfig& config, const httplib::Request& req) {
    if (!config.bearer_token) return true;
    return req.get_header_value("Authorization") == "Bearer " + *config.bearer_token;
}

}  // namespace

void ServiceConfig::apply_env() {
    auto env = [](const char* name) -> std::optional<std::string> {
        const char* v = std::getenv(name);
        if (!v || !*v) return std::nullopt;
        return std::string(v);
    };
    if (auto bind = env("SEPSIS_BIND")) {
        const auto colon = bind->rfind(':');
        if (colon == std::string::npos) {
            host = *bind;
        } else {
            host = bind->substr(0, colon);
            auto p = parse_int(bind->substr(colon + 1));
            if (!p || *p < 0 || *p > 65535) {
                throw Error(ErrorCode::Validation, fmt::format("SEPSIS_BIND: bad port in '{}'", *bind));
            }
            port = *p;
        }
    }
    if (auto v = env("SEPSIS_BUNDLE")) bundle_path = *v;
    if (auto v = env("SEPSIS_COHORT")) cohort_path = *v;
    if (auto v = env("SEPSIS_DECISION_LOG")) decision_log_path = *v;
    if (auto v = env("SEPSIS_REFERENCES")) references_path = *v;
}

std::map<std::string, std::string> make_pseudonyms(const Cohort& cohort, std::uint64_t seed) {
    std::vector<std::string> ids;
    for (const auto& p : cohort) ids.push_back(p.patient_id);
    std::sort(ids.begin(), ids.end());
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> first(0, kFirstNames.size() - 1);
    std::uniform_int_distribution<std::size_t> last(0, kLastNames.size() - 1);
    std::map<std::string, std::string> out;
    std::map<std::string, int> used;
    for (const auto& id : ids) {
        std::string name = fmt::format("{} {}", kFirstNames[first(rng)], kLastNames[last(rng)]);
        const int n = used[name]++;
        if (n > 0) name += fmt::format(" {}", n + 1);
        out[id] = std::move(name);
    }
    return out;
}

ReferenceDecisions select_study_cases(const ModelBundle& bundle, const Cohort& cohort,
                                      const std::map<std::string, std::string>& pseudonyms,
                                      std::size_t n, std::uint64_t seed) {
    auto cases = find_discordant_cases(cohort, bundle.mdp, bundle.states);
    // One case per patient: the first discordant bin.
    std::vector<DiscordantCase> unique;
    std::set<std::string> seen;
    for (const auto& c : cases) {
        if (seen.insert(c.patient_id).second) unique.push_back(c);
    }
    std::mt19937_64 rng(seed);
    std::shuffle(unique.begin(), unique.end(), rng);
    if (unique.size() > n) unique.resize(n);

    std::map<std::string, const PatientTrajectory*> by_id;
    for (const auto& p : cohort) by_id[p.patient_id] = &p;

    ReferenceDecisions refs;
    for (std::size_t i = 0; i < unique.size(); ++i) {
        const auto& c = unique[i];
        const auto& p = *by_id.at(c.patient_id);
        std::size_t position = 0;
        while (p.timesteps[position].bin_index != c.bin_index) ++position;
        const auto [fluid, vaso] = current_doses(p, position);
        const auto& space = bundle.mdp.space;

        ReferenceCase rc;
        rc.case_id = fmt::format("case-{:02d}", i + 1);
        rc.patient_id = c.patient_id;
        rc.bin_index = c.bin_index;
        auto pseudo = pseudonyms.find(c.patient_id);
        rc.pseudonym = pseudo == pseudonyms.end() ? c.patient_id : pseudo->second;
        rc.vignette = fmt::format("{}, age {:.0f}, 4-hour bin {} of the ICU stay.", rc.pseudonym,
                                  p.demographics.age, c.bin_index + 1);
        rc.current_fluid_dose = fluid;
        rc.current_vaso_dose = vaso;
        rc.ai = {recommended_delta(space, Channel::Fluid, fluid, fluid_bin_of(c.model_action)),
                 recommended_delta(space, Channel::Vaso, vaso, vaso_bin_of(c.model_action))};
        rc.original_clinician = {recommended_delta(space, Channel::Fluid, fluid, fluid_bin_of(c.clinician_action)),
                                 recommended_delta(space, Channel::Vaso, vaso, vaso_bin_of(c.clinician_action))};
        refs.cases.emplace(rc.case_id, std::move(rc));
    }
    return refs;
}

nlohmann::json gate_payload(const RecommendationPayload& payload, std::optional<Condition> condition) {
    if (!condition) {
        auto doc = payload.to_json();
        doc["condition"] = nullptr;
        return doc;
    }
    nlohmann::json doc = {{"schema_version", kSchemaVersion},
                          {"condition", std::string(to_string(*condition))},
                          {"patient_id", payload.patient_id},
                          {"bin", payload.bin_index}};
    if (*condition == Condition::NoAi) return doc;
    doc["text"] = payload.text;
    if (*condition == Condition::TextOnly) return doc;
    doc["explanation"] = payload.explanation ? payload.explanation->to_json() : nlohmann::json(nullptr);
    if (*condition == Condition::FeatureExplanation) return doc;
    nlohmann::json alts = nlohmann::json::array();
    for (const auto& a : payload.alternatives) {
        alts.push_back({{"action_id", a.action_id},
                        {"fluid_bin", fluid_bin_of(a.action_id)},
                        {"vaso_bin", vaso_bin_of(a.action_id)},
                        {"q", a.q ? nlohmann::json(*a.q) : nlohmann::json(nullptr)},
                        {"clinician_frequency", a.clinician_frequency}});
    }
    doc["alternatives"] = std::move(alts);
    doc["alternatives_ranked_by"] = payload.alternatives_from_q ? "q" : "clinician_frequency";
    return doc;
}

std::shared_ptr<const ServiceSnapshot> load_snapshot(const ServiceConfig& config) {
    auto snap = std::make_shared<ServiceSnapshot>();
    snap->bundle = load_bundle(config.bundle_path);
    snap->cohort = load_cohort(config.cohort_path);
    if (!(snap->bundle.schema == snap->cohort.schema)) {
        throw Error(ErrorCode::Validation, "bundle and cohort feature schemas differ");
    }
    for (const auto& name : snap->bundle.states.feature_order) {
        if (!snap->cohort.cohort.empty() && !snap->cohort.cohort.front().timesteps.empty() &&
            !feature_value(snap->cohort.cohort.front(), snap->cohort.cohort.front().timesteps.front(), name)) {
            throw Error(ErrorCode::Validation, fmt::format("cohort lacks model feature '{}'", name));
        }
    }
    for (std::size_t i = 0; i < snap->cohort.cohort.size(); ++i) snap->index[snap->cohort.cohort[i].patient_id] = i;
    snap->pseudonyms = make_pseudonyms(snap->cohort.cohort, config.pseudonym_seed);
    if (!config.references_path.empty() && std::filesystem::exists(config.references_path)) {
        snap->references = read_references(config.references_path);
    } else {
        snap->references = select_study_cases(snap->bundle, snap->cohort.cohort, snap->pseudonyms,
                                              config.n_study_cases, config.pseudonym_seed);
        if (!config.references_path.empty()) write_references(config.references_path, snap->references);
    }
    snap->explainer = std::make_unique<StateExplainer>(snap->cohort.cohort, snap->bundle.states, config.explain);
    return snap;
}

Service::Service(ServiceConfig config) : config_(std::move(config)) {
    snapshot_ = load_snapshot(config_);
    log_ = std::make_unique<DecisionLog>(config_.decision_log_path);
    server_ = std::make_unique<httplib::Server>();
    install_routes();
}

Service::~Service() { stop(); }

void Service::reload() {
    auto fresh = load_snapshot(config_);
    std::lock_guard lock(snapshot_mutex_);
    snapshot_ = std::move(fresh);
}

std::shared_ptr<const ServiceSnapshot> Service::snapshot() const {
    std::lock_guard lock(snapshot_mutex_);
    return snapshot_;
}

int Service::bind() {
    if (config_.port == 0) return server_->bind_to_any_port(config_.host);
    if (!server_->bind_to_port(config_.host, config_.port)) {
        throw Error(ErrorCode::Io, fmt::format("cannot bind {}:{}", config_.host, config_.port));
    }
    return config_.port;
}

void Service::run() { server_->listen_after_bind(); }

void Service::stop() {
    if (server_) server_->stop();
}

void Service::install_routes() {
    auto& srv = *server_;

    srv.set_pre_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
        if (req.path == "/health" || authorized(config_, req)) return httplib::Server::HandlerResponse::Unhandled;
        send_error(res, 401, "missing or invalid bearer token");
        return httplib::Server::HandlerResponse::Handled;
    });
    srv.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
        try {
            std::rethrow_exception(ep);
        } catch (const Error& e) {
            send_error(res, status_for(e.code()), e.what());
        } catch (const std::exception& e) {
            send_error(res, 500, e.what());
        }
    });
    srv.set_error_handler([](const httplib::Request&, httplib::Response& res) {
        if (res.body.empty()) {
            send_error(res, res.status, res.status == 404 ? "not found" : "request failed");
        }
    });

    srv.Get("/health", [this](const httplib::Request&, httplib::Response& res) {
        const auto snap = snapshot();
        send_json(res, 200, {{"schema_version", kSchemaVersion},
                             {"status", "ok"},
                             {"patients", snap->cohort.cohort.size()},
                             {"k", snap->bundle.states.k},
                             {"config_hash", snap->bundle.provenance.config_hash},
                             {"decisions", log_->size()},
                             {"study_cases", snap->references.cases.size()}});
    });

    srv.Get("/patients", [this](const httplib::Request& req, httplib::Response& res) {
        const auto snap = snapshot();
        std::multimap<std::string, std::string> params(req.params.begin(), req.params.end());
        std::vector<FieldError> errors;
        const auto filter = filter_from_params(params, errors);
        std::optional<SortKey> key;
        bool descending = false;
        if (req.has_param("sort")) {
            try {
                key = sort_key_from_string(req.get_param_value("sort"));
            } catch (const Error& e) {
                errors.push_back({"sort", e.what()});
            }
        }
        if (req.has_param("order")) {
            const auto order = req.get_param_value("order");
            if (order == "desc") {
                descending = true;
            } else if (order != "asc") {
                errors.push_back({"order", "expected 'asc' or 'desc'"});
            }
        }
        if (!errors.empty()) {
            auto body = error_body(400, "invalid filter");
            body["fields"] = nlohmann::json::array();
            for (const auto& e : errors) body["fields"].push_back({{"field", e.field}, {"message", e.message}});
            send_json(res, 400, body);
            return;
        }
        auto entries = browse(snap->cohort.cohort, snap->bundle.mdp, snap->bundle.states, filter);
        if (key) sort_entries(entries, *key, descending);
        nlohmann::json list = nlohmann::json::array();
        for (const auto& e : entries) {
            auto doc = e.to_json();
            doc["pseudonym"] = snap->pseudonyms.at(e.patient_id);
            list.push_back(std::move(doc));
        }
        send_json(res, 200, {{"schema_version", kSchemaVersion}, {"count", list.size()}, {"patients", std::move(list)}});
    });

    srv.Get(R"(/patients/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
        const auto snap = snapshot();
        const std::string id = req.matches[1];
        auto it = snap->index.find(id);
        if (it == snap->index.end()) {
            send_error(res, 404, fmt::format("unknown patient '{}'", id));
            return;
        }
        send_json(res, 200, trajectory_json(*snap, snap->cohort.cohort[it->second]));
    });

    srv.Get(R"(/patients/([^/]+)/timesteps/([^/]+)/recommendation)",
            [this](const httplib::Request& req, httplib::Response& res) {
                const auto snap = snapshot();
                const std::string id = req.matches[1];
                std::optional<Condition> condition;
                if (req.has_param("condition")) {
                    try {
                        condition = condition_from_string(req.get_param_value("condition"));
                    } catch (const Error& e) {
                        auto body = error_body(400, "invalid condition");
                        body["fields"] = {{{"field", "condition"}, {"message", e.what()}}};
                        send_json(res, 400, body);
                        return;
                    }
                }
                auto it = snap->index.find(id);
                if (it == snap->index.end()) {
                    send_error(res, 404, fmt::format("unknown patient '{}'", id));
                    return;
                }
                const auto bin = parse_int(req.matches[2]);
                if (!bin) {
                    send_error(res, 404, fmt::format("unknown bin '{}'", std::string(req.matches[2])));
                    return;
                }
                const auto& patient = snap->cohort.cohort[it->second];
                const bool needs_explanation = !condition || *condition == Condition::FeatureExplanation ||
                                               *condition == Condition::AlternativeTreatments;
                const auto payload = build_payload(snap->bundle.mdp, snap->bundle.states,
                                                   needs_explanation ? snap->explainer.get() : nullptr, patient,
                                                   *bin, config_.payload);
                send_json(res, 200, gate_payload(payload, condition));
            });

    srv.Post("/study/decisions", [this](const httplib::Request& req, httplib::Response& res) {
        const auto snap = snapshot();
        nlohmann::json doc;
        try {
            doc = nlohmann::json::parse(req.body);
        } catch (const nlohmann::json::parse_error& e) {
            send_error(res, 400, fmt::format("malformed JSON: {}", e.what()));
            return;
        }
        DecisionRecord record;
        try {
            record = DecisionRecord::from_json(doc);
        } catch (const Error& e) {
            auto body = error_body(400, "invalid decision");
            body["fields"] = {{{"message", e.what()}}};
            send_json(res, 400, body);
            return;
        }
        const auto header_key = req.get_header_value("Idempotency-Key");
        if (!header_key.empty()) record.idempotency_key = header_key;
        record.record_id.clear();

        const auto violations = validate_decision(record, snap->references);
        if (!violations.empty()) {
            auto body = error_body(422, violations.front().message);
            body["rule"] = violations.front().rule;
            body["violations"] = nlohmann::json::array();
            for (const auto& v : violations) body["violations"].push_back({{"rule", v.rule}, {"message", v.message}});
            send_json(res, 422, body);
            return;
        }
        try {
            const auto result = log_->append(std::move(record));
            send_json(res, result.created ? 201 : 200,
                      {{"schema_version", kSchemaVersion},
                       {"created", result.created},
                       {"record", result.record.to_json()}});
        } catch (const Error& e) {
            if (e.code() != ErrorCode::Validation) throw;
            auto body = error_body(422, e.what());
            body["rule"] = "supersedes_unknown";
            send_json(res, 422, body);
        }
    });

    srv.Get("/study/cases", [this](const httplib::Request&, httplib::Response& res) {
        const auto snap = snapshot();
        nlohmann::json list = nlohmann::json::array();
        for (const auto& [id, c] : snap->references.cases) {
            list.push_back({{"case_id", id},
                            {"patient_id", c.patient_id},
                            {"bin", c.bin_index},
                            {"pseudonym", c.pseudonym},
                            {"vignette", c.vignette},
                            {"current_dose", {{"fluid_ml", c.current_fluid_dose}, {"vaso_mcg_kg_min", c.current_vaso_dose}}},
                            {"decrease_allowed",
                             {{"fluid", c.current_fluid_dose > 0.0}, {"vaso", c.current_vaso_dose > 0.0}}}});
        }
        send_json(res, 200, {{"schema_version", kSchemaVersion}, {"cases", std::move(list)}});
    });

    srv.Get("/study/report", [this](const httplib::Request& req, httplib::Response& res) {
        const auto snap = snapshot();
        StudyReportOptions options;
        if (req.get_param_value("interval") == "wilson") options.interval = IntervalMethod::Wilson;
        const auto records = log_->snapshot();
        const auto report = study_report(records, snap->references, options);
        if (req.get_param_value("format") == "text") {
            res.status = 200;
            res.set_content(format_study_report(report), "text/plain");
            return;
        }
        send_json(res, 200, report);
    });

    srv.Post("/admin/reload", [this](const httplib::Request&, httplib::Response& res) {
        reload();
        const auto snap = snapshot();
        send_json(res, 200, {{"schema_version", kSchemaVersion},
                             {"status", "reloaded"},
                             {"config_hash", snap->bundle.provenance.config_hash}});
    });
}

}  // namespace sepsis
