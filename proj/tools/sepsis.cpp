#include <csignal>
#include <fstream>
#include <iostream>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "sepsis/bundle.hpp"
#include "sepsis/error.hpp"
#include "sepsis/service.hpp"
#include "sepsis/simgen.hpp"
#include "sepsis/study.hpp"

using namespace sepsis;

namespace {

Service* g_service = nullptr;

void on_signal(int) {
    if (g_service) g_service->stop();
}

void write_output(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-") {
        std::cout << text;
        return;
    }
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::Io, fmt::format("cannot write '{}'", path));
    out << text;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Sepsis treatment policy toolkit: train, evaluate, simulate, serve and report"};
    app.require_subcommand(1);

    std::string cohort_path;
    std::string config_path;
    std::string out_path;
    auto* train = app.add_subcommand("train", "Fit states, actions and the MDP policy; write a model bundle");
    train->add_option("--cohort", cohort_path, "Cohort directory or .jsonl file")->required();
    train->add_option("--config", config_path, "Training config (JSON)")->required();
    train->add_option("--out", out_path, "Bundle output directory")->required();

    std::string bundle_path;
    int n_boot = 500;
    std::uint64_t seed = 3;
    double epsilon = 0.01;
    double alpha = 0.5;
    std::string report_out;
    auto* evaluate = app.add_subcommand("evaluate", "Off-policy evaluation of a bundle's policy on a cohort");
    evaluate->add_option("--bundle", bundle_path, "Model bundle directory")->required();
    evaluate->add_option("--cohort", cohort_path, "Cohort directory or .jsonl file")->required();
    evaluate->add_option("--n-boot", n_boot, "Bootstrap replicates")->capture_default_str();
    evaluate->add_option("--seed", seed, "Bootstrap seed")->capture_default_str();
    evaluate->add_option("--epsilon", epsilon, "Softening of the greedy policy")->capture_default_str();
    evaluate->add_option("--alpha", alpha, "Behavior pseudo-count")->capture_default_str();
    evaluate->add_option("--out", report_out, "Report file (default stdout)");

    std::string mdp_path;
    std::string preset;
    int n_patients = 0;
    std::uint64_t sim_seed = 0;
    int max_len = 40;
    int preset_states = 6;
    double separation = 8.0;
    auto* simgen = app.add_subcommand("simgen", "Sample a synthetic cohort from a known MDP");
    auto* mdp_opt = simgen->add_option("--mdp", mdp_path, "Ground-truth MDP (JSON)");
    auto* preset_opt = simgen->add_option("--preset", preset, "Built-in MDP instead of --mdp")
                           ->check(CLI::IsMember({"separated"}));
    mdp_opt->excludes(preset_opt);
    simgen->add_option("--n", n_patients, "Number of trajectories")->required()->check(CLI::PositiveNumber);
    simgen->add_option("--seed", sim_seed, "Sampling seed")->required();
    simgen->add_option("--out", out_path, "Output directory")->required();
    simgen->add_option("--max-len", max_len, "Maximum bins per trajectory")->capture_default_str();
    simgen->add_option("--states", preset_states, "States of the preset chain")->capture_default_str();
    simgen->add_option("--separation", separation, "Preset emission separation (noise units)")
        ->capture_default_str();

    ServiceConfig service;
    std::string token;
    auto* serve = app.add_subcommand("serve", "Run the HTTP service");
    serve->add_option("--bundle", service.bundle_path, "Model bundle directory");
    serve->add_option("--cohort", service.cohort_path, "Cohort to browse");
    serve->add_option("--decisions", service.decision_log_path, "Decision log (JSON lines)")->capture_default_str();
    serve->add_option("--references", service.references_path,
                      "Study references (generated from discordant cases when missing)");
    serve->add_option("--host", service.host)->capture_default_str();
    serve->add_option("--port", service.port)->capture_default_str();
    serve->add_option("--token", token, "Require this bearer token");
    serve->add_option("--pseudonym-seed", service.pseudonym_seed)->capture_default_str();

    std::string log_path;
    std::string refs_path;
    std::string format = "text";
    bool wilson = false;
    auto* report = app.add_subcommand("report", "Concordance and regression report over a decision log");
    report->add_option("--log", log_path, "Decision log (JSON lines)")->required();
    report->add_option("--references", refs_path, "Reference decisions (JSON)")->required();
    report->add_option("--format", format)->check(CLI::IsMember({"text", "json"}))->capture_default_str();
    report->add_flag("--wilson", wilson, "Wilson instead of normal-approximation intervals");
    report->add_option("--out", report_out, "Output file (default stdout)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train) {
            auto result = train_to_disk(cohort_path, config_path, out_path, [](std::string_view stage) {
                std::cerr << "[train] " << stage << '\n';
            });
            std::cout << result.report.dump(2) << '\n';
        } else if (*evaluate) {
            const auto bundle = load_bundle(bundle_path);
            const auto input = load_cohort(cohort_path);
            EvaluationOptions options;
            options.n_boot = n_boot;
            options.seed = seed;
            options.epsilon = epsilon;
            options.behavior_alpha = alpha;
            write_output(report_out, evaluate_bundle(bundle, input.cohort, options).dump(2) + "\n");
        } else if (*simgen) {
            GroundTruthMdp mdp;
            if (!preset.empty()) {
                mdp = make_separated_oracle(preset_states, separation);
            } else if (!mdp_path.empty()) {
                std::ifstream in(mdp_path);
                if (!in) throw Error(ErrorCode::Io, fmt::format("cannot open '{}'", mdp_path));
                mdp = GroundTruthMdp::from_json(nlohmann::json::parse(in));
            } else {
                throw Error(ErrorCode::Validation, "simgen needs --mdp or --preset");
            }
            const auto sampled = sample_cohort(mdp, n_patients, sim_seed, max_len);
            write_sampled_cohort(sampled, mdp, out_path);
            std::cerr << fmt::format("[simgen] wrote {} trajectories to {}\n", sampled.cohort.size(), out_path);
        } else if (*serve) {
            if (!token.empty()) service.bearer_token = token;
            service.apply_env();
            if (service.bundle_path.empty() || service.cohort_path.empty()) {
                throw Error(ErrorCode::Validation, "serve needs --bundle and --cohort (or SEPSIS_BUNDLE/SEPSIS_COHORT)");
            }
            Service svc(service);
            g_service = &svc;
            std::signal(SIGINT, on_signal);
            std::signal(SIGTERM, on_signal);
            const int port = svc.bind();
            std::cerr << fmt::format("[serve] listening on {}:{}\n", service.host, port);
            svc.run();
            g_service = nullptr;
        } else if (*report) {
            const auto log = read_decision_log(log_path);
            const auto refs = read_references(refs_path);
            StudyReportOptions options;
            if (wilson) options.interval = IntervalMethod::Wilson;
            const auto doc = study_report(log, refs, options);
            write_output(report_out, format == "json" ? doc.dump(2) + "\n" : format_study_report(doc));
        }
    } catch (const Error& e) {
        std::cerr << "error [" << to_string(e.code()) << "]: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
