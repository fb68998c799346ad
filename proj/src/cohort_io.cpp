#include <charconv>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include <fmt/format.h>

#include "sepsis/cohort.hpp"
#include "sepsis/error.hpp"

namespace sepsis {

namespace {

int parse_digits(std::string_view text, std::size_t pos, std::size_t count, std::string_view whole) {
    int value = 0;
    if (pos + count > text.size()) {
        throw Error(ErrorCode::Validation, fmt::format("unparseable timestamp '{}'", whole));
    }
    auto [ptr, ec] = std::from_chars(text.data() + pos, text.data() + pos + count, value);
    if (ec != std::errc() || ptr != text.data() + pos + count) {
        throw Error(ErrorCode::Validation, fmt::format("unparseable timestamp '{}'", whole));
    }
    return value;
}

void expect_char(std::string_view text, std::size_t pos, std::string_view allowed) {
    if (pos >= text.size() || allowed.find(text[pos]) == std::string_view::npos) {
        throw Error(ErrorCode::Validation, fmt::format("unparseable timestamp '{}'", text));
    }
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                field.push_back('"');
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                field.push_back(c);
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(field));
            field.clear();
        } else if (c != '\r') {
            field.push_back(c);
        }
    }
    out.push_back(std::move(field));
    return out;
}

double parse_double(const std::string& text) {
    double value = 0.0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc() || ptr != text.data() + text.size()) {
        return std::numeric_limits<double>::quiet_NaN();
    }
    return value;
}

bool parse_bool(const std::string& text, std::size_t line) {
    if (text == "1" || text == "true" || text == "True" || text == "TRUE") return true;
    if (text == "0" || text == "false" || text == "False" || text == "FALSE" || text.empty()) {
        return false;
    }
    throw Error(ErrorCode::Validation, fmt::format("line {}: expected boolean, got '{}'", line, text));
}

}  // namespace

std::int64_t parse_timestamp(std::string_view text) {
    // YYYY-MM-DD[T ]HH:MM:SS
    expect_char(text, 4, "-");
    expect_char(text, 7, "-");
    expect_char(text, 10, "T ");
    expect_char(text, 13, ":");
    expect_char(text, 16, ":");
    const int year = parse_digits(text, 0, 4, text);
    const int month = parse_digits(text, 5, 2, text);
    const int day = parse_digits(text, 8, 2, text);
    const int hour = parse_digits(text, 11, 2, text);
    const int minute = parse_digits(text, 14, 2, text);
    const int second = parse_digits(text, 17, 2, text);

    const std::chrono::year_month_day ymd{std::chrono::year{year},
                                          std::chrono::month{static_cast<unsigned>(month)},
                                          std::chrono::day{static_cast<unsigned>(day)}};
    if (!ymd.ok() || hour > 23 || minute > 59 || second > 60) {
        throw Error(ErrorCode::Validation, fmt::format("unparseable timestamp '{}'", text));
    }

    std::size_t pos = 19;
    if (pos < text.size() && text[pos] == '.') {
        ++pos;
        while (pos < text.size() && std::isdigit(static_cast<unsigned char>(text[pos]))) ++pos;
    }
    std::int64_t offset = 0;
    if (pos < text.size()) {
        if (text[pos] == 'Z') {
            ++pos;
        } else if (text[pos] == '+' || text[pos] == '-') {
            const int sign = text[pos] == '+' ? 1 : -1;
            expect_char(text, pos + 3, ":");
            const int oh = parse_digits(text, pos + 1, 2, text);
            const int om = parse_digits(text, pos + 4, 2, text);
            offset = sign * (oh * 3600 + om * 60);
            pos += 6;
        }
    }
    if (pos != text.size()) {
        throw Error(ErrorCode::Validation, fmt::format("unparseable timestamp '{}'", text));
    }

    const auto days = std::chrono::sys_days(ymd).time_since_epoch().count();
    return static_cast<std::int64_t>(days) * 86400 + hour * 3600 + minute * 60 + second - offset;
}

std::string format_timestamp(std::int64_t seconds) {
    std::int64_t days = seconds / 86400;
    std::int64_t rem = seconds % 86400;
    if (rem < 0) {
        rem += 86400;
        --days;
    }
    const std::chrono::year_month_day ymd{std::chrono::sys_days{std::chrono::days{days}}};
    return fmt::format("{:04d}-{:02d}-{:02d}T{:02d}:{:02d}:{:02d}Z", static_cast<int>(ymd.year()),
                       static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                       rem / 3600, (rem % 3600) / 60, rem % 60);
}

std::vector<EventRow> read_events_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) return {};
    const auto header = split_csv_line(line);
    if (header != std::vector<std::string>{"patient_id", "timestamp", "channel", "value"}) {
        throw Error(ErrorCode::Validation,
                    "events csv: header must be 'patient_id,timestamp,channel,value'");
    }
    std::vector<EventRow> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        auto fields = split_csv_line(line);
        if (fields.size() != 4) {
            throw Error(ErrorCode::Validation,
                        fmt::format("events csv line {}: expected 4 fields, got {}", line_no, fields.size()));
        }
        EventRow row;
        row.patient_id = std::move(fields[0]);
        try {
            row.timestamp = parse_timestamp(fields[1]);
        } catch (const Error& e) {
            throw Error(ErrorCode::Validation, fmt::format("events csv line {}: {}", line_no, e.what()));
        }
        row.channel = std::move(fields[2]);
        row.value = parse_double(fields[3]);
        row.line = line_no;
        rows.push_back(std::move(row));
    }
    return rows;
}

std::map<std::string, PatientInfo> read_demographics_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) return {};
    const auto header = split_csv_line(line);
    const std::vector<std::string> fixed{"patient_id", "age", "gender", "weight", "died"};
    if (header.size() < fixed.size() || !std::equal(fixed.begin(), fixed.end(), header.begin())) {
        throw Error(ErrorCode::Validation,
                    "demographics csv: header must start with 'patient_id,age,gender,weight,died'");
    }
    std::map<std::string, PatientInfo> out;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        auto fields = split_csv_line(line);
        if (fields.size() != header.size()) {
            throw Error(ErrorCode::Validation,
                        fmt::format("demographics csv line {}: expected {} fields", line_no, header.size()));
        }
        PatientInfo info;
        info.demographics.age = parse_double(fields[1]);
        info.demographics.gender = fields[2];
        info.demographics.weight = parse_double(fields[3]);
        info.died = parse_bool(fields[4], line_no);
        for (std::size_t c = fixed.size(); c < header.size(); ++c) {
            info.demographics.comorbidities[header[c]] = parse_bool(fields[c], line_no);
        }
        if (!out.emplace(fields[0], std::move(info)).second) {
            throw Error(ErrorCode::Validation,
                        fmt::format("demographics csv line {}: duplicate patient '{}'", line_no, fields[0]));
        }
    }
    return out;
}

void write_events_csv(std::ostream& out, const Cohort& cohort, std::int64_t start) {
    out << "patient_id,timestamp,channel,value\n";
    for (const auto& p : cohort) {
        for (const auto& rec : p.timesteps) {
            const auto ts = format_timestamp(start + rec.bin_index * kBinSeconds + 600);
            for (const auto& [name, value] : rec.features) {
                out << fmt::format("{},{},{},{}\n", p.patient_id, ts, name, value);
            }
            if (rec.fluid_dose > 0.0) {
                out << fmt::format("{},{},{},{}\n", p.patient_id, ts, kFluidChannel, rec.fluid_dose);
            }
            if (rec.vaso_dose > 0.0) {
                out << fmt::format("{},{},{},{}\n", p.patient_id, ts, kVasoChannel, rec.vaso_dose);
            }
            out << fmt::format("{},{},{},{}\n", p.patient_id, ts, kMechVentChannel, rec.mech_vent ? 1 : 0);
            out << fmt::format("{},{},{},{}\n", p.patient_id, ts, kSofaChannel, rec.sofa);
            out << fmt::format("{},{},{},{}\n", p.patient_id, ts, kSirsChannel, rec.sirs);
        }
    }
}

void write_demographics_csv(std::ostream& out, const Cohort& cohort) {
    std::set<std::string> flags;
    for (const auto& p : cohort) {
        for (const auto& [name, value] : p.demographics.comorbidities) flags.insert(name);
    }
    out << "patient_id,age,gender,weight,died";
    for (const auto& f : flags) out << ',' << f;
    out << '\n';
    for (const auto& p : cohort) {
        out << fmt::format("{},{},{},{},{}", p.patient_id, p.demographics.age, p.demographics.gender,
                           p.demographics.weight, p.died ? 1 : 0);
        for (const auto& f : flags) {
            auto it = p.demographics.comorbidities.find(f);
            out << ',' << ((it != p.demographics.comorbidities.end() && it->second) ? 1 : 0);
        }
        out << '\n';
    }
}

// ---------------------------------------------------------------- json

nlohmann::json FeatureSchema::to_json() const {
    nlohmann::json features_json = nlohmann::json::array();
    for (const auto& f : features_) {
        features_json.push_back(
            {{"name", f.name}, {"lo", f.lo}, {"hi", f.hi}, {"group", std::string(sepsis::to_string(f.group))}});
    }
    return {{"schema_version", kSchemaVersion}, {"features", std::move(features_json)}};
}

FeatureSchema FeatureSchema::from_json(const nlohmann::json& doc) {
    std::vector<FeatureSpec> specs;
    try {
        for (const auto& f : doc.at("features")) {
            specs.push_back({f.at("name").get<std::string>(), f.at("lo").get<double>(),
                             f.at("hi").get<double>(),
                             display_group_from_string(f.value("group", std::string("other")))});
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Validation, fmt::format("feature schema: {}", e.what()));
    }
    return FeatureSchema(std::move(specs));
}

nlohmann::json to_json(const PatientTrajectory& patient) {
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& rec : patient.timesteps) {
        steps.push_back({{"bin", rec.bin_index},
                         {"features", rec.features},
                         {"imputed", rec.imputed},
                         {"fluid_dose", rec.fluid_dose},
                         {"vaso_dose", rec.vaso_dose},
                         {"mech_vent", rec.mech_vent},
                         {"sofa", rec.sofa},
                         {"sirs", rec.sirs}});
    }
    return {{"schema_version", kSchemaVersion},
            {"patient_id", patient.patient_id},
            {"age", patient.demographics.age},
            {"gender", patient.demographics.gender},
            {"weight", patient.demographics.weight},
            {"comorbidities", patient.demographics.comorbidities},
            {"died", patient.died},
            {"timesteps", std::move(steps)}};
}

PatientTrajectory trajectory_from_json(const nlohmann::json& doc) {
    PatientTrajectory p;
    try {
        p.patient_id = doc.at("patient_id").get<std::string>();
        p.demographics.age = doc.at("age").get<double>();
        p.demographics.gender = doc.at("gender").get<std::string>();
        p.demographics.weight = doc.at("weight").get<double>();
        p.demographics.comorbidities = doc.value("comorbidities", std::map<std::string, bool>{});
        p.died = doc.at("died").get<bool>();
        for (const auto& s : doc.at("timesteps")) {
            TimestepRecord rec;
            rec.bin_index = s.at("bin").get<int>();
            rec.features = s.at("features").get<std::map<std::string, double>>();
            rec.imputed = s.value("imputed", std::set<std::string>{});
            rec.fluid_dose = s.at("fluid_dose").get<double>();
            rec.vaso_dose = s.at("vaso_dose").get<double>();
            rec.mech_vent = s.value("mech_vent", false);
            rec.sofa = s.value("sofa", 0);
            rec.sirs = s.value("sirs", 0);
            p.timesteps.push_back(std::move(rec));
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Validation, fmt::format("trajectory json: {}", e.what()));
    }
    return p;
}

void write_trajectories_jsonl(std::ostream& out, const Cohort& cohort) {
    for (const auto& p : cohort) out << to_json(p).dump() << '\n';
}

Cohort read_trajectories_jsonl(std::istream& in) {
    Cohort cohort;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json doc;
        try {
            doc = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw Error(ErrorCode::Validation, fmt::format("jsonl line {}: {}", line_no, e.what()));
        }
        cohort.push_back(trajectory_from_json(doc));
    }
    return cohort;
}

FeatureSchema read_schema_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::Io, fmt::format("cannot open schema '{}'", path));
    try {
        return FeatureSchema::from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(ErrorCode::Validation, fmt::format("schema '{}': {}", path, e.what()));
    }
}

LoadedCohort load_cohort(const std::string& path) {
    namespace fs = std::filesystem;
    LoadedCohort out;
    const fs::path p(path);
    if (fs::is_directory(p)) {
        out.schema = read_schema_file((p / "schema.json").string());
        std::ifstream events(p / "events.csv");
        std::ifstream demo(p / "demographics.csv");
        if (!events || !demo) {
            throw Error(ErrorCode::Io,
                        fmt::format("cohort directory '{}' needs events.csv and demographics.csv", path));
        }
        const auto rows = read_events_csv(events);
        const auto patients = read_demographics_csv(demo);
        auto ingested = ingest_events(rows, patients, out.schema);
        out.cohort = std::move(ingested.cohort);
        out.report = std::move(ingested.report);
        return out;
    }
    std::ifstream in(p);
    if (!in) throw Error(ErrorCode::Io, fmt::format("cannot open cohort '{}'", path));
    out.schema = read_schema_file((p.parent_path() / "schema.json").string());
    out.cohort = read_trajectories_jsonl(in);
    return out;
}

}  // namespace sepsis
