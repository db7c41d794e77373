#include "ehrseq/events.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

namespace ehrseq::events {

using nlohmann::json;

const char* to_string(Domain d) {
    switch (d) {
        case Domain::diagnosis: return "diagnosis";
        case Domain::procedure: return "procedure";
        case Domain::prescription: return "prescription";
    }
    return "?";
}

const char* to_string(System s) {
    switch (s) {
        case System::ICD9: return "ICD9";
        case System::ICD10: return "ICD10";
        case System::OPCS3: return "OPCS3";
        case System::OPCS4: return "OPCS4";
        case System::READ: return "READ";
        case System::BNF: return "BNF";
    }
    return "?";
}

std::optional<Domain> domain_from_string(std::string_view s) {
    if (s == "diagnosis") return Domain::diagnosis;
    if (s == "procedure") return Domain::procedure;
    if (s == "prescription") return Domain::prescription;
    return std::nullopt;
}

std::optional<System> system_from_string(std::string_view s) {
    if (s == "ICD9") return System::ICD9;
    if (s == "ICD10") return System::ICD10;
    if (s == "OPCS3") return System::OPCS3;
    if (s == "OPCS4") return System::OPCS4;
    if (s == "READ") return System::READ;
    if (s == "BNF") return System::BNF;
    return std::nullopt;
}

bool domain_system_consistent(Domain d, System s) {
    switch (d) {
        case Domain::diagnosis: return s == System::ICD9 || s == System::ICD10;
        case Domain::procedure: return s == System::OPCS3 || s == System::OPCS4;
        case Domain::prescription: return s == System::READ || s == System::BNF;
    }
    return false;
}

namespace {

bool has_whitespace(std::string_view s) {
    return s.find_first_of(" \t\r\n\f\v") != std::string_view::npos;
}

bool csv_safe(std::string_view s) {
    return !has_whitespace(s) && s.find(',') == std::string_view::npos;
}

constexpr const char* kCsvHeader =
    "patient_id,date,domain,system,code,emergency_admission,source_tag";

}  // namespace

std::string validate_record(const EventRecord& e) {
    if (e.patient_id.empty()) return "patient_id is empty";
    if (e.code.empty()) return "code is empty";
    if (has_whitespace(e.code)) return "code contains whitespace";
    if (!domain_system_consistent(e.domain, e.system)) {
        return std::string("domain/system mismatch: ") + to_string(e.domain) +
               " events must be coded in " +
               (e.domain == Domain::diagnosis   ? "ICD9/ICD10"
                : e.domain == Domain::procedure ? "OPCS3/OPCS4"
                                                : "READ/BNF") +
               ", got " + to_string(e.system);
    }
    return {};
}

namespace {

// Parses one row in either format. Returns an error message or fills `out`.
std::string parse_jsonl_row(const std::string& line, EventRecord& out) {
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) return "not valid JSON";
    if (!j.is_object()) return "not a JSON object";
    for (const char* key : {"patient_id", "date", "domain", "system", "code",
                            "emergency_admission", "source_tag"}) {
        if (!j.contains(key)) return std::string("missing field '") + key + "'";
    }
    if (!j["patient_id"].is_string() || !j["date"].is_string() ||
        !j["domain"].is_string() || !j["system"].is_string() ||
        !j["code"].is_string() || !j["source_tag"].is_string())
        return "field with wrong type (expected string)";
    if (!j["emergency_admission"].is_boolean())
        return "emergency_admission must be a boolean";

    out.patient_id = j["patient_id"].get<std::string>();
    auto day = dates::parse_date(j["date"].get<std::string>());
    if (!day) return "invalid date '" + j["date"].get<std::string>() + "'";
    out.date = *day;
    auto dom = domain_from_string(j["domain"].get<std::string>());
    if (!dom) return "unknown domain '" + j["domain"].get<std::string>() + "'";
    out.domain = *dom;
    auto sys = system_from_string(j["system"].get<std::string>());
    if (!sys) return "unknown system '" + j["system"].get<std::string>() + "'";
    out.system = *sys;
    out.code = j["code"].get<std::string>();
    out.emergency_admission = j["emergency_admission"].get<bool>();
    out.source_tag = j["source_tag"].get<std::string>();
    return validate_record(out);
}

std::string parse_csv_row(const std::string& line, EventRecord& out) {
    std::vector<std::string> cols;
    std::size_t start = 0;
    while (true) {
        std::size_t pos = line.find(',', start);
        if (pos == std::string::npos) {
            cols.push_back(line.substr(start));
            break;
        }
        cols.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    if (cols.size() != 7)
        return "expected 7 columns, got " + std::to_string(cols.size());

    out.patient_id = cols[0];
    auto day = dates::parse_date(cols[1]);
    if (!day) return "invalid date '" + cols[1] + "'";
    out.date = *day;
    auto dom = domain_from_string(cols[2]);
    if (!dom) return "unknown domain '" + cols[2] + "'";
    out.domain = *dom;
    auto sys = system_from_string(cols[3]);
    if (!sys) return "unknown system '" + cols[3] + "'";
    out.system = *sys;
    out.code = cols[4];
    if (cols[5] == "true") out.emergency_admission = true;
    else if (cols[5] == "false") out.emergency_admission = false;
    else return "emergency_admission must be 'true' or 'false', got '" + cols[5] + "'";
    out.source_tag = cols[6];
    return validate_record(out);
}

}  // namespace

IngestResult ingest(const std::string& path, FileFormat format) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open '" + path + "' for reading");

    IngestResult result;
    // Per-patient event buckets in file order; the final sort is stable, so
    // same-date events keep their ingestion order.
    std::unordered_map<std::string, std::size_t> index;
    std::vector<PatientStream> buckets;

    std::string line;
    std::size_t line_no = 0;
    bool saw_header = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (format == FileFormat::csv && !saw_header) {
            saw_header = true;
            if (line != kCsvHeader)
                result.rejected.push_back(
                    {line_no, "bad CSV header (expected '" + std::string(kCsvHeader) + "')"});
            continue;
        }
        ++result.rows_seen;
        EventRecord rec;
        std::string err = format == FileFormat::jsonl ? parse_jsonl_row(line, rec)
                                                      : parse_csv_row(line, rec);
        if (!err.empty()) {
            result.rejected.push_back({line_no, err});
            continue;
        }
        auto [it, fresh] = index.try_emplace(rec.patient_id, buckets.size());
        if (fresh) buckets.push_back(PatientStream{rec.patient_id, {}});
        buckets[it->second].events.push_back(std::move(rec));
    }

    for (auto& b : buckets)
        std::stable_sort(b.events.begin(), b.events.end(),
                         [](const EventRecord& a, const EventRecord& c) { return a.date < c.date; });
    std::sort(buckets.begin(), buckets.end(),
              [](const PatientStream& a, const PatientStream& b) {
                  return a.patient_id < b.patient_id;
              });
    result.streams = std::move(buckets);
    return result;
}

void emit(const std::vector<PatientStream>& streams, const std::string& path,
          FileFormat format) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");

    if (format == FileFormat::csv) out << kCsvHeader << '\n';
    for (const auto& s : streams) {
        for (const auto& e : s.events) {
            std::string err = validate_record(e);
            if (!err.empty())
                throw std::runtime_error("refusing to emit invalid event for patient '" +
                                         s.patient_id + "': " + err);
            if (format == FileFormat::jsonl) {
                json j;
                j["patient_id"] = e.patient_id;
                j["date"] = dates::format_date(e.date);
                j["domain"] = to_string(e.domain);
                j["system"] = to_string(e.system);
                j["code"] = e.code;
                j["emergency_admission"] = e.emergency_admission;
                j["source_tag"] = e.source_tag;
                out << j.dump() << '\n';
            } else {
                for (const std::string* f : {&e.patient_id, &e.code, &e.source_tag})
                    if (!csv_safe(*f))
                        throw std::runtime_error("field '" + *f +
                                                 "' cannot be written to CSV (comma or whitespace)");
                out << e.patient_id << ',' << dates::format_date(e.date) << ','
                    << to_string(e.domain) << ',' << to_string(e.system) << ','
                    << e.code << ',' << (e.emergency_admission ? "true" : "false")
                    << ',' << e.source_tag << '\n';
            }
        }
    }
    if (!out) throw std::runtime_error("write failure on '" + path + "'");
}

StreamStats summarize(const std::vector<PatientStream>& streams) {
    StreamStats st;
    st.n_subjects = streams.size();

    std::vector<std::size_t> visits_per_subject;
    std::vector<std::size_t> codes_per_visit;
    std::unordered_set<std::string> codes;

    for (const auto& s : streams) {
        std::size_t visits = 0;
        std::size_t run = 0;
        dates::Day prev = 0;
        for (std::size_t i = 0; i < s.events.size(); ++i) {
            codes.insert(s.events[i].code);
            if (i == 0 || s.events[i].date != prev) {
                if (run) codes_per_visit.push_back(run);
                run = 0;
                ++visits;
                prev = s.events[i].date;
            }
            ++run;
        }
        if (run) codes_per_visit.push_back(run);
        if (visits) {
            ++st.n_subjects_with_visits;
            visits_per_subject.push_back(visits);
        }
        st.n_visits += visits;
    }
    st.n_unique_codes = codes.size();

    auto fill = [](std::vector<std::size_t>& v, double& mean, double& median,
                   std::size_t& mx, std::size_t& mn) {
        if (v.empty()) return;
        std::sort(v.begin(), v.end());
        double sum = 0;
        for (auto x : v) sum += double(x);
        mean = sum / double(v.size());
        std::size_t h = v.size() / 2;
        median = v.size() % 2 ? double(v[h]) : (double(v[h - 1]) + double(v[h])) / 2.0;
        mn = v.front();
        mx = v.back();
    };
    fill(visits_per_subject, st.visits_per_subject_mean, st.visits_per_subject_median,
         st.visits_per_subject_max, st.visits_per_subject_min);
    fill(codes_per_visit, st.codes_per_visit_mean, st.codes_per_visit_median,
         st.codes_per_visit_max, st.codes_per_visit_min);
    st.empty = visits_per_subject.empty();
    return st;
}

}  // namespace ehrseq::events
