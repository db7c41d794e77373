#include "ehrseq/cohort.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace ehrseq::cohort {

using nlohmann::json;

std::string CohortRules::validate() const {
    if (index_drug_codes.empty()) return "index_drug_codes is empty";
    if (tf_event_codes.empty()) return "tf_event_codes is empty";
    for (const auto& c : index_drug_codes)
        if (tf_event_codes.count(c))
            return "code '" + c + "' appears in both index_drug_codes and tf_event_codes";
    if (blanking_window_days < 0) return "blanking_window_days is negative";
    if (outcome_window_days <= blanking_window_days)
        return "blanking_window_days (" + std::to_string(blanking_window_days) +
               ") must be smaller than outcome_window_days (" +
               std::to_string(outcome_window_days) + ")";
    return {};
}

void to_json(json& j, const CohortRules& r) {
    j = json{{"index_drug_codes", r.index_drug_codes},
             {"tf_event_codes", r.tf_event_codes},
             {"outcome_window_days", r.outcome_window_days},
             {"blanking_window_days", r.blanking_window_days},
             {"require_emergency", r.require_emergency}};
}

void from_json(const json& j, CohortRules& r) {
    r = CohortRules{};
    if (j.contains("index_drug_codes")) {
        r.index_drug_codes.clear();
        for (const auto& c : j.at("index_drug_codes"))
            r.index_drug_codes.insert(c.get<std::string>());
    }
    if (j.contains("tf_event_codes")) {
        r.tf_event_codes.clear();
        for (const auto& c : j.at("tf_event_codes"))
            r.tf_event_codes.insert(c.get<std::string>());
    }
    r.outcome_window_days = j.value("outcome_window_days", r.outcome_window_days);
    r.blanking_window_days = j.value("blanking_window_days", r.blanking_window_days);
    r.require_emergency = j.value("require_emergency", r.require_emergency);
}

CohortRules CohortRules::from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open rules file '" + path + "'");
    CohortRules r = json::parse(in).get<CohortRules>();
    std::string err = r.validate();
    if (!err.empty()) throw std::runtime_error("invalid rules in '" + path + "': " + err);
    return r;
}

void CohortRules::to_json_file(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out << json(*this).dump(2) << '\n';
}

const char* to_string(Status s) {
    switch (s) {
        case Status::case_: return "case";
        case Status::control: return "control";
        case Status::excluded: return "excluded";
        case Status::not_in_cohort: return "not_in_cohort";
    }
    return "?";
}

const char* to_string(ExclusionReason r) {
    switch (r) {
        case ExclusionReason::early_event: return "early_event";
        case ExclusionReason::non_emergency_event_only: return "non_emergency_event_only";
        case ExclusionReason::data_inconsistent: return "data_inconsistent";
    }
    return "?";
}

std::optional<Status> status_from_string(std::string_view s) {
    if (s == "case") return Status::case_;
    if (s == "control") return Status::control;
    if (s == "excluded") return Status::excluded;
    if (s == "not_in_cohort") return Status::not_in_cohort;
    return std::nullopt;
}

CohortLabel annotate(const events::PatientStream& stream, const CohortRules& rules) {
    for (std::size_t i = 1; i < stream.events.size(); ++i)
        if (stream.events[i].date < stream.events[i - 1].date)
            throw std::runtime_error("stream for patient '" + stream.patient_id +
                                     "' is not sorted by date");

    CohortLabel label;
    label.patient_id = stream.patient_id;

    std::optional<dates::Day> index;
    for (const auto& e : stream.events) {
        if (e.domain == events::Domain::prescription && rules.index_drug_codes.count(e.code)) {
            index = e.date;
            break;
        }
    }
    if (!index) {
        label.status = Status::not_in_cohort;
        return label;
    }
    label.index_date = index;

    for (const auto& e : stream.events) {
        if (e.date < kSaneDateMin || e.date > kSaneDateMax) {
            label.status = Status::excluded;
            label.exclusion_reason = ExclusionReason::data_inconsistent;
            label.diagnostics.push_back("event date " + dates::format_date(e.date) +
                                        " outside plausible range");
            return label;
        }
    }

    const dates::Day blank_end = *index + rules.blanking_window_days;
    const dates::Day outcome_end = *index + rules.outcome_window_days;
    std::optional<dates::Day> earliest_outcome;
    bool saw_non_emergency = false;
    for (const auto& e : stream.events) {
        if (!rules.tf_event_codes.count(e.code)) continue;
        if (rules.require_emergency && !e.emergency_admission) {
            if (e.date >= *index && e.date <= outcome_end) saw_non_emergency = true;
            continue;
        }
        if (e.date >= *index && e.date <= blank_end) {
            // Blanking precedes the outcome scan; the subject is excluded.
            label.status = Status::excluded;
            label.exclusion_reason = ExclusionReason::early_event;
            label.first_event_date = e.date;
            return label;
        }
        if (e.date > blank_end && e.date <= outcome_end)
            if (!earliest_outcome || e.date < *earliest_outcome) earliest_outcome = e.date;
    }

    if (earliest_outcome) {
        label.status = Status::case_;
        label.first_event_date = earliest_outcome;
    } else {
        label.status = Status::control;
        if (saw_non_emergency)
            label.diagnostics.push_back("non_emergency_event_only");
    }
    return label;
}

AnnotateResult annotate_all(const std::vector<events::PatientStream>& streams,
                            const CohortRules& rules) {
    AnnotateResult r;
    r.labels.reserve(streams.size());
    for (const auto& s : streams) {
        CohortLabel l = annotate(s, rules);
        switch (l.status) {
            case Status::case_: ++r.summary.n_case; break;
            case Status::control: ++r.summary.n_control; break;
            case Status::excluded:
                ++r.summary.n_excluded;
                if (l.exclusion_reason == ExclusionReason::early_event)
                    ++r.summary.n_excluded_early;
                if (l.exclusion_reason == ExclusionReason::data_inconsistent)
                    ++r.summary.n_excluded_inconsistent;
                break;
            case Status::not_in_cohort: ++r.summary.n_not_in_cohort; break;
        }
        r.labels.push_back(std::move(l));
    }
    std::sort(r.labels.begin(), r.labels.end(),
              [](const CohortLabel& a, const CohortLabel& b) { return a.patient_id < b.patient_id; });
    return r;
}

void write_labels_csv(const std::vector<CohortLabel>& labels, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out << "patient_id,status,index_date,first_event_date,exclusion_reason\n";
    for (const auto& l : labels) {
        out << l.patient_id << ',' << to_string(l.status) << ','
            << (l.index_date ? dates::format_date(*l.index_date) : "") << ','
            << (l.first_event_date ? dates::format_date(*l.first_event_date) : "") << ','
            << (l.exclusion_reason ? to_string(*l.exclusion_reason) : "") << '\n';
    }
    if (!out) throw std::runtime_error("write failure on '" + path + "'");
}

std::vector<CohortLabel> read_labels_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open labels file '" + path + "'");
    std::vector<CohortLabel> labels;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line_no == 1) continue;
        std::vector<std::string> cols;
        std::size_t start = 0;
        for (std::size_t pos; (pos = line.find(',', start)) != std::string::npos; start = pos + 1)
            cols.push_back(line.substr(start, pos - start));
        cols.push_back(line.substr(start));
        if (cols.size() != 5)
            throw std::runtime_error(path + ":" + std::to_string(line_no) + ": expected 5 columns");
        CohortLabel l;
        l.patient_id = cols[0];
        auto st = status_from_string(cols[1]);
        if (!st) throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                          ": unknown status '" + cols[1] + "'");
        l.status = *st;
        if (!cols[2].empty()) l.index_date = dates::date_or_throw(cols[2]);
        if (!cols[3].empty()) l.first_event_date = dates::date_or_throw(cols[3]);
        if (!cols[4].empty()) {
            if (cols[4] == "early_event") l.exclusion_reason = ExclusionReason::early_event;
            else if (cols[4] == "non_emergency_event_only")
                l.exclusion_reason = ExclusionReason::non_emergency_event_only;
            else if (cols[4] == "data_inconsistent")
                l.exclusion_reason = ExclusionReason::data_inconsistent;
            else
                throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                         ": unknown exclusion reason '" + cols[4] + "'");
        }
        labels.push_back(std::move(l));
    }
    return labels;
}

}  // namespace ehrseq::cohort
