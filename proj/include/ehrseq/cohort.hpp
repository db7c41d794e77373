#pragma once

// Rule-based treatment-failure labeling. A patient's index date is the date
// of their very first index-drug prescription. Qualifying outcome events are
// events carrying one of the outcome codes, admitted through the emergency
// room (emergency_admission flag) when require_emergency is set. Windows are
// integer day arithmetic on the index date:
//
//   blanking window  [index, index + blanking_window_days]   -> excluded
//   outcome window   (index + blanking_window_days,
//                     index + outcome_window_days]           -> case
//
// Blanking is evaluated before the outcome scan: any qualifying event inside
// the blanking window excludes the patient even when later events exist.

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ehrseq/events.hpp"

#include <json.hpp>

namespace ehrseq::cohort {

struct CohortRules {
    std::set<std::string> index_drug_codes;
    std::set<std::string> tf_event_codes;
    int outcome_window_days = 365;
    int blanking_window_days = 7;
    bool require_emergency = true;

    // Empty string when valid, else a description of the violation.
    std::string validate() const;

    static CohortRules from_json_file(const std::string& path);
    void to_json_file(const std::string& path) const;
};

// Absent fields keep their defaults.
void to_json(nlohmann::json& j, const CohortRules& r);
void from_json(const nlohmann::json& j, CohortRules& r);

enum class Status { case_, control, excluded, not_in_cohort };
enum class ExclusionReason { early_event, non_emergency_event_only, data_inconsistent };

const char* to_string(Status s);
const char* to_string(ExclusionReason r);
std::optional<Status> status_from_string(std::string_view s);

struct CohortLabel {
    std::string patient_id;
    Status status = Status::not_in_cohort;
    std::optional<dates::Day> index_date;
    std::optional<dates::Day> first_event_date;
    std::optional<ExclusionReason> exclusion_reason;
    // Non-fatal observations, e.g. an outcome-coded event that was ignored
    // because it was not an emergency admission. Not part of the CSV schema.
    std::vector<std::string> diagnostics;
};

// Event dates outside this range mark the whole patient as data_inconsistent
// (only patients that are otherwise cohort candidates can be excluded).
constexpr dates::Day kSaneDateMin = dates::days_from_civil(1900, 1, 1);
constexpr dates::Day kSaneDateMax = dates::days_from_civil(2199, 12, 31);

// Pure function of (stream, rules). Throws if the stream is not sorted.
CohortLabel annotate(const events::PatientStream& stream, const CohortRules& rules);

struct CohortSummary {
    std::size_t n_case = 0;
    std::size_t n_control = 0;
    std::size_t n_excluded = 0;
    std::size_t n_not_in_cohort = 0;
    std::size_t n_excluded_early = 0;
    std::size_t n_excluded_inconsistent = 0;

    std::size_t total() const { return n_case + n_control + n_excluded + n_not_in_cohort; }
};

struct AnnotateResult {
    std::vector<CohortLabel> labels;  // ordered by patient_id
    CohortSummary summary;
};

AnnotateResult annotate_all(const std::vector<events::PatientStream>& streams,
                            const CohortRules& rules);

// CSV: patient_id,status,index_date,first_event_date,exclusion_reason
void write_labels_csv(const std::vector<CohortLabel>& labels, const std::string& path);
std::vector<CohortLabel> read_labels_csv(const std::string& path);

}  // namespace ehrseq::cohort
