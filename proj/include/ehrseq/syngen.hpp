#pragma once

// Deterministic synthetic EHR generator. Substitutes for the restricted
// source cohort: visit/code volumes are calibrated to the published
// statistics, and a risk structure is planted so that the labeling rules
// and the order-sensitivity of sequence models are both testable.
//
// Planted structure, per patient:
//   * a configurable fraction receives the index drug; the date of that
//     prescription is the patient's index date.
//   * intended cases receive an emergency-flagged outcome event 8..365 days
//     after index; an early-event fraction receives it 0..7 days after
//     index instead (those are the patients the blanking rule must drop).
//   * pre-index histories carry an ordered two-code risk pattern: cases get
//     first-then-second, controls get second-then-first, both at the same
//     rate. Marginal code frequencies are identical across classes, so the
//     pattern is invisible to bag-of-words inputs and visible to sequence
//     models.
//
// Generation is a pure function of GenConfig: one RNG substream per patient
// index, integer/comparison-only sampling decisions.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ehrseq/cohort.hpp"
#include "ehrseq/events.hpp"

#include <json.hpp>

namespace ehrseq::syngen {

struct GenConfig {
    std::uint64_t seed = 42;
    int n_patients = 1000;
    int vocab_diagnosis = 400;
    int vocab_procedure = 200;
    int vocab_prescription = 300;
    double mean_visits_per_patient = 58.3;
    double mean_codes_per_visit = 2.7;
    std::string index_drug_code = "RX_INDEX";
    std::vector<std::string> tf_marker_codes = {"DX_TF_STROKE", "DX_TF_MI", "PR_TF_STENT"};
    std::string risk_code_first = "RX_RISK_A";   // prescription half of the pattern
    std::string risk_code_second = "DX_RISK_B";  // diagnosis half of the pattern
    double case_prevalence = 0.21;         // cases / (cases + controls)
    double order_signal_strength = 0.55;   // pattern rate in labeled patients
    double early_event_rate = 0.12;        // would-be cases hit by the blanking rule
    double cohort_fraction = 0.5;          // patients that receive the index drug
    double tf_decoy_rate = 0.05;           // non-emergency outcome-coded noise in-window
    double preindex_decoy_rate = 0.03;     // emergency outcome-coded noise before index
    double unlabeled_pattern_rate = 0.5;   // pattern rate (random order) outside the cohort
    double inconsistent_rate = 0.0;        // cohort patients given an implausible record

    bool operator==(const GenConfig&) const = default;

    std::vector<std::string> validate() const;

    // Would-be-case probability among cohort members, derived so that the
    // expected case fraction among case+control equals case_prevalence.
    double would_be_case_rate() const;

    // The labeling rules the planted structure is built against.
    cohort::CohortRules derive_rules() const;
};

void to_json(nlohmann::json& j, const GenConfig& c);
void from_json(const nlohmann::json& j, GenConfig& c);

struct GroundTruthRow {
    std::string patient_id;
    std::string intended_label;  // case | control | excluded | not_in_cohort
    std::optional<dates::Day> index_date;
    std::optional<dates::Day> event_date;

    bool operator==(const GroundTruthRow&) const = default;
};

struct GenerateResult {
    std::vector<events::PatientStream> streams;  // ordered by patient id
    std::vector<GroundTruthRow> ground_truth;    // same order
};

GenerateResult generate(const GenConfig& config);

// Lossless manifest: full config echo plus derived expectations and notes.
// parse the "config" member back with from_json to recover the GenConfig.
nlohmann::json describe(const GenConfig& config);

void write_ground_truth(const std::vector<GroundTruthRow>& rows, const std::string& path);
std::vector<GroundTruthRow> read_ground_truth(const std::string& path);

}  // namespace ehrseq::syngen
