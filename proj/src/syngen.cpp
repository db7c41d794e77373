#include "ehrseq/syngen.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <stdexcept>

#include "ehrseq/rng.hpp"

namespace ehrseq::syngen {

using events::Domain;
using events::EventRecord;
using events::PatientStream;
using events::System;
using nlohmann::json;

namespace {

constexpr dates::Day kEpochStart = dates::days_from_civil(1995, 1, 1);
constexpr int kStartJitterDays = 3650;
constexpr int kSpanDays = 3800;         // per-patient observation span
constexpr int kIndexTargetOffset = 2660;  // preferred index position in the span
constexpr int kBlankingDays = 7;
constexpr int kOutcomeDays = 365;
constexpr int kMaxVisits = 2805;
constexpr int kMaxCodesPerVisit = 61;
constexpr std::size_t kPatternRecencyVisits = 40;  // plant within the last N pre-index visits
constexpr double kEmergencyNoiseRate = 0.05;

std::string pad_id(int i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "P%07d", i);
    return buf;
}

Domain marker_domain(const std::string& code) {
    if (code.rfind("PR_", 0) == 0) return Domain::procedure;
    return Domain::diagnosis;
}

System marker_system(Domain d) {
    return d == Domain::procedure ? System::OPCS4 : System::ICD10;
}

struct CodeTables {
    std::vector<std::string> diagnosis, procedure, prescription;
};

CodeTables build_code_tables(const GenConfig& c) {
    CodeTables t;
    auto fill = [](std::vector<std::string>& out, char prefix, int n) {
        out.reserve(n);
        char buf[16];
        for (int i = 0; i < n; ++i) {
            std::snprintf(buf, sizeof buf, "%c%04d", prefix, i);
            out.emplace_back(buf);
        }
    };
    fill(t.diagnosis, 'D', c.vocab_diagnosis);
    fill(t.procedure, 'P', c.vocab_procedure);
    fill(t.prescription, 'M', c.vocab_prescription);
    return t;
}

// Fixed system per code index so a code never flips coding systems.
System background_system(Domain d, int idx) {
    switch (d) {
        case Domain::diagnosis: return idx % 10 == 0 ? System::ICD9 : System::ICD10;
        case Domain::procedure: return idx % 10 == 0 ? System::OPCS3 : System::OPCS4;
        case Domain::prescription: return idx % 5 == 0 ? System::READ : System::BNF;
    }
    return System::ICD10;
}

struct PatientBuilder {
    std::vector<EventRecord> events;
    std::string pid;

    void push(dates::Day date, Domain d, System s, std::string code, bool emergency) {
        events.push_back(EventRecord{pid, date, d, s, std::move(code), emergency, "syn"});
    }
};

}  // namespace

std::vector<std::string> GenConfig::validate() const {
    std::vector<std::string> errs;
    auto rate = [&](double v, const char* name) {
        if (!(v >= 0.0 && v <= 1.0))
            errs.push_back(std::string("gen.") + name + " must be in [0,1]");
    };
    if (n_patients < 1) errs.push_back("gen.n_patients must be >= 1");
    if (vocab_diagnosis < 1) errs.push_back("gen.vocab_diagnosis must be >= 1");
    if (vocab_procedure < 1) errs.push_back("gen.vocab_procedure must be >= 1");
    if (vocab_prescription < 1) errs.push_back("gen.vocab_prescription must be >= 1");
    if (mean_visits_per_patient < 1.0) errs.push_back("gen.mean_visits_per_patient must be >= 1");
    if (mean_codes_per_visit < 1.0) errs.push_back("gen.mean_codes_per_visit must be >= 1");
    rate(case_prevalence, "case_prevalence");
    rate(order_signal_strength, "order_signal_strength");
    rate(early_event_rate, "early_event_rate");
    rate(cohort_fraction, "cohort_fraction");
    rate(tf_decoy_rate, "tf_decoy_rate");
    rate(preindex_decoy_rate, "preindex_decoy_rate");
    rate(unlabeled_pattern_rate, "unlabeled_pattern_rate");
    rate(inconsistent_rate, "inconsistent_rate");
    if (index_drug_code.empty()) errs.push_back("gen.index_drug_code is empty");
    if (tf_marker_codes.empty()) errs.push_back("gen.tf_marker_codes is empty");
    std::set<std::string> reserved;
    reserved.insert(index_drug_code);
    reserved.insert(risk_code_first);
    reserved.insert(risk_code_second);
    for (const auto& m : tf_marker_codes) reserved.insert(m);
    if (reserved.size() != tf_marker_codes.size() + 3)
        errs.push_back("gen reserved codes (index drug, markers, risk pattern) must be distinct");
    return errs;
}

double GenConfig::would_be_case_rate() const {
    const double p = case_prevalence;
    const double e = early_event_rate;
    const double denom = (1.0 - e) * (1.0 - p) + p;
    return denom > 0 ? p / denom : 0.0;
}

cohort::CohortRules GenConfig::derive_rules() const {
    cohort::CohortRules r;
    r.index_drug_codes = {index_drug_code};
    r.tf_event_codes = {tf_marker_codes.begin(), tf_marker_codes.end()};
    r.outcome_window_days = kOutcomeDays;
    r.blanking_window_days = kBlankingDays;
    r.require_emergency = true;
    return r;
}

void to_json(json& j, const GenConfig& c) {
    j = json{{"seed", c.seed},
             {"n_patients", c.n_patients},
             {"vocab_diagnosis", c.vocab_diagnosis},
             {"vocab_procedure", c.vocab_procedure},
             {"vocab_prescription", c.vocab_prescription},
             {"mean_visits_per_patient", c.mean_visits_per_patient},
             {"mean_codes_per_visit", c.mean_codes_per_visit},
             {"index_drug_code", c.index_drug_code},
             {"tf_marker_codes", c.tf_marker_codes},
             {"risk_code_first", c.risk_code_first},
             {"risk_code_second", c.risk_code_second},
             {"case_prevalence", c.case_prevalence},
             {"order_signal_strength", c.order_signal_strength},
             {"early_event_rate", c.early_event_rate},
             {"cohort_fraction", c.cohort_fraction},
             {"tf_decoy_rate", c.tf_decoy_rate},
             {"preindex_decoy_rate", c.preindex_decoy_rate},
             {"unlabeled_pattern_rate", c.unlabeled_pattern_rate},
             {"inconsistent_rate", c.inconsistent_rate}};
}

void from_json(const json& j, GenConfig& c) {
    c = GenConfig{};
    c.seed = j.value("seed", c.seed);
    c.n_patients = j.value("n_patients", c.n_patients);
    c.vocab_diagnosis = j.value("vocab_diagnosis", c.vocab_diagnosis);
    c.vocab_procedure = j.value("vocab_procedure", c.vocab_procedure);
    c.vocab_prescription = j.value("vocab_prescription", c.vocab_prescription);
    c.mean_visits_per_patient = j.value("mean_visits_per_patient", c.mean_visits_per_patient);
    c.mean_codes_per_visit = j.value("mean_codes_per_visit", c.mean_codes_per_visit);
    c.index_drug_code = j.value("index_drug_code", c.index_drug_code);
    c.tf_marker_codes = j.value("tf_marker_codes", c.tf_marker_codes);
    c.risk_code_first = j.value("risk_code_first", c.risk_code_first);
    c.risk_code_second = j.value("risk_code_second", c.risk_code_second);
    c.case_prevalence = j.value("case_prevalence", c.case_prevalence);
    c.order_signal_strength = j.value("order_signal_strength", c.order_signal_strength);
    c.early_event_rate = j.value("early_event_rate", c.early_event_rate);
    c.cohort_fraction = j.value("cohort_fraction", c.cohort_fraction);
    c.tf_decoy_rate = j.value("tf_decoy_rate", c.tf_decoy_rate);
    c.preindex_decoy_rate = j.value("preindex_decoy_rate", c.preindex_decoy_rate);
    c.unlabeled_pattern_rate = j.value("unlabeled_pattern_rate", c.unlabeled_pattern_rate);
    c.inconsistent_rate = j.value("inconsistent_rate", c.inconsistent_rate);
}

GenerateResult generate(const GenConfig& config) {
    auto errs = config.validate();
    if (!errs.empty()) {
        std::string msg = "infeasible generator config:";
        for (const auto& e : errs) msg += " " + e + ";";
        throw std::runtime_error(msg);
    }

    const CodeTables tables = build_code_tables(config);
    const double p_visits = 2.0 / (2.0 + std::max(0.0, config.mean_visits_per_patient - 1.0));
    const double p_codes = 3.0 / (3.0 + std::max(0.0, config.mean_codes_per_visit - 1.0));
    const double q_case = config.would_be_case_rate();

    GenerateResult out;
    out.streams.reserve(config.n_patients);
    out.ground_truth.reserve(config.n_patients);

    for (int pi = 0; pi < config.n_patients; ++pi) {
        auto rng = rng::Xoshiro256::substream(config.seed, std::uint64_t(pi));
        PatientBuilder b;
        b.pid = pad_id(pi);

        const bool in_cohort = rng.chance(config.cohort_fraction);
        bool inconsistent = false, would_be_case = false, early = false;
        if (in_cohort) {
            inconsistent = rng.chance(config.inconsistent_rate);
            if (!inconsistent) {
                would_be_case = rng.chance(q_case);
                if (would_be_case) early = rng.chance(config.early_event_rate);
            }
        }

        // Background visit skeleton: distinct days across the span.
        std::uint64_t n_visits =
            1 + rng.negative_binomial(2, p_visits);
        if (n_visits > kMaxVisits) n_visits = kMaxVisits;
        const dates::Day start = kEpochStart + dates::Day(rng.below(kStartJitterDays));
        std::vector<char> taken(kSpanDays, 0);
        std::vector<int> offsets;
        offsets.reserve(n_visits);
        while (offsets.size() < n_visits) {
            int d = int(rng.below(kSpanDays));
            if (!taken[d]) {
                taken[d] = 1;
                offsets.push_back(d);
            }
        }
        std::sort(offsets.begin(), offsets.end());

        // Background codes.
        for (int off : offsets) {
            std::uint64_t n_codes = 1 + rng.negative_binomial(3, p_codes);
            if (n_codes > kMaxCodesPerVisit) n_codes = kMaxCodesPerVisit;
            for (std::uint64_t k = 0; k < n_codes; ++k) {
                const double u_dom = rng.uniform01();
                Domain dom = u_dom < 0.45   ? Domain::diagnosis
                             : u_dom < 0.60 ? Domain::procedure
                                            : Domain::prescription;
                const auto& pool = dom == Domain::diagnosis   ? tables.diagnosis
                                   : dom == Domain::procedure ? tables.procedure
                                                              : tables.prescription;
                const double u = rng.uniform01();
                int idx = int(u * u * double(pool.size()));
                if (idx >= int(pool.size())) idx = int(pool.size()) - 1;
                bool emergency = dom == Domain::diagnosis && rng.chance(kEmergencyNoiseRate);
                b.push(start + off, dom, background_system(dom, idx), pool[idx], emergency);
            }
        }

        // Index date: the background visit closest to the preferred offset.
        dates::Day index_date = 0;
        if (in_cohort) {
            int best = offsets.front();
            for (int off : offsets)
                if (std::abs(off - kIndexTargetOffset) < std::abs(best - kIndexTargetOffset))
                    best = off;
            index_date = start + best;
            b.push(index_date, Domain::prescription, System::BNF, config.index_drug_code, false);
        }

        // Lands a planted event on an existing visit inside [lo, hi] when one
        // exists (keeps the visit-count calibration honest), else on `want`.
        auto place_in_window = [&](dates::Day lo, dates::Day hi, dates::Day want) {
            dates::Day best = 0;
            bool found = false;
            for (int off : offsets) {
                dates::Day d = start + off;
                if (d < lo || d > hi) continue;
                if (!found || std::abs(long(d - want)) < std::abs(long(best - want))) {
                    best = d;
                    found = true;
                }
            }
            return found ? best : want;
        };

        const dates::Day pattern_anchor =
            in_cohort ? index_date : start + kIndexTargetOffset;

        // Ordered risk pattern in the pre-index history.
        bool plant_pattern = false, pattern_forward = false;
        if (in_cohort && !inconsistent) {
            plant_pattern = rng.chance(config.order_signal_strength);
            pattern_forward = would_be_case;
        } else if (!in_cohort) {
            plant_pattern = rng.chance(config.unlabeled_pattern_rate);
            pattern_forward = rng.chance(0.5);
        }
        if (plant_pattern) {
            std::vector<dates::Day> pre;
            for (int off : offsets) {
                dates::Day d = start + off;
                if (d < pattern_anchor) pre.push_back(d);
            }
            if (pre.size() > kPatternRecencyVisits)
                pre.erase(pre.begin(), pre.end() - kPatternRecencyVisits);
            dates::Day d1, d2;
            if (pre.size() >= 2) {
                std::uint64_t i = rng.below(pre.size() - 1);
                std::uint64_t jmp = 1 + rng.below(pre.size() - 1 - i);
                d1 = pre[i];
                d2 = pre[i + jmp];
            } else {
                d2 = pattern_anchor - 1 - dates::Day(rng.below(400));
                d1 = d2 - 1 - dates::Day(rng.below(400));
            }
            const std::string& first = pattern_forward ? config.risk_code_first
                                                       : config.risk_code_second;
            const std::string& second = pattern_forward ? config.risk_code_second
                                                        : config.risk_code_first;
            auto put = [&](dates::Day d, const std::string& code) {
                Domain dom = code == config.risk_code_first ? Domain::prescription
                                                            : Domain::diagnosis;
                b.push(d, dom, dom == Domain::prescription ? System::BNF : System::ICD10,
                       code, false);
            };
            put(d1, first);
            put(d2, second);
        }

        // Outcome event and noise.
        std::optional<dates::Day> event_date;
        if (in_cohort && !inconsistent) {
            if (would_be_case) {
                dates::Day d;
                if (early) {
                    d = place_in_window(index_date, index_date + kBlankingDays,
                                        index_date + dates::Day(rng.below(kBlankingDays + 1)));
                } else {
                    dates::Day want = index_date + kBlankingDays + 1 +
                                      dates::Day(rng.below(kOutcomeDays - kBlankingDays));
                    d = place_in_window(index_date + kBlankingDays + 1,
                                        index_date + kOutcomeDays, want);
                }
                event_date = d;
                const std::string& m =
                    config.tf_marker_codes[rng.below(config.tf_marker_codes.size())];
                Domain dom = marker_domain(m);
                b.push(d, dom, marker_system(dom), m, true);
            }
            if (rng.chance(config.tf_decoy_rate)) {
                dates::Day want = index_date + kBlankingDays + 1 +
                                  dates::Day(rng.below(kOutcomeDays - kBlankingDays));
                dates::Day d = place_in_window(index_date + kBlankingDays + 1,
                                               index_date + kOutcomeDays, want);
                const std::string& m =
                    config.tf_marker_codes[rng.below(config.tf_marker_codes.size())];
                Domain dom = marker_domain(m);
                b.push(d, dom, marker_system(dom), m, false);
            }
            if (rng.chance(config.preindex_decoy_rate)) {
                dates::Day d = index_date - 30 - dates::Day(rng.below(600));
                const std::string& m =
                    config.tf_marker_codes[rng.below(config.tf_marker_codes.size())];
                Domain dom = marker_domain(m);
                b.push(d, dom, marker_system(dom), m, true);
            }
        }
        if (inconsistent) {
            // An implausibly dated record; the whole patient becomes suspect.
            b.push(dates::days_from_civil(1801, 1, 1) + dates::Day(rng.below(30)),
                   Domain::diagnosis, System::ICD10, tables.diagnosis[0], false);
        }

        std::stable_sort(b.events.begin(), b.events.end(),
                         [](const EventRecord& x, const EventRecord& y) {
                             return x.date < y.date;
                         });

        GroundTruthRow gt;
        gt.patient_id = b.pid;
        if (!in_cohort) {
            gt.intended_label = "not_in_cohort";
        } else {
            gt.index_date = index_date;
            if (inconsistent) {
                gt.intended_label = "excluded";
            } else if (!would_be_case) {
                gt.intended_label = "control";
            } else if (early) {
                gt.intended_label = "excluded";
                gt.event_date = event_date;
            } else {
                gt.intended_label = "case";
                gt.event_date = event_date;
            }
        }
        out.streams.push_back(PatientStream{b.pid, std::move(b.events)});
        out.ground_truth.push_back(std::move(gt));
    }
    return out;
}

json describe(const GenConfig& config) {
    json manifest;
    manifest["config"] = config;
    json derived;
    derived["would_be_case_rate"] = config.would_be_case_rate();
    derived["expected_case_fraction_of_labeled"] = config.case_prevalence;
    derived["expected_cohort_patients"] = config.cohort_fraction * config.n_patients;
    derived["expected_tokens_per_patient"] =
        config.mean_visits_per_patient * config.mean_codes_per_visit;
    derived["blanking_window_days"] = kBlankingDays;
    derived["outcome_window_days"] = kOutcomeDays;
    derived["index_drug_code"] = config.index_drug_code;
    derived["tf_marker_codes"] = config.tf_marker_codes;
    derived["risk_pattern"] = {
        {"first", config.risk_code_first},
        {"second", config.risk_code_second},
        {"semantics",
         "cases carry first-then-second before index; controls carry the reversed "
         "order at the same rate, so marginal code frequencies match"}};
    json notes = json::array();
    if (config.order_signal_strength == 0.0)
        notes.push_back("prediction task at chance: order_signal_strength is 0");
    if (config.cohort_fraction == 0.0)
        notes.push_back("no labeled cohort: cohort_fraction is 0");
    if (config.inconsistent_rate > 0.0)
        notes.push_back("implausibly dated records are injected for " +
                        std::to_string(config.inconsistent_rate * 100.0) +
                        "% of cohort patients");
    derived["notes"] = notes;
    manifest["derived"] = derived;
    return manifest;
}

void write_ground_truth(const std::vector<GroundTruthRow>& rows, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    for (const auto& r : rows) {
        json j;
        j["patient_id"] = r.patient_id;
        j["intended_label"] = r.intended_label;
        j["index_date"] = r.index_date ? json(dates::format_date(*r.index_date)) : json(nullptr);
        j["event_date"] = r.event_date ? json(dates::format_date(*r.event_date)) : json(nullptr);
        out << j.dump() << '\n';
    }
    if (!out) throw std::runtime_error("write failure on '" + path + "'");
}

std::vector<GroundTruthRow> read_ground_truth(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open ground truth file '" + path + "'");
    std::vector<GroundTruthRow> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        GroundTruthRow r;
        r.patient_id = j.at("patient_id").get<std::string>();
        r.intended_label = j.at("intended_label").get<std::string>();
        if (!j.at("index_date").is_null())
            r.index_date = dates::date_or_throw(j.at("index_date").get<std::string>());
        if (!j.at("event_date").is_null())
            r.event_date = dates::date_or_throw(j.at("event_date").get<std::string>());
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace ehrseq::syngen
