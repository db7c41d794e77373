#pragma once

// Canonical data model for coded clinical events and the patient streams
// built from them, plus the JSONL/CSV ingestion and emission paths.
//
// File schemas (documented, bit-exact):
//   JSONL, one event per line:
//     {"patient_id": str, "date": "YYYY-MM-DD",
//      "domain": "diagnosis|procedure|prescription",
//      "system": "ICD9|ICD10|OPCS3|OPCS4|READ|BNF",
//      "code": str, "emergency_admission": bool, "source_tag": str}
//   CSV, comma separated, UTF-8, first line header, columns in that order,
//   booleans "true"/"false". No quoting: fields may not contain commas,
//   whitespace or newlines (enforced at ingest and at emit).

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ehrseq/dates.hpp"

namespace ehrseq::events {

enum class Domain { diagnosis, procedure, prescription };
enum class System { ICD9, ICD10, OPCS3, OPCS4, READ, BNF };

const char* to_string(Domain d);
const char* to_string(System s);
std::optional<Domain> domain_from_string(std::string_view s);
std::optional<System> system_from_string(std::string_view s);

// diagnosis -> ICD9/ICD10, procedure -> OPCS3/OPCS4, prescription -> READ/BNF
bool domain_system_consistent(Domain d, System s);

struct EventRecord {
    std::string patient_id;
    dates::Day date = 0;
    Domain domain = Domain::diagnosis;
    System system = System::ICD10;
    std::string code;
    bool emergency_admission = false;  // meaningful for hospital admissions
    std::string source_tag;

    bool operator==(const EventRecord&) const = default;
};

// All events of one patient, sorted ascending by date; ties keep ingestion
// order (stable sort). Immutable after construction by convention.
struct PatientStream {
    std::string patient_id;
    std::vector<EventRecord> events;

    bool operator==(const PatientStream&) const = default;
};

enum class FileFormat { jsonl, csv };

struct RowError {
    std::size_t line = 0;  // 1-based line number in the source file
    std::string message;
};

struct IngestResult {
    std::vector<PatientStream> streams;  // sorted by patient_id
    std::vector<RowError> rejected;
    std::size_t rows_seen = 0;

    std::size_t events_total() const {
        std::size_t n = 0;
        for (const auto& s : streams) n += s.events.size();
        return n;
    }
};

// Parses the whole file; malformed rows are collected (with line numbers),
// valid rows become per-patient streams. An empty file is an empty result.
// Throws only if the file itself cannot be read.
IngestResult ingest(const std::string& path, FileFormat format);

// Inverse of ingest: ingest(emit(S)) == S field for field. Throws on I/O
// failure or on fields that cannot be represented in the target format.
void emit(const std::vector<PatientStream>& streams, const std::string& path,
          FileFormat format);

// Validation shared with the generator: returns an error message, or empty
// if the record satisfies every EventRecord invariant.
std::string validate_record(const EventRecord& e);

struct StreamStats {
    std::size_t n_subjects = 0;
    std::size_t n_subjects_with_visits = 0;
    std::size_t n_visits = 0;        // distinct (patient, date) pairs
    std::size_t n_unique_codes = 0;
    double visits_per_subject_mean = 0;
    double visits_per_subject_median = 0;
    std::size_t visits_per_subject_max = 0;
    std::size_t visits_per_subject_min = 0;
    double codes_per_visit_mean = 0;
    double codes_per_visit_median = 0;
    std::size_t codes_per_visit_max = 0;
    std::size_t codes_per_visit_min = 0;
    bool empty = false;  // set when there is nothing to average over
};

// Visits are distinct (patient, date) pairs. Per-subject figures are over
// subjects with at least one visit.
StreamStats summarize(const std::vector<PatientStream>& streams);

}  // namespace ehrseq::events
