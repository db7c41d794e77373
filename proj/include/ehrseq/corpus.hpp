#pragma once

// Turns labeled patient streams into model-ready token sequences:
// task windowing, modality filtering, visit grouping, flattening,
// tokenization, truncation and dataset splitting.
//
// Stored sequences carry real tokens only (most recent max_len of them);
// batching pads on the left so the final position is always the most
// recent real token. Excluded / not-in-cohort patients never reach any
// model input.

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ehrseq/cohort.hpp"
#include "ehrseq/events.hpp"

#include <json.hpp>

namespace ehrseq::corpus {

// Reserved token ids. Ids of real codes start at kReserved.
inline constexpr int kPad = 0;
inline constexpr int kUnk = 1;
inline constexpr int kCls = 2;
inline constexpr int kMask = 3;
inline constexpr int kReserved = 4;

struct Modalities {
    bool diagnosis = true;
    bool procedure = true;
    bool prescription = true;

    bool operator==(const Modalities&) const = default;
    bool contains(events::Domain d) const {
        switch (d) {
            case events::Domain::diagnosis: return diagnosis;
            case events::Domain::procedure: return procedure;
            case events::Domain::prescription: return prescription;
        }
        return false;
    }
    bool any() const { return diagnosis || procedure || prescription; }
    // Canonical slug, e.g. "diagnosis+prescription" or "all".
    std::string slug() const;
    static std::optional<Modalities> parse(std::string_view slug);
};

class Vocabulary {
public:
    Vocabulary() = default;
    // codes in id order (id = position + kReserved)
    explicit Vocabulary(std::vector<std::string> codes, int min_frequency = 1);

    int size() const { return int(codes_.size()) + kReserved; }
    int min_frequency() const { return min_frequency_; }
    const std::vector<std::string>& codes() const { return codes_; }

    int encode(const std::string& code) const {
        auto it = index_.find(code);
        return it == index_.end() ? kUnk : it->second;
    }
    // Reserved ids map to bracket names, e.g. "[PAD]".
    const std::string& decode(int id) const;

    bool operator==(const Vocabulary& o) const {
        return codes_ == o.codes_ && min_frequency_ == o.min_frequency_;
    }

    std::uint64_t hash() const;  // stable content hash of the ordered code list

    nlohmann::json to_json() const;
    static Vocabulary from_json(const nlohmann::json& j);
    void save(const std::string& path) const;
    static Vocabulary load(const std::string& path);

private:
    std::vector<std::string> codes_;
    std::unordered_map<std::string, int> index_;
    int min_frequency_ = 1;
};

enum class Task { detection, prediction, pretrain };
const char* to_string(Task t);
std::optional<Task> task_from_string(std::string_view s);

struct CodeSequence {
    std::string patient_id;
    std::vector<int> token_ids;  // length <= max_len, oldest first
    int label = -1;              // 1 case, 0 control, -1 unlabeled
    Task task = Task::detection;

    bool operator==(const CodeSequence&) const = default;
};

struct Visit {
    dates::Day date = 0;
    std::vector<std::string> codes;  // stream order within the visit
};

// One visit per distinct date; requires a sorted stream.
std::vector<Visit> assemble_visits(const events::PatientStream& stream);

// Task windows relative to the label's index date: prediction keeps events
// strictly before index, detection keeps events up to index + horizon days.
events::PatientStream window(const events::PatientStream& stream,
                             const cohort::CohortLabel& label, Task task,
                             int detection_horizon_days = 365);

std::vector<std::string> flatten(const std::vector<Visit>& visits);

// Frequencies are counted over the selected modalities of the given streams;
// ids are assigned by descending frequency, ties broken lexicographically.
// Throws if every code is filtered out.
Vocabulary build_vocab(const std::vector<events::PatientStream>& streams,
                       const Modalities& modalities, int min_frequency = 1);

struct EncodeOptions {
    Modalities modalities;
    int max_len = 512;
    int detection_horizon_days = 365;
    // Codes replaced by UNK at encode time (the optional index-event mask
    // for leakage experiments). Off by default.
    std::set<std::string> masked_codes;
};

// window -> modality filter -> visits -> flatten -> tokenize -> keep the
// most recent max_len tokens.
CodeSequence encode(const events::PatientStream& stream, const cohort::CohortLabel& label,
                    Task task, const Vocabulary& vocab, const EncodeOptions& opt);

// Full-history encoding for patients without labels (pre-training corpus).
CodeSequence encode_unlabeled(const events::PatientStream& stream, const Vocabulary& vocab,
                              const EncodeOptions& opt);

struct SplitSpec {
    std::uint64_t seed = 1;
    double train_fraction = 0.8;  // rest is test
    double val_fraction = 0.2;    // carved out of train
};

struct Split {
    std::vector<std::size_t> train, val, test;  // indices into the input
    std::string test_hash;                      // stable hash of test patient ids
};

// Membership is decided by ranking patients on a per-patient hash of
// (seed, patient_id); group sizes are exact to the requested fractions
// (+-1), and the same spec over the same patient set yields the same test
// membership for every task and modality subset.
Split split(const std::vector<CodeSequence>& sequences, const SplitSpec& spec);

std::string hash_patient_ids(std::vector<std::string> ids);

struct BowMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;            // vocabulary size
    std::vector<float> values;       // row-major counts
    std::vector<std::string> patient_ids;

    float at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

// Token counts over exactly the token lists the sequence models see.
// Reserved ids (PAD/UNK/CLS/MASK) contribute no counts except UNK, which is
// counted at its own column so both model families see the same mass.
BowMatrix bag_of_words(const std::vector<CodeSequence>& sequences, const Vocabulary& vocab);

// Dataset persistence: JSONL {"patient_id","task","label","token_ids"}.
void write_sequences(const std::vector<CodeSequence>& sequences, const std::string& path);
std::vector<CodeSequence> read_sequences(const std::string& path);

}  // namespace ehrseq::corpus
