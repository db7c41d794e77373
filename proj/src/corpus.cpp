#include "ehrseq/corpus.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>

#include "ehrseq/rng.hpp"

namespace ehrseq::corpus {

using nlohmann::json;

std::string Modalities::slug() const {
    if (diagnosis && procedure && prescription) return "all";
    std::string s;
    auto add = [&](bool on, const char* name) {
        if (!on) return;
        if (!s.empty()) s += '+';
        s += name;
    };
    add(diagnosis, "diagnosis");
    add(procedure, "procedure");
    add(prescription, "prescription");
    return s.empty() ? "none" : s;
}

std::optional<Modalities> Modalities::parse(std::string_view slug) {
    Modalities m{false, false, false};
    if (slug == "all") return Modalities{};
    std::size_t start = 0;
    while (start <= slug.size()) {
        std::size_t pos = slug.find('+', start);
        std::string_view part = slug.substr(
            start, pos == std::string_view::npos ? std::string_view::npos : pos - start);
        if (part == "diagnosis") m.diagnosis = true;
        else if (part == "procedure") m.procedure = true;
        else if (part == "prescription") m.prescription = true;
        else return std::nullopt;
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return m;
}

namespace {
const std::string kReservedNames[kReserved] = {"[PAD]", "[UNK]", "[CLS]", "[MASK]"};
}

Vocabulary::Vocabulary(std::vector<std::string> codes, int min_frequency)
    : codes_(std::move(codes)), min_frequency_(min_frequency) {
    index_.reserve(codes_.size());
    for (std::size_t i = 0; i < codes_.size(); ++i) {
        auto [it, fresh] = index_.try_emplace(codes_[i], int(i) + kReserved);
        if (!fresh) throw std::runtime_error("duplicate code in vocabulary: " + codes_[i]);
    }
}

const std::string& Vocabulary::decode(int id) const {
    if (id >= 0 && id < kReserved) return kReservedNames[id];
    const std::size_t i = std::size_t(id) - kReserved;
    if (i >= codes_.size()) throw std::out_of_range("token id out of range: " + std::to_string(id));
    return codes_[i];
}

std::uint64_t Vocabulary::hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& c : codes_) {
        h ^= rng::fnv1a64(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

json Vocabulary::to_json() const {
    return json{{"codes", codes_}, {"min_frequency", min_frequency_}};
}

Vocabulary Vocabulary::from_json(const json& j) {
    return Vocabulary(j.at("codes").get<std::vector<std::string>>(),
                      j.value("min_frequency", 1));
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out << to_json().dump(2) << '\n';
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open vocabulary file '" + path + "'");
    return from_json(json::parse(in));
}

const char* to_string(Task t) {
    switch (t) {
        case Task::detection: return "detection";
        case Task::prediction: return "prediction";
        case Task::pretrain: return "pretrain";
    }
    return "?";
}

std::optional<Task> task_from_string(std::string_view s) {
    if (s == "detection") return Task::detection;
    if (s == "prediction") return Task::prediction;
    if (s == "pretrain") return Task::pretrain;
    return std::nullopt;
}

std::vector<Visit> assemble_visits(const events::PatientStream& stream) {
    std::vector<Visit> visits;
    for (std::size_t i = 1; i < stream.events.size(); ++i)
        if (stream.events[i].date < stream.events[i - 1].date)
            throw std::runtime_error("stream for patient '" + stream.patient_id +
                                     "' is not sorted by date");
    for (const auto& e : stream.events) {
        if (visits.empty() || visits.back().date != e.date)
            visits.push_back(Visit{e.date, {}});
        visits.back().codes.push_back(e.code);
    }
    return visits;
}

events::PatientStream window(const events::PatientStream& stream,
                             const cohort::CohortLabel& label, Task task,
                             int detection_horizon_days) {
    if (task == Task::pretrain) return stream;
    if (!label.index_date)
        throw std::runtime_error("window: label for patient '" + stream.patient_id +
                                 "' has no index date");
    events::PatientStream out;
    out.patient_id = stream.patient_id;
    const dates::Day index = *label.index_date;
    const dates::Day horizon = index + detection_horizon_days;
    for (const auto& e : stream.events) {
        const bool keep = task == Task::prediction ? e.date < index : e.date <= horizon;
        if (keep) out.events.push_back(e);
    }
    return out;
}

std::vector<std::string> flatten(const std::vector<Visit>& visits) {
    std::vector<std::string> out;
    for (const auto& v : visits) out.insert(out.end(), v.codes.begin(), v.codes.end());
    return out;
}

Vocabulary build_vocab(const std::vector<events::PatientStream>& streams,
                       const Modalities& modalities, int min_frequency) {
    std::map<std::string, std::size_t> freq;  // ordered for deterministic ties
    for (const auto& s : streams)
        for (const auto& e : s.events)
            if (modalities.contains(e.domain)) ++freq[e.code];

    std::vector<std::pair<std::string, std::size_t>> entries;
    for (auto& [code, n] : freq)
        if (n >= std::size_t(std::max(1, min_frequency))) entries.emplace_back(code, n);
    if (entries.empty())
        throw std::runtime_error("build_vocab: no code meets min_frequency=" +
                                 std::to_string(min_frequency) + " for modalities '" +
                                 modalities.slug() + "'");
    std::stable_sort(entries.begin(), entries.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> codes;
    codes.reserve(entries.size());
    for (auto& [code, n] : entries) codes.push_back(code);
    return Vocabulary(std::move(codes), min_frequency);
}

namespace {

CodeSequence encode_stream(const events::PatientStream& windowed, Task task, int label,
                           const Vocabulary& vocab, const EncodeOptions& opt) {
    events::PatientStream filtered;
    filtered.patient_id = windowed.patient_id;
    for (const auto& e : windowed.events)
        if (opt.modalities.contains(e.domain)) filtered.events.push_back(e);

    std::vector<std::string> codes = flatten(assemble_visits(filtered));

    CodeSequence seq;
    seq.patient_id = windowed.patient_id;
    seq.task = task;
    seq.label = label;
    const std::size_t keep = std::size_t(std::max(0, opt.max_len));
    const std::size_t begin = codes.size() > keep ? codes.size() - keep : 0;
    seq.token_ids.reserve(codes.size() - begin);
    for (std::size_t i = begin; i < codes.size(); ++i) {
        if (!opt.masked_codes.empty() && opt.masked_codes.count(codes[i]))
            seq.token_ids.push_back(kUnk);
        else
            seq.token_ids.push_back(vocab.encode(codes[i]));
    }
    return seq;
}

}  // namespace

CodeSequence encode(const events::PatientStream& stream, const cohort::CohortLabel& label,
                    Task task, const Vocabulary& vocab, const EncodeOptions& opt) {
    if (label.status != cohort::Status::case_ && label.status != cohort::Status::control)
        throw std::runtime_error("encode: patient '" + stream.patient_id +
                                 "' is not a case or control");
    const int y = label.status == cohort::Status::case_ ? 1 : 0;
    return encode_stream(window(stream, label, task, opt.detection_horizon_days), task, y,
                         vocab, opt);
}

CodeSequence encode_unlabeled(const events::PatientStream& stream, const Vocabulary& vocab,
                              const EncodeOptions& opt) {
    return encode_stream(stream, Task::pretrain, -1, vocab, opt);
}

std::string hash_patient_ids(std::vector<std::string> ids) {
    std::sort(ids.begin(), ids.end());
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& id : ids) {
        h ^= rng::fnv1a64(id);
        h *= 0x100000001b3ULL;
    }
    char buf[24];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

Split split(const std::vector<CodeSequence>& sequences, const SplitSpec& spec) {
    if (sequences.size() < 5)
        throw std::runtime_error("split: need at least 5 sequences, got " +
                                 std::to_string(sequences.size()));
    if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) ||
        !(spec.val_fraction >= 0.0 && spec.val_fraction < 1.0))
        throw std::runtime_error("split: fractions out of range");

    struct Ranked {
        std::uint64_t key;
        std::size_t idx;
    };
    std::vector<Ranked> ranked;
    ranked.reserve(sequences.size());
    for (std::size_t i = 0; i < sequences.size(); ++i)
        ranked.push_back({rng::mix64(spec.seed ^ rng::fnv1a64(sequences[i].patient_id)), i});
    std::sort(ranked.begin(), ranked.end(), [&](const Ranked& a, const Ranked& b) {
        if (a.key != b.key) return a.key < b.key;
        return sequences[a.idx].patient_id < sequences[b.idx].patient_id;
    });

    const std::size_t n = ranked.size();
    const std::size_t n_test = std::size_t(double(n) * (1.0 - spec.train_fraction) + 0.5);
    Split out;
    std::vector<std::size_t> train_pool;
    for (std::size_t r = 0; r < n; ++r)
        (r < n_test ? out.test : train_pool).push_back(ranked[r].idx);

    // Second, independent ranking for the validation carve-out.
    std::vector<Ranked> ranked2;
    ranked2.reserve(train_pool.size());
    for (std::size_t idx : train_pool)
        ranked2.push_back(
            {rng::mix64(~spec.seed ^ rng::fnv1a64(sequences[idx].patient_id)), idx});
    std::sort(ranked2.begin(), ranked2.end(), [&](const Ranked& a, const Ranked& b) {
        if (a.key != b.key) return a.key < b.key;
        return sequences[a.idx].patient_id < sequences[b.idx].patient_id;
    });
    const std::size_t n_val = std::size_t(double(train_pool.size()) * spec.val_fraction + 0.5);
    for (std::size_t r = 0; r < ranked2.size(); ++r)
        (r < n_val ? out.val : out.train).push_back(ranked2[r].idx);

    std::sort(out.train.begin(), out.train.end());
    std::sort(out.val.begin(), out.val.end());
    std::sort(out.test.begin(), out.test.end());

    std::vector<std::string> test_ids;
    test_ids.reserve(out.test.size());
    for (std::size_t idx : out.test) test_ids.push_back(sequences[idx].patient_id);
    out.test_hash = hash_patient_ids(std::move(test_ids));
    return out;
}

BowMatrix bag_of_words(const std::vector<CodeSequence>& sequences, const Vocabulary& vocab) {
    BowMatrix m;
    m.rows = sequences.size();
    m.cols = std::size_t(vocab.size());
    m.values.assign(m.rows * m.cols, 0.0f);
    m.patient_ids.reserve(m.rows);
    for (std::size_t r = 0; r < m.rows; ++r) {
        m.patient_ids.push_back(sequences[r].patient_id);
        for (int id : sequences[r].token_ids) {
            if (id == kPad || id == kCls || id == kMask) continue;
            if (id < 0 || std::size_t(id) >= m.cols)
                throw std::runtime_error("bag_of_words: token id out of range");
            m.values[r * m.cols + std::size_t(id)] += 1.0f;
        }
    }
    return m;
}

void write_sequences(const std::vector<CodeSequence>& sequences, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    for (const auto& s : sequences) {
        json j;
        j["patient_id"] = s.patient_id;
        j["task"] = to_string(s.task);
        j["label"] = s.label;
        j["token_ids"] = s.token_ids;
        out << j.dump() << '\n';
    }
    if (!out) throw std::runtime_error("write failure on '" + path + "'");
}

std::vector<CodeSequence> read_sequences(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open dataset file '" + path + "'");
    std::vector<CodeSequence> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        CodeSequence s;
        s.patient_id = j.at("patient_id").get<std::string>();
        auto t = task_from_string(j.at("task").get<std::string>());
        if (!t) throw std::runtime_error("unknown task in '" + path + "'");
        s.task = *t;
        s.label = j.at("label").get<int>();
        s.token_ids = j.at("token_ids").get<std::vector<int>>();
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace ehrseq::corpus
