#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <set>

#include "ehrseq/corpus.hpp"

using namespace ehrseq;
using events::Domain;
using events::System;

namespace {

events::EventRecord ev(dates::Day day, Domain d, const std::string& code) {
    events::EventRecord e;
    e.patient_id = "P1";
    e.date = day;
    e.domain = d;
    e.system = d == Domain::prescription ? System::BNF
             : d == Domain::procedure    ? System::OPCS4
                                         : System::ICD10;
    e.code = code;
    return e;
}

events::PatientStream stream(std::vector<events::EventRecord> evs,
                             const std::string& pid = "P1") {
    events::PatientStream s;
    s.patient_id = pid;
    std::stable_sort(evs.begin(), evs.end(),
                     [](const auto& a, const auto& b) { return a.date < b.date; });
    for (auto& e : evs) e.patient_id = pid;
    s.events = std::move(evs);
    return s;
}

cohort::CohortLabel label_at(dates::Day index, bool is_case = false) {
    cohort::CohortLabel l;
    l.patient_id = "P1";
    l.status = is_case ? cohort::Status::case_ : cohort::Status::control;
    l.index_date = index;
    return l;
}

}  // namespace

TEST_CASE("visits group events by distinct date") {
    auto visits = corpus::assemble_visits(stream({ev(5, Domain::diagnosis, "A"),
                                                  ev(5, Domain::diagnosis, "B"),
                                                  ev(9, Domain::diagnosis, "C")}));
    REQUIRE(visits.size() == 2);
    CHECK(visits[0].date == 5);
    CHECK(visits[0].codes == std::vector<std::string>{"A", "B"});
    CHECK(visits[1].codes == std::vector<std::string>{"C"});
}

TEST_CASE("no events, no visits") {
    CHECK(corpus::assemble_visits(events::PatientStream{"P1", {}}).empty());
}

TEST_CASE("visit sizes conserve the event count") {
    std::vector<events::EventRecord> evs;
    for (int i = 0; i < 1000; ++i) evs.push_back(ev(i / 3, Domain::diagnosis, "C"));
    auto visits = corpus::assemble_visits(stream(std::move(evs)));
    std::size_t total = 0;
    for (const auto& v : visits) total += v.codes.size();
    CHECK(total == 1000);
}

TEST_CASE("task windows cut at the index date") {
    auto s = stream({ev(-10, Domain::diagnosis, "A"), ev(0, Domain::diagnosis, "B"),
                     ev(50, Domain::diagnosis, "C"), ev(400, Domain::diagnosis, "D")});
    auto lab = label_at(0);

    auto pred = corpus::window(s, lab, corpus::Task::prediction);
    REQUIRE(pred.events.size() == 1);
    CHECK(pred.events[0].code == "A");

    auto det = corpus::window(s, lab, corpus::Task::detection);
    REQUIRE(det.events.size() == 3);
    CHECK(det.events[2].code == "C");

    auto pre = corpus::window(s, lab, corpus::Task::pretrain);
    CHECK(pre.events.size() == 4);
}

TEST_CASE("windowing needs an index date for labeled tasks") {
    auto s = stream({ev(0, Domain::diagnosis, "A")});
    cohort::CohortLabel lab;
    lab.status = cohort::Status::control;
    CHECK_THROWS(corpus::window(s, lab, corpus::Task::prediction));
}

TEST_CASE("flatten preserves visit order") {
    std::vector<corpus::Visit> visits{{1, {"a", "b"}}, {2, {"c"}}};
    CHECK(corpus::flatten(visits) == std::vector<std::string>{"a", "b", "c"});
    CHECK(corpus::flatten({corpus::Visit{1, {}}}).empty());
    CHECK(corpus::flatten({}).empty());
}

TEST_CASE("vocabulary drops codes under the frequency floor") {
    auto s = stream({ev(0, Domain::diagnosis, "x"), ev(1, Domain::diagnosis, "x"),
                     ev(2, Domain::diagnosis, "x"), ev(3, Domain::diagnosis, "y")});
    auto vocab = corpus::build_vocab({s}, corpus::Modalities{}, 2);
    CHECK(vocab.encode("x") == corpus::kReserved);
    CHECK(vocab.encode("y") == corpus::kUnk);
    CHECK(vocab.size() == corpus::kReserved + 1);
}

TEST_CASE("vocabulary ids follow frequency then lexicographic order") {
    auto s = stream({ev(0, Domain::diagnosis, "c"), ev(1, Domain::diagnosis, "c"),
                     ev(2, Domain::diagnosis, "c"), ev(3, Domain::diagnosis, "b"),
                     ev(4, Domain::diagnosis, "b"), ev(5, Domain::diagnosis, "a"),
                     ev(6, Domain::diagnosis, "a")});
    auto vocab = corpus::build_vocab({s}, corpus::Modalities{}, 1);
    CHECK(vocab.encode("c") == corpus::kReserved + 0);
    CHECK(vocab.encode("a") == corpus::kReserved + 1);  // ties break lexicographically
    CHECK(vocab.encode("b") == corpus::kReserved + 2);
    CHECK(vocab.decode(corpus::kReserved + 0) == "c");
    CHECK(vocab.decode(corpus::kPad) == "[PAD]");
    CHECK(vocab.decode(corpus::kMask) == "[MASK]");
}

TEST_CASE("modalities restrict the vocabulary") {
    auto s = stream({ev(0, Domain::diagnosis, "DX"), ev(1, Domain::prescription, "RX")});
    corpus::Modalities dx_only{true, false, false};
    auto vocab = corpus::build_vocab({s}, dx_only, 1);
    CHECK(vocab.encode("DX") != corpus::kUnk);
    CHECK(vocab.encode("RX") == corpus::kUnk);
    CHECK_THROWS(corpus::build_vocab({s}, corpus::Modalities{false, true, false}, 1));
}

TEST_CASE("two builds over the same corpus agree") {
    auto s = stream({ev(0, Domain::diagnosis, "m"), ev(1, Domain::procedure, "n"),
                     ev(2, Domain::prescription, "o")});
    auto a = corpus::build_vocab({s}, corpus::Modalities{}, 1);
    auto b = corpus::build_vocab({s}, corpus::Modalities{}, 1);
    CHECK(a == b);
    CHECK(a.hash() == b.hash());
}

TEST_CASE("encoding keeps the most recent max_len tokens") {
    std::vector<events::EventRecord> evs;
    for (int i = 0; i < 600; ++i) evs.push_back(ev(i, Domain::diagnosis, "C" + std::to_string(i)));
    auto s = stream(std::move(evs));
    auto vocab = corpus::build_vocab({s}, corpus::Modalities{}, 1);
    corpus::EncodeOptions opt;
    auto lab = label_at(10000);
    auto seq = corpus::encode(s, lab, corpus::Task::prediction, vocab, opt);
    REQUIRE(seq.token_ids.size() == 512);
    CHECK(seq.token_ids.front() == vocab.encode("C88"));  // 600 - 512 dropped from the front
    CHECK(seq.token_ids.back() == vocab.encode("C599"));
    CHECK(seq.label == 0);
}

TEST_CASE("unknown codes encode as UNK in place") {
    auto s = stream({ev(0, Domain::diagnosis, "known"), ev(1, Domain::diagnosis, "novel")});
    auto vocab = corpus::Vocabulary({"known"});
    auto seq = corpus::encode(s, label_at(10, true), corpus::Task::prediction, vocab, {});
    REQUIRE(seq.token_ids.size() == 2);
    CHECK(seq.token_ids[0] == vocab.encode("known"));
    CHECK(seq.token_ids[1] == corpus::kUnk);
    CHECK(seq.label == 1);
}

TEST_CASE("an off-modality history encodes to an empty sequence") {
    auto s = stream({ev(0, Domain::diagnosis, "DX")});
    auto vocab = corpus::Vocabulary({"DX"});
    corpus::EncodeOptions opt;
    opt.modalities = corpus::Modalities{false, false, true};
    auto seq = corpus::encode(s, label_at(10), corpus::Task::prediction, vocab, opt);
    CHECK(seq.token_ids.empty());  // padded at batch time, never stored
}

TEST_CASE("a patient with no pre-index history is kept") {
    auto s = stream({ev(20, Domain::diagnosis, "DX")});
    auto vocab = corpus::Vocabulary({"DX"});
    auto seq = corpus::encode(s, label_at(10), corpus::Task::prediction, vocab, {});
    CHECK(seq.token_ids.empty());
    CHECK(seq.patient_id == "P1");
}

TEST_CASE("masked codes are hidden at encode time") {
    auto s = stream({ev(0, Domain::prescription, "RX_IDX"), ev(1, Domain::diagnosis, "DX")});
    auto vocab = corpus::Vocabulary({"DX", "RX_IDX"});
    corpus::EncodeOptions opt;
    opt.masked_codes = {"RX_IDX"};
    auto seq = corpus::encode(s, label_at(10), corpus::Task::detection, vocab, opt);
    REQUIRE(seq.token_ids.size() == 2);
    CHECK(seq.token_ids[0] == corpus::kUnk);
    CHECK(seq.token_ids[1] == vocab.encode("DX"));
}

TEST_CASE("encode refuses excluded patients") {
    auto s = stream({ev(0, Domain::diagnosis, "DX")});
    auto vocab = corpus::Vocabulary({"DX"});
    cohort::CohortLabel lab;
    lab.status = cohort::Status::excluded;
    lab.index_date = 0;
    CHECK_THROWS(corpus::encode(s, lab, corpus::Task::detection, vocab, {}));
}

TEST_CASE("split sizes follow the 64/16/20 rule") {
    std::vector<corpus::CodeSequence> seqs(100);
    for (int i = 0; i < 100; ++i) seqs[i].patient_id = "P" + std::to_string(i);
    auto sp = corpus::split(seqs, {.seed = 9});
    CHECK(sp.train.size() == 64);
    CHECK(sp.val.size() == 16);
    CHECK(sp.test.size() == 20);

    std::set<std::size_t> all(sp.train.begin(), sp.train.end());
    all.insert(sp.val.begin(), sp.val.end());
    all.insert(sp.test.begin(), sp.test.end());
    CHECK(all.size() == 100);  // disjoint and exhaustive

    auto sp2 = corpus::split(seqs, {.seed = 9});
    CHECK(sp2.test == sp.test);
    CHECK(sp2.train == sp.train);
    CHECK(sp2.test_hash == sp.test_hash);

    auto sp3 = corpus::split(seqs, {.seed = 10});
    CHECK(sp3.test != sp.test);
}

TEST_CASE("test membership is per-patient, independent of input order") {
    std::vector<corpus::CodeSequence> seqs(50);
    for (int i = 0; i < 50; ++i) seqs[i].patient_id = "P" + std::to_string(i);
    auto sp = corpus::split(seqs, {.seed = 4});
    std::set<std::string> test_ids;
    for (auto i : sp.test) test_ids.insert(seqs[i].patient_id);

    std::reverse(seqs.begin(), seqs.end());
    auto sp_rev = corpus::split(seqs, {.seed = 4});
    std::set<std::string> test_ids_rev;
    for (auto i : sp_rev.test) test_ids_rev.insert(seqs[i].patient_id);
    CHECK(test_ids == test_ids_rev);
    CHECK(sp.test_hash == sp_rev.test_hash);
}

TEST_CASE("bag of words counts tokens") {
    corpus::Vocabulary vocab({"a", "b"});
    corpus::CodeSequence s;
    s.patient_id = "P1";
    s.token_ids = {vocab.encode("a"), vocab.encode("a"), vocab.encode("b")};
    auto m = corpus::bag_of_words({s}, vocab);
    REQUIRE(m.rows == 1);
    REQUIRE(m.cols == std::size_t(vocab.size()));
    CHECK(m.at(0, std::size_t(vocab.encode("a"))) == 2.0f);
    CHECK(m.at(0, std::size_t(vocab.encode("b"))) == 1.0f);
    CHECK(m.at(0, corpus::kPad) == 0.0f);

    double row_sum = 0;
    for (std::size_t c = 0; c < m.cols; ++c) row_sum += m.at(0, c);
    CHECK(row_sum == doctest::Approx(double(s.token_ids.size())));
}

TEST_CASE("unknown tokens keep their mass in the bag") {
    corpus::Vocabulary vocab({"a"});
    corpus::CodeSequence s;
    s.token_ids = {corpus::kUnk, corpus::kUnk, vocab.encode("a")};
    auto m = corpus::bag_of_words({s}, vocab);
    CHECK(m.at(0, corpus::kUnk) == 2.0f);
    double row_sum = 0;
    for (std::size_t c = 0; c < m.cols; ++c) row_sum += m.at(0, c);
    CHECK(row_sum == doctest::Approx(3.0));
}

TEST_CASE("sequences round-trip through jsonl") {
    std::vector<corpus::CodeSequence> seqs(2);
    seqs[0].patient_id = "P1";
    seqs[0].token_ids = {4, 5, 6};
    seqs[0].label = 1;
    seqs[0].task = corpus::Task::detection;
    seqs[1].patient_id = "P2";
    seqs[1].token_ids = {};
    seqs[1].label = -1;
    seqs[1].task = corpus::Task::pretrain;
    auto path = std::string("ehrseq_test_seqs.jsonl");
    corpus::write_sequences(seqs, path);
    auto back = corpus::read_sequences(path);
    CHECK(back == seqs);
    std::remove(path.c_str());
}

TEST_CASE("vocabulary persists") {
    corpus::Vocabulary vocab({"z", "q", "m"}, 3);
    auto path = std::string("ehrseq_test_vocab.json");
    vocab.save(path);
    auto back = corpus::Vocabulary::load(path);
    CHECK(back == vocab);
    CHECK(back.encode("q") == vocab.encode("q"));
    CHECK(back.min_frequency() == 3);
    std::remove(path.c_str());
}

TEST_CASE("modality slugs round trip") {
    corpus::Modalities all;
    CHECK(all.slug() == "all");
    corpus::Modalities dp{true, false, true};
    CHECK(dp.slug() == "diagnosis+prescription");
    CHECK(*corpus::Modalities::parse("diagnosis+prescription") == dp);
    CHECK(*corpus::Modalities::parse("all") == corpus::Modalities{});
    CHECK(*corpus::Modalities::parse("procedure") == corpus::Modalities{false, true, false});
    CHECK_FALSE(corpus::Modalities::parse("bogus").has_value());
}
