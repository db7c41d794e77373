#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ehrseq/cohort.hpp"
#include "ehrseq/evalkit.hpp"
#include "ehrseq/rng.hpp"
#include "ehrseq/syngen.hpp"

using namespace ehrseq;
namespace fs = std::filesystem;

namespace {

// labeled sequences over a 20-code vocabulary; the label's marker token is
// planted in 75% of them, so models score well but never saturate at 1.0
// (saturation would hide which subsample was trained on)
evalkit::EncodedTask toy_task(std::size_t n, std::uint64_t seed) {
    evalkit::EncodedTask task;
    std::vector<std::string> codes;
    for (int i = 0; i < 20; ++i) codes.push_back("c" + std::to_string(i + corpus::kReserved));
    task.vocab = corpus::Vocabulary(codes);

    rng::Xoshiro256 g = rng::Xoshiro256::substream(seed, 707);
    for (std::size_t i = 0; i < n; ++i) {
        corpus::CodeSequence s;
        s.patient_id = "p" + std::to_string(i);
        const std::size_t len = 4 + g.below(5);
        for (std::size_t t = 0; t < len; ++t)
            s.token_ids.push_back(6 + int(g.below(18)));
        s.label = int(g.below(2));
        if (g.below(4) != 0) s.token_ids[g.below(len)] = s.label ? 4 : 5;
        task.sequences.push_back(std::move(s));
    }
    return task;
}

models::ModelConfig lr_config() {
    models::ModelConfig cfg;
    cfg.kind = models::Kind::lr;
    cfg.learning_rate = 0.05;
    return cfg;
}

models::ModelConfig rf_config() {
    models::ModelConfig cfg;
    cfg.kind = models::Kind::rf;
    cfg.n_trees = 10;
    cfg.max_depth = 4;
    return cfg;
}

std::vector<double> aucs_of(const std::vector<evalkit::RocReport>& reports) {
    std::vector<double> out;
    for (const auto& r : reports) out.push_back(r.auc);
    return out;
}

std::vector<std::string> ids_of(const std::vector<evalkit::RocReport>& reports) {
    std::vector<std::string> out;
    for (const auto& r : reports) out.push_back(r.desc.id());
    return out;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in), {});
}

struct TempDir {
    fs::path path;
    explicit TempDir(const char* name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

// --- roc / auc ----------------------------------------------------------------

TEST_CASE("auc anchors: separation, pure ties, and a worked example") {
    auto sep = evalkit::roc_auc({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1});
    CHECK(sep.auc == 1.0);
    CHECK(sep.n_pos == 2);
    CHECK(sep.n_neg == 2);

    CHECK(evalkit::roc_auc({0.3, 0.3, 0.3, 0.3}, {0, 1, 0, 1}).auc == 0.5);

    // one discordant pair out of four, no ties: 3/4
    CHECK(evalkit::roc_auc({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}).auc == 0.75);

    // a tied case/control pair contributes half credit
    CHECK(evalkit::roc_auc({0.2, 0.5, 0.5}, {0, 0, 1}).auc == 0.75);
}

TEST_CASE("auc equals brute-force pair concordance on tied random scores") {
    rng::Xoshiro256 g = rng::Xoshiro256::substream(31, 0);
    std::vector<double> scores;
    std::vector<int> labels;
    for (int i = 0; i < 200; ++i) {
        scores.push_back(double(g.below(20)) / 20.0);  // coarse grid forces ties
        labels.push_back(int(g.below(2)));
    }
    double concordant = 0.0, pairs = 0.0;
    for (std::size_t a = 0; a < scores.size(); ++a) {
        if (labels[a] != 1) continue;
        for (std::size_t b = 0; b < scores.size(); ++b) {
            if (labels[b] != 0) continue;
            pairs += 1.0;
            if (scores[a] > scores[b]) concordant += 1.0;
            else if (scores[a] == scores[b]) concordant += 0.5;
        }
    }
    auto rep = evalkit::roc_auc(scores, labels);
    CHECK(rep.auc == doctest::Approx(concordant / pairs).epsilon(1e-9));

    // any strictly increasing transform leaves the threshold sweep intact
    std::vector<double> warped;
    for (double s : scores) warped.push_back(0.1 + std::atan(s));
    CHECK(evalkit::roc_auc(warped, labels).auc == rep.auc);
}

TEST_CASE("roc curve runs (0,0) to (1,1) monotonically and integrates to auc") {
    rng::Xoshiro256 g = rng::Xoshiro256::substream(32, 0);
    std::vector<double> scores;
    std::vector<int> labels;
    for (int i = 0; i < 150; ++i) {
        scores.push_back(double(g.below(40)) / 40.0);
        labels.push_back(int(g.below(2)));
    }
    auto rep = evalkit::roc_auc(scores, labels);
    REQUIRE(rep.points.size() >= 2);
    CHECK(rep.points.front() == std::pair<double, double>{0.0, 0.0});
    CHECK(rep.points.back() == std::pair<double, double>{1.0, 1.0});
    double integral = 0.0;
    for (std::size_t i = 1; i < rep.points.size(); ++i) {
        const auto& [x0, y0] = rep.points[i - 1];
        const auto& [x1, y1] = rep.points[i];
        CHECK(x1 >= x0);
        CHECK(y1 >= y0);
        integral += (x1 - x0) * (y0 + y1) / 2.0;
    }
    CHECK(rep.auc == doctest::Approx(integral).epsilon(1e-12));
}

TEST_CASE("auc input validation") {
    CHECK_THROWS_WITH_AS(evalkit::roc_auc({0.5}, {1, 0}), doctest::Contains("scores"),
                         std::runtime_error);
    CHECK_THROWS_WITH_AS(evalkit::roc_auc({0.5, 0.4}, {1, 2}), doctest::Contains("0/1"),
                         std::runtime_error);
    CHECK_THROWS_WITH_AS(evalkit::roc_auc({0.5, 0.4}, {1, 1}),
                         doctest::Contains("both classes"), std::runtime_error);
}

// --- run_task --------------------------------------------------------------------

TEST_CASE("run_task: one report per config and seed, frozen test set, reproducible") {
    auto task = toy_task(120, 21);
    const corpus::SplitSpec spec;
    const auto sp = corpus::split(task.sequences, spec);

    auto reports = evalkit::run_task(task, {lr_config(), rf_config()}, spec, {1, 2});
    REQUIRE(reports.size() == 4);

    for (const auto& r : reports) {
        CHECK(r.test_hash == sp.test_hash);
        CHECK(r.desc.task == "detection");
        CHECK(r.desc.modalities == "all");
        CHECK(r.desc.train_size == sp.train.size());
        CHECK(r.n_pos + r.n_neg == sp.test.size());
        CHECK(r.auc > 0.5);  // the marker token is learnable
    }
    CHECK(reports[0].desc.model == "lr");
    CHECK(reports[0].desc.seed == 1);
    CHECK(reports[1].desc.seed == 2);
    CHECK(reports[2].desc.model == "rf");
    CHECK(reports[0].desc.id() == "detection_lr_all_n" + std::to_string(sp.train.size()) +
                                      "_s1");

    auto again = evalkit::run_task(task, {lr_config(), rf_config()}, spec, {1, 2});
    CHECK(aucs_of(again) == aucs_of(reports));
    CHECK(ids_of(again) == ids_of(reports));
}

TEST_CASE("run_task drives sequence models through the same protocol") {
    auto task = toy_task(80, 22);
    models::ModelConfig cfg;
    cfg.kind = models::Kind::gru;
    cfg.hidden_size = 8;
    cfg.learning_rate = 0.01;
    cfg.max_epochs = 2;
    auto reports = evalkit::run_task(task, {cfg}, {}, {7});
    REQUIRE(reports.size() == 1);
    CHECK(reports[0].desc.model == "gru");
    CHECK(reports[0].auc >= 0.0);
    CHECK(reports[0].auc <= 1.0);
    CHECK(evalkit::run_task(task, {cfg}, {}, {7})[0].auc == reports[0].auc);
}

// --- size_sweep ------------------------------------------------------------------

TEST_CASE("size_sweep: nested seeded subsamples, capped sizes deduplicated") {
    auto task = toy_task(120, 23);
    const corpus::SplitSpec spec;
    const auto sp = corpus::split(task.sequences, spec);
    const std::size_t pool = sp.train.size();

    // the full-pool rung reproduces run_task bit for bit
    auto sweep = evalkit::size_sweep(task, {lr_config()}, {30, pool}, spec, {1});
    REQUIRE(sweep.size() == 2);
    CHECK(sweep[0].desc.train_size == 30);
    CHECK(sweep[1].desc.train_size == pool);
    auto flat = evalkit::run_task(task, {lr_config()}, spec, {1});
    CHECK(sweep[1].auc == flat[0].auc);
    CHECK(sweep[1].desc.id() == flat[0].desc.id());

    // a size-s report is a pure function of (seed, s): the rest of the size
    // list does not matter
    auto lone = evalkit::size_sweep(task, {lr_config()}, {30}, spec, {1});
    REQUIRE(lone.size() == 1);
    CHECK(lone[0].auc == sweep[0].auc);

    // oversize requests cap at the pool and collapse into one rung
    auto capped = evalkit::size_sweep(task, {lr_config()}, {50, 5000, 6000}, spec, {1, 2});
    REQUIRE(capped.size() == 4);  // two unique sizes x two seeds
    std::multiset<std::size_t> sizes;
    for (const auto& r : capped) sizes.insert(r.desc.train_size);
    CHECK(sizes == std::multiset<std::size_t>{50, 50, pool, pool});

    // different seeds pick different subsamples (almost surely)
    CHECK(capped[0].auc != capped[2].auc);
}

// --- ablation --------------------------------------------------------------------

TEST_CASE("all_modality_subsets lists the seven non-empty combinations") {
    auto subsets = evalkit::all_modality_subsets();
    REQUIRE(subsets.size() == 7);
    std::set<std::string> slugs;
    for (const auto& m : subsets) {
        CHECK(m.any());
        slugs.insert(m.slug());
    }
    CHECK(slugs.size() == 7);
    CHECK(slugs.count("all") == 1);
    CHECK(slugs.count("diagnosis") == 1);
    CHECK(slugs.count("diagnosis+prescription") == 1);
}

TEST_CASE("ablation re-encodes per modality subset against one frozen test set") {
    syngen::GenConfig gen;
    gen.seed = 33;
    gen.n_patients = 220;
    gen.vocab_diagnosis = 40;
    gen.vocab_procedure = 20;
    gen.vocab_prescription = 30;
    gen.mean_visits_per_patient = 12.0;
    auto data = syngen::generate(gen);
    auto annotated = cohort::annotate_all(data.streams, gen.derive_rules());
    REQUIRE(annotated.summary.n_case >= 10);
    REQUIRE(annotated.summary.n_control >= 10);

    evalkit::AblationInput input;
    input.streams = &data.streams;
    input.labels = &annotated.labels;
    input.task = corpus::Task::prediction;
    input.max_len = 64;

    corpus::Modalities dx_only{true, false, false};
    corpus::Modalities rx_only{false, false, true};
    corpus::Modalities all{};
    auto reports = evalkit::ablation(input, {lr_config()}, {dx_only, rx_only, all}, {}, {1});
    REQUIRE(reports.size() == 3);
    CHECK(reports[0].desc.modalities == "diagnosis");
    CHECK(reports[1].desc.modalities == "prescription");
    CHECK(reports[2].desc.modalities == "all");
    // membership depends on patient ids only, so every subset sees the same
    // test patients and the same pool size
    CHECK(reports[0].test_hash == reports[2].test_hash);
    CHECK(reports[1].test_hash == reports[2].test_hash);
    CHECK(reports[0].desc.train_size == reports[2].desc.train_size);
    for (const auto& r : reports) CHECK(r.desc.task == "prediction");
}

// --- report rendering ---------------------------------------------------------------

TEST_CASE("report renders csv, per-report roc files and a digest manifest") {
    auto task = toy_task(120, 24);
    auto reports = evalkit::run_task(task, {lr_config(), rf_config()}, {}, {1, 2});
    REQUIRE(reports.size() == 4);

    TempDir dir("ehrseq_report_test");
    evalkit::report(reports, dir.path.string(), {{"note", "toy"}});

    const std::string metrics = slurp(dir.path / "metrics.csv");
    std::vector<std::string> lines;
    for (std::size_t pos = 0; pos < metrics.size();) {
        const std::size_t nl = metrics.find('\n', pos);
        lines.push_back(metrics.substr(pos, nl - pos));
        pos = nl + 1;
    }
    REQUIRE(lines.size() == 7);  // header + 4 runs + 2 trailing mean rows
    CHECK(lines[0] == "task,model,modalities,train_size,seed,auc,n_pos,n_neg,test_hash");
    CHECK(lines[1].find("detection,lr,all,") == 0);
    CHECK(lines[5].find("lr,all,") != std::string::npos);
    CHECK(lines[5].find(",mean,") != std::string::npos);
    CHECK(lines[6].find("rf,all,") != std::string::npos);
    CHECK(lines[6].find(",mean,") != std::string::npos);

    for (const auto& r : reports) {
        const std::string roc = slurp(dir.path / ("roc_" + r.desc.id() + ".csv"));
        CHECK(roc.find("fpr,tpr\n") == 0);
        const std::string svg = slurp(dir.path / ("roc_" + r.desc.id() + ".svg"));
        CHECK(svg.find("<svg") != std::string::npos);
        CHECK(svg.find("polyline") != std::string::npos);
    }

    // single train size: no sweep chart
    for (const auto& e : fs::directory_iterator(dir.path))
        CHECK(e.path().filename().string().find("sweep_") == std::string::npos);

    auto manifest = nlohmann::json::parse(slurp(dir.path / "manifest.json"));
    CHECK(manifest["reports"] == 4);
    CHECK(manifest["note"] == "toy");
    REQUIRE(manifest["files"].size() == 9);  // metrics + 4 x (csv + svg)
    for (const auto& [name, digest] : manifest["files"].items()) {
        CHECK(digest.get<std::string>() ==
              evalkit::file_digest((dir.path / name).string()));
    }
    CHECK_FALSE(manifest["files"].contains("manifest.json"));
}

TEST_CASE("report draws one sweep chart per model once several sizes exist") {
    auto task = toy_task(120, 25);
    auto reports = evalkit::size_sweep(task, {lr_config(), rf_config()}, {20, 60}, {}, {1, 2});
    REQUIRE(reports.size() == 8);

    TempDir dir("ehrseq_sweep_report_test");
    evalkit::report(reports, dir.path.string());
    CHECK(fs::exists(dir.path / "sweep_detection_lr_all.svg"));
    CHECK(fs::exists(dir.path / "sweep_detection_rf_all.svg"));
    const std::string svg = slurp(dir.path / "sweep_detection_lr_all.svg");
    CHECK(svg.find("mean AUC") != std::string::npos);
}

TEST_CASE("report output is byte-identical across reruns") {
    auto task = toy_task(100, 26);
    auto reports = evalkit::run_task(task, {lr_config()}, {}, {1, 2, 3});

    TempDir a("ehrseq_report_rerun_a");
    TempDir b("ehrseq_report_rerun_b");
    evalkit::report(reports, a.path.string());
    evalkit::report(evalkit::run_task(task, {lr_config()}, {}, {1, 2, 3}),
                    b.path.string());

    std::map<std::string, std::string> da, db;
    for (const auto& e : fs::directory_iterator(a.path))
        da[e.path().filename().string()] = evalkit::file_digest(e.path().string());
    for (const auto& e : fs::directory_iterator(b.path))
        db[e.path().filename().string()] = evalkit::file_digest(e.path().string());
    REQUIRE(da.size() == 8);  // metrics + 3 x (csv + svg) + manifest
    CHECK(da == db);
}

TEST_CASE("file_digest matches published fnv-1a vectors") {
    TempDir dir("ehrseq_digest_test");
    fs::create_directories(dir.path);
    {
        std::ofstream out(dir.path / "empty.bin", std::ios::binary);
    }
    CHECK(evalkit::file_digest((dir.path / "empty.bin").string()) == "cbf29ce484222325");
    {
        std::ofstream out(dir.path / "a.bin", std::ios::binary);
        out << "a";
    }
    CHECK(evalkit::file_digest((dir.path / "a.bin").string()) == "af63dc4c8601ec8c");
    {
        std::ofstream out(dir.path / "foobar.bin", std::ios::binary);
        out << "foobar";
    }
    CHECK(evalkit::file_digest((dir.path / "foobar.bin").string()) == "85944171f73967e8");
    CHECK_THROWS_AS(evalkit::file_digest((dir.path / "missing.bin").string()),
                    std::runtime_error);
}
