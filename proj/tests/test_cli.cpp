// End-to-end tests for the ehrseq binary. The test runner exports EHRSEQ_BIN
// (set by CMake); every case spawns the real executable and inspects its
// exit code, its single stdout JSON line, and the files it writes.

#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <unordered_map>

#include "ehrseq/cohort.hpp"
#include "ehrseq/evalkit.hpp"
#include "ehrseq/syngen.hpp"

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string bin() {
    const char* p = std::getenv("EHRSEQ_BIN");
    REQUIRE_MESSAGE(p != nullptr, "EHRSEQ_BIN must point at the ehrseq binary");
    return p;
}

struct TempDir {
    fs::path path;
    TempDir() {
        static int counter = 0;
        path = fs::temp_directory_path() /
               ("ehrseq_cli_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter++));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    fs::path operator/(const std::string& name) const { return path / name; }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE_MESSAGE(in.good(), "missing file: " << p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct CliRun {
    int code = -1;
    std::string out;  // full stdout
    json status;      // parsed stdout line (null when stdout was empty)
};

// `env_prefix` is prepended verbatim, e.g. "EHRSEQ_SEED=77 ".
CliRun run_cli(const TempDir& tmp, const std::string& args,
               const std::string& env_prefix = "") {
    static int counter = 0;
    const fs::path out_file = tmp / ("stdout_" + std::to_string(counter++) + ".txt");
    const std::string cmd = env_prefix + bin() + " " + args + " >" +
                            out_file.string() + " 2>/dev/null";
    const int raw = std::system(cmd.c_str());
    CliRun r;
    r.code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    r.out = slurp(out_file);
    if (!r.out.empty()) r.status = json::parse(r.out);
    return r;
}

void write_config(const fs::path& p, const json& j) {
    std::ofstream out(p);
    out << j.dump(2) << "\n";
}

json micro_config(const fs::path& out_dir) {
    return json{
        {"seed", 11},
        {"out_dir", out_dir.string()},
        {"gen",
         {{"n_patients", 150},
          {"vocab_diagnosis", 40},
          {"vocab_procedure", 20},
          {"vocab_prescription", 30},
          {"mean_visits_per_patient", 10.0}}},
        {"corpus", {{"max_len", 64}}},
        {"models", json::array({json{{"kind", "lr"}}})},
        {"experiments",
         {{"tasks", json::array({"detection"})},
          {"seeds", json::array({1})},
          {"use_pretrained", false}}}};
}

}  // namespace

TEST_CASE("cli: generate writes byte-identical outputs on rerun") {
    TempDir tmp;
    const fs::path cfg = tmp / "cfg.json";
    write_config(cfg, micro_config(tmp / "run"));

    auto a = run_cli(tmp, "generate --config " + cfg.string() + " --out_dir=" +
                              (tmp / "a").string());
    auto b = run_cli(tmp, "generate --config " + cfg.string() + " --out_dir=" +
                              (tmp / "b").string());
    REQUIRE(a.code == 0);
    REQUIRE(b.code == 0);
    CHECK(a.status.at("status") == "ok");
    CHECK(a.status.at("outputs").at("n_patients") == 150);

    for (const char* name : {"events.csv", "ground_truth.csv"}) {
        const auto da = ehrseq::evalkit::file_digest((tmp / "a" / "data" / name).string());
        const auto db = ehrseq::evalkit::file_digest((tmp / "b" / "data" / name).string());
        CHECK(da == db);
    }
}

TEST_CASE("cli: annotate reproduces the generator's intended labels") {
    TempDir tmp;
    const fs::path cfg = tmp / "cfg.json";
    json c = micro_config(tmp / "run");
    c["gen"]["n_patients"] = 250;
    write_config(cfg, c);

    REQUIRE(run_cli(tmp, "generate --config " + cfg.string()).code == 0);
    auto r = run_cli(tmp, "annotate --config " + cfg.string());
    REQUIRE(r.code == 0);

    const auto truth =
        ehrseq::syngen::read_ground_truth((tmp / "run" / "data" / "ground_truth.csv").string());
    const auto labels =
        ehrseq::cohort::read_labels_csv((tmp / "run" / "data" / "labels.csv").string());
    REQUIRE(labels.size() == truth.size());

    std::unordered_map<std::string, std::string> intended;
    for (const auto& row : truth) intended[row.patient_id] = row.intended_label;
    std::size_t mismatches = 0;
    for (const auto& l : labels)
        if (intended.at(l.patient_id) != ehrseq::cohort::to_string(l.status)) ++mismatches;
    CHECK(mismatches == 0);

    // the summary in the status line agrees with the label file
    std::size_t n_case = 0;
    for (const auto& l : labels)
        if (l.status == ehrseq::cohort::Status::case_) ++n_case;
    CHECK(r.status.at("outputs").at("summary").at("n_case") == n_case);
}

TEST_CASE("cli: validate reports violations as data and exits 0") {
    TempDir tmp;
    const fs::path good = tmp / "good.json";
    write_config(good, micro_config(tmp / "run"));
    auto g = run_cli(tmp, "validate --config " + good.string());
    REQUIRE(g.code == 0);
    CHECK(g.status.at("violations").empty());
    CHECK(g.status.at("warnings").empty());

    json bad = micro_config(tmp / "run");
    bad["rules"] = json{{"blanking_window_days", 400}};
    bad["experiments"]["seeds"] = json::array();
    const fs::path badp = tmp / "bad.json";
    write_config(badp, bad);
    auto b = run_cli(tmp, "validate --config " + badp.string());
    REQUIRE(b.code == 0);  // validate never fails on content, it reports
    REQUIRE(b.status.at("violations").size() >= 2);
    bool saw_rules = false, saw_seeds = false;
    for (const auto& v : b.status.at("violations")) {
        const auto s = v.get<std::string>();
        saw_rules |= s.find("rules:") != std::string::npos;
        saw_seeds |= s.find("seed") != std::string::npos;
    }
    CHECK(saw_rules);
    CHECK(saw_seeds);

    json typo = micro_config(tmp / "run");
    typo["experments"] = json::object();
    const fs::path typop = tmp / "typo.json";
    write_config(typop, typo);
    auto t = run_cli(tmp, "validate --config " + typop.string());
    REQUIRE(t.code == 0);
    REQUIRE(t.status.at("warnings").size() == 1);
    CHECK(t.status.at("warnings")[0].get<std::string>().find("experments") !=
          std::string::npos);
}

TEST_CASE("cli: exit codes distinguish config, io and data failures") {
    TempDir tmp;
    const fs::path cfg = tmp / "cfg.json";
    write_config(cfg, micro_config(tmp / "run"));

    SUBCASE("missing config file is a config error") {
        auto r = run_cli(tmp, "generate --config " + (tmp / "nope.json").string());
        CHECK(r.code == 2);
        CHECK(r.status.at("category") == "config");
    }
    SUBCASE("invalid JSON is a config error") {
        std::ofstream(tmp / "broken.json") << "{ not json";
        auto r = run_cli(tmp, "generate --config " + (tmp / "broken.json").string());
        CHECK(r.code == 2);
        CHECK(r.status.at("category") == "config");
    }
    SUBCASE("a config violation blocks every stage except validate") {
        json bad = micro_config(tmp / "run");
        bad["models"][0]["learning_rate"] = -1.0;
        write_config(tmp / "bad.json", bad);
        auto r = run_cli(tmp, "generate --config " + (tmp / "bad.json").string());
        CHECK(r.code == 2);
        CHECK(r.status.at("message").get<std::string>().find("violation") !=
              std::string::npos);
    }
    SUBCASE("evaluating before building a corpus is an io error") {
        auto r = run_cli(tmp, "evaluate --config " + cfg.string());
        CHECK(r.code == 3);
        CHECK(r.status.at("category") == "io");
        CHECK(r.status.at("message").get<std::string>().find("build-corpus") !=
              std::string::npos);
    }
    SUBCASE("report with no stored results is a data error") {
        auto r = run_cli(tmp, "report --config " + cfg.string());
        CHECK(r.code == 4);
        CHECK(r.status.at("category") == "data");
    }
    SUBCASE("training a transformer without its pretrained encoder is an io error") {
        json c = micro_config(tmp / "run");
        c["models"] = json::array(
            {json{{"kind", "transformer"}, {"hidden_size", 16}, {"num_heads", 2},
                  {"num_layers", 1}, {"ffn_size", 32}, {"max_positions", 65},
                  {"max_epochs", 1}}});
        c["experiments"]["use_pretrained"] = true;
        write_config(tmp / "tf.json", c);
        const std::string base = " --config " + (tmp / "tf.json").string();
        REQUIRE(run_cli(tmp, "generate" + base).code == 0);
        REQUIRE(run_cli(tmp, "annotate" + base).code == 0);
        REQUIRE(run_cli(tmp, "build-corpus" + base).code == 0);
        auto r = run_cli(tmp, "train" + base);
        CHECK(r.code == 3);
        CHECK(r.status.at("message").get<std::string>().find("pretrain") !=
              std::string::npos);
    }
}

TEST_CASE("cli: the full pipeline runs on a tiny config") {
    TempDir tmp;
    const fs::path cfg = tmp / "cfg.json";
    write_config(cfg, micro_config(tmp / "run"));

    auto r = run_cli(tmp, "all --config " + cfg.string());
    REQUIRE(r.code == 0);
    CHECK(r.status.at("outputs").at("evaluate").at("n_reports") == 1);

    const fs::path run = tmp / "run";
    for (const char* rel :
         {"data/events.csv", "data/labels.csv", "data/gen_manifest.json",
          "corpus/detection/vocab.json", "corpus/detection/sequences.jsonl",
          "corpus/detection/pretrain.jsonl", "corpus/manifest.json",
          "models/detection_lr_s1.model", "models/train_manifest.json",
          "reports/evaluate/reports.json", "reports/evaluate/metrics.csv",
          "reports/evaluate/manifest.json"})
        CHECK_MESSAGE(fs::exists(run / rel), rel);

    // evaluate alone, rerun from the stored corpus, is byte-identical
    const std::string before = slurp(run / "reports" / "evaluate" / "metrics.csv");
    auto again = run_cli(tmp, "evaluate --config " + cfg.string());
    REQUIRE(again.code == 0);
    CHECK(slurp(run / "reports" / "evaluate" / "metrics.csv") == before);
}

TEST_CASE("cli: dotted overrides reach the stages") {
    TempDir tmp;
    const fs::path cfg = tmp / "cfg.json";
    write_config(cfg, micro_config(tmp / "run"));

    auto r = run_cli(tmp, "generate --config " + cfg.string() + " --gen.n_patients=120");
    REQUIRE(r.code == 0);
    CHECK(r.status.at("outputs").at("n_patients") == 120);
    const json manifest = json::parse(slurp(tmp / "run" / "data" / "gen_manifest.json"));
    CHECK(manifest.at("config").at("gen").at("n_patients") == 120);

    auto bad = run_cli(tmp, "generate --config " + cfg.string() + " --models.9.kind=lr");
    CHECK(bad.code == 2);
}

TEST_CASE("cli: seed precedence is flag over environment over config") {
    TempDir tmp;
    const fs::path cfg = tmp / "cfg.json";
    write_config(cfg, micro_config(tmp / "run"));
    auto seed_of = [&](const std::string& out, const std::string& extra,
                       const std::string& env) {
        auto r = run_cli(tmp,
                         "generate --config " + cfg.string() + " --out_dir=" +
                             (tmp / out).string() + extra,
                         env);
        REQUIRE(r.code == 0);
        const json m = json::parse(slurp(tmp / out / "data" / "gen_manifest.json"));
        return m.at("config").at("seed").get<std::uint64_t>();
    };
    CHECK(seed_of("c", "", "") == 11);                                // config
    CHECK(seed_of("e", "", "EHRSEQ_SEED=77 ") == 77);                 // env beats config
    CHECK(seed_of("f", " --seed 5", "EHRSEQ_SEED=77 ") == 5);         // flag beats env

    const auto digest = [&](const std::string& d) {
        return ehrseq::evalkit::file_digest((tmp / d / "data" / "events.csv").string());
    };
    CHECK(digest("c") != digest("e"));  // the seed actually changes the data
}
