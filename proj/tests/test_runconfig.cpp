#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ehrseq/runconfig.hpp"

using namespace ehrseq;
using nlohmann::json;

namespace {

bool has_violation(const std::vector<std::string>& v, const std::string& needle) {
    for (const auto& s : v)
        if (s.find(needle) != std::string::npos) return true;
    return false;
}

json minimal_valid() {
    return json{{"models", json::array({{{"kind", "lr"}}})}};
}

}  // namespace

TEST_CASE("empty config parses to defaults and flags the missing models") {
    auto [cfg, warnings] = runconfig::parse(json::object());
    CHECK(warnings.empty());
    CHECK(cfg.seed == 42);
    CHECK(cfg.out_dir == "runs/default");
    CHECK(cfg.corpus_settings.max_len == 512);
    CHECK(cfg.corpus_settings.detection_horizon_days == 365);
    CHECK(cfg.split.train_fraction == 0.8);
    CHECK(cfg.split.val_fraction == 0.2);
    CHECK(cfg.experiments.tasks.size() == 2);
    CHECK(cfg.experiments.seeds == std::vector<std::uint64_t>{1, 2, 3});
    CHECK_FALSE(cfg.rules.has_value());
    // without explicit rules the generator's derived rules apply
    CHECK(cfg.effective_rules().index_drug_codes.count("RX_INDEX") == 1);

    auto violations = cfg.validate();
    REQUIRE(violations.size() == 1);
    CHECK(has_violation(violations, "models: at least one model"));

    CHECK(runconfig::parse(minimal_valid()).config.validate().empty());
}

TEST_CASE("the global seed fills gen and split seeds unless they set their own") {
    CHECK(runconfig::parse({{"seed", 7}}).config.gen.seed == 7);
    CHECK(runconfig::parse({{"seed", 7}}).config.split.seed == 7);
    auto mixed = runconfig::parse({{"seed", 7}, {"gen", {{"seed", 3}}}}).config;
    CHECK(mixed.gen.seed == 3);
    CHECK(mixed.split.seed == 7);
    CHECK(runconfig::parse({{"split", {{"seed", 5}}}}).config.split.seed == 5);
}

TEST_CASE("unknown fields warn with their full path but never fail the parse") {
    json j = minimal_valid();
    j["sed"] = 1;
    j["gen"] = {{"n_patient", 50}};
    j["models"][0]["hiden_size"] = 8;
    j["experiments"] = {{"tusks", json::array()}};
    auto [cfg, warnings] = runconfig::parse(j);
    REQUIRE(warnings.size() == 4);
    CHECK(has_violation(warnings, "unknown field: sed"));
    CHECK(has_violation(warnings, "unknown field: gen.n_patient"));
    CHECK(has_violation(warnings, "unknown field: models[0].hiden_size"));
    CHECK(has_violation(warnings, "unknown field: experiments.tusks"));
    CHECK(cfg.gen.n_patients == 1000);  // the typo never reached the real field
}

TEST_CASE("malformed enums are hard parse errors") {
    CHECK_THROWS_WITH_AS(runconfig::parse({{"experiments", {{"tasks", {"detektion"}}}}}),
                         doctest::Contains("detektion"), std::runtime_error);
    CHECK_THROWS_WITH_AS(runconfig::parse({{"corpus", {{"modalities", "dna"}}}}),
                         doctest::Contains("dna"), std::runtime_error);
    CHECK_THROWS_WITH_AS(runconfig::parse({{"models", json::array({{{"kind", "svm"}}})}}),
                         doctest::Contains("svm"), std::runtime_error);
    CHECK_THROWS_AS(runconfig::parse(json::array()), std::runtime_error);
}

TEST_CASE("validate reports every violation, not just the first") {
    json j = minimal_valid();
    j["gen"] = {{"n_patients", -5}};
    j["split"] = {{"train_fraction", 1.5}};
    j["corpus"] = {{"max_len", 0}};
    j["experiments"] = {{"tasks", {"detection", "detection"}}, {"seeds", json::array()}};
    auto cfg = runconfig::parse(j).config;
    auto v = cfg.validate();
    CHECK(v.size() >= 5);
    CHECK(has_violation(v, "gen: "));
    CHECK(has_violation(v, "split: train_fraction"));
    CHECK(has_violation(v, "corpus: max_len"));
    CHECK(has_violation(v, "duplicate task"));
    CHECK(has_violation(v, "seeds must not be empty"));
}

TEST_CASE("transformer position budget is checked against max_len") {
    json j = {{"corpus", {{"max_len", 128}}},
              {"models", json::array({{{"kind", "transformer"}, {"max_positions", 64}}})}};
    auto cfg = runconfig::parse(j).config;
    auto v = cfg.validate();
    CHECK(has_violation(v, "models[0]: max_positions (64) must cover max_len + 1 = 129"));

    j["models"][0]["max_positions"] = 129;
    CHECK_FALSE(has_violation(runconfig::parse(j).config.validate(), "max_positions"));
}

TEST_CASE("rule violations and pretrain-as-task surface through validate") {
    json j = minimal_valid();
    j["rules"] = {{"index_drug_codes", {"RX1"}},
                  {"tf_event_codes", {"DX1"}},
                  {"blanking_window_days", 400}};
    auto v = runconfig::parse(j).config.validate();
    CHECK(has_violation(v, "rules: blanking_window_days (400)"));

    json jt = minimal_valid();
    jt["experiments"] = {{"tasks", {"detection", "pretrain"}}};
    CHECK(has_violation(runconfig::parse(jt).config.validate(),
                        "pretrain is not an evaluation task"));
}

TEST_CASE("referenced input files must exist at validation time") {
    json j = minimal_valid();
    j["inputs"] = {{"events_csv", "/nonexistent/events.csv"}};
    CHECK(has_violation(runconfig::parse(j).config.validate(),
                        "events_csv '/nonexistent/events.csv' does not exist"));

    const auto tmp = std::filesystem::temp_directory_path() / "ehrseq_cfg_events.csv";
    std::ofstream(tmp) << "x\n";
    j["inputs"]["events_csv"] = tmp.string();
    CHECK(runconfig::parse(j).config.validate().empty());
    std::filesystem::remove(tmp);
}

TEST_CASE("dotted overrides coerce json values and index into arrays") {
    json j = minimal_valid();
    runconfig::apply_override(j, "gen.n_patients", "500");
    runconfig::apply_override(j, "gen.index_drug_code", "RX_OTHER");
    runconfig::apply_override(j, "experiments.ablation", "true");
    runconfig::apply_override(j, "experiments.sweep_sizes", "[100, 200]");
    runconfig::apply_override(j, "models.0.hidden_size", "48");
    auto cfg = runconfig::parse(j).config;
    CHECK(cfg.gen.n_patients == 500);
    CHECK(cfg.gen.index_drug_code == "RX_OTHER");
    CHECK(cfg.experiments.ablation);
    CHECK(cfg.experiments.sweep_sizes == std::vector<std::size_t>{100, 200});
    CHECK(cfg.model_configs[0].hidden_size == 48);

    CHECK_THROWS_WITH_AS(runconfig::apply_override(j, "models.3.seed", "1"),
                         doctest::Contains("out of range"), std::runtime_error);
    CHECK_THROWS_WITH_AS(runconfig::apply_override(j, "models.first.seed", "1"),
                         doctest::Contains("array index"), std::runtime_error);
    CHECK_THROWS_AS(runconfig::apply_override(j, "", "1"), std::runtime_error);
    CHECK_THROWS_AS(runconfig::apply_override(j, "a..b", "1"), std::runtime_error);
}

TEST_CASE("echo materializes the config and is a parse fixpoint") {
    json j = {{"seed", 9},
              {"corpus", {{"modalities", "diagnosis+prescription"}}},
              {"models", json::array({{{"kind", "gru"}, {"hidden_size", 32}}})},
              {"experiments", {{"tasks", {"prediction"}}, {"sweep_sizes", {50, 100}}}}};
    auto cfg = runconfig::parse(j).config;
    json materialized = runconfig::echo(cfg);
    CHECK(materialized["rules"].contains("index_drug_codes"));  // rules resolved
    CHECK(materialized["corpus"]["modalities"] == "diagnosis+prescription");

    auto [back, warnings] = runconfig::parse(materialized);
    CHECK(warnings.empty());
    CHECK(runconfig::echo(back) == materialized);
    CHECK(back.model_configs == cfg.model_configs);
    CHECK(back.experiments == cfg.experiments);
    CHECK(back.corpus_settings == cfg.corpus_settings);
}

TEST_CASE("load reports unreadable and unparsable files distinctly") {
    CHECK_THROWS_WITH_AS(runconfig::load("/nonexistent/config.json"),
                         doctest::Contains("cannot open"), std::runtime_error);
    const auto tmp = std::filesystem::temp_directory_path() / "ehrseq_bad_config.json";
    std::ofstream(tmp) << "{ not json";
    CHECK_THROWS_WITH_AS(runconfig::load(tmp.string()),
                         doctest::Contains("not valid JSON"), std::runtime_error);
    std::filesystem::remove(tmp);
}

TEST_CASE("EHRSEQ_SEED is parsed strictly") {
    ::setenv("EHRSEQ_SEED", "123", 1);
    CHECK(runconfig::env_seed() == std::uint64_t(123));
    ::setenv("EHRSEQ_SEED", "12x", 1);
    CHECK_THROWS_WITH_AS(runconfig::env_seed(), doctest::Contains("EHRSEQ_SEED"),
                         std::runtime_error);
    ::unsetenv("EHRSEQ_SEED");
    CHECK_FALSE(runconfig::env_seed().has_value());
}
