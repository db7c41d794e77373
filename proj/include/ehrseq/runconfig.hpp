#pragma once

// One JSON file drives a whole run: generation, labeling, corpus building,
// training and the evaluation protocols. Parsing is defaults-then-override,
// unknown fields are surfaced as warnings (never errors), and validate()
// reports every violation instead of stopping at the first.
//
// The top-level "seed" is the run's global seed: it fills gen.seed and
// split.seed unless those objects set their own.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ehrseq/cohort.hpp"
#include "ehrseq/corpus.hpp"
#include "ehrseq/models.hpp"
#include "ehrseq/syngen.hpp"

#include <json.hpp>

namespace ehrseq::runconfig {

// External data sources. Empty means the pipeline's own outputs under
// out_dir are used.
struct InputPaths {
    std::string events_csv;
    std::string labels_csv;

    bool operator==(const InputPaths&) const = default;
};

struct CorpusSettings {
    int max_len = 512;
    int min_frequency = 1;
    corpus::Modalities modalities;
    int detection_horizon_days = 365;

    bool operator==(const CorpusSettings&) const = default;
};

struct Experiments {
    std::vector<corpus::Task> tasks = {corpus::Task::detection, corpus::Task::prediction};
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    std::vector<std::size_t> sweep_sizes;  // empty: no size sweep
    bool ablation = false;
    bool use_pretrained = true;  // feed the pre-trained encoder to transformers

    bool operator==(const Experiments&) const = default;
};

struct RunConfig {
    std::uint64_t seed = 42;
    std::string out_dir = "runs/default";
    InputPaths inputs;
    syngen::GenConfig gen;
    std::optional<cohort::CohortRules> rules;  // default: gen.derive_rules()
    CorpusSettings corpus_settings;            // json key "corpus"
    corpus::SplitSpec split;
    std::vector<models::ModelConfig> model_configs;  // json key "models"
    Experiments experiments;

    cohort::CohortRules effective_rules() const;

    // Every violation, prefixed with the offending field path. Includes the
    // cross-field checks (e.g. transformer max_positions vs. max_len) and
    // existence of any referenced input files.
    std::vector<std::string> validate() const;

    bool operator==(const RunConfig&) const = default;
};

struct LoadResult {
    RunConfig config;
    std::vector<std::string> warnings;  // e.g. "unknown field: gen.n_patient"
};

LoadResult parse(const nlohmann::json& j);
LoadResult load(const std::string& path);

// Full materialized echo (defaults filled in, rules resolved); parsing it
// back yields an equivalent config.
nlohmann::json echo(const RunConfig& c);

// Applies a `--gen.n_patients 500` style override onto the raw config JSON.
// The value is parsed as JSON when possible, else taken as a string; numeric
// segments index into arrays (e.g. "models.0.hidden_size"). Throws on
// out-of-range array indices.
void apply_override(nlohmann::json& config, const std::string& dotted_path,
                    const std::string& value);

// EHRSEQ_SEED, if set; throws on a value that is not a u64.
std::optional<std::uint64_t> env_seed();

}  // namespace ehrseq::runconfig
