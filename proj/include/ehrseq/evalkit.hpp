#pragma once

// ROC/AUC and the three experiment protocols (task comparison, training-set
// size sweep, modality ablation), plus deterministic report rendering
// (CSV, SVG, JSON manifest — no timestamps, byte-stable across reruns).

#include <cstdint>
#include <string>
#include <vector>

#include "ehrseq/corpus.hpp"
#include "ehrseq/models.hpp"

#include <json.hpp>

namespace ehrseq::evalkit {

struct Descriptor {
    std::string task;        // detection | prediction
    std::string model;       // lr | rf | gru | lstm | transformer
    std::string modalities;  // slug, e.g. "all" or "diagnosis+prescription"
    std::size_t train_size = 0;
    std::uint64_t seed = 0;

    std::string id() const;  // filesystem-safe, unique per descriptor
};

struct RocReport {
    std::vector<std::pair<double, double>> points;  // (fpr, tpr), (0,0)..(1,1)
    double auc = 0.0;
    std::size_t n_pos = 0, n_neg = 0;
    Descriptor desc;
    std::string test_hash;
};

// Threshold sweep over distinct score values (ties grouped), trapezoidal
// area; equals pairwise concordance with half-credit ties. Throws unless
// both classes are present.
RocReport roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

void to_json(nlohmann::json& j, const Descriptor& d);
void from_json(const nlohmann::json& j, Descriptor& d);
void to_json(nlohmann::json& j, const RocReport& r);
void from_json(const nlohmann::json& j, RocReport& r);

// One task's model-ready dataset: labeled sequences plus the vocabulary
// they were encoded with.
struct EncodedTask {
    corpus::Task task = corpus::Task::detection;
    corpus::Modalities modalities;
    corpus::Vocabulary vocab;
    std::vector<corpus::CodeSequence> sequences;
};

// Trains every config on the split's train(+val) portion and scores the
// frozen test set; one report per (config, seed). An optional pre-trained
// encoder is used by transformer configs.
std::vector<RocReport> run_task(const EncodedTask& data,
                                const std::vector<models::ModelConfig>& configs,
                                const corpus::SplitSpec& split_spec,
                                const std::vector<std::uint64_t>& seeds,
                                const models::TrainedModel* pretrained = nullptr);

// Fig-3-style sweep: per size, train on a seeded hash-prefix subsample of
// the train pool (nested across sizes, pure function of (seed, size)), test
// set frozen. Sizes are capped at the pool; train_size in the descriptor
// records the actual subsample size.
std::vector<RocReport> size_sweep(const EncodedTask& data,
                                  const std::vector<models::ModelConfig>& configs,
                                  const std::vector<std::size_t>& sizes,
                                  const corpus::SplitSpec& split_spec,
                                  const std::vector<std::uint64_t>& seeds,
                                  const models::TrainedModel* pretrained = nullptr);

// Table-2-style ablation: for each modality subset, rebuild the vocabulary
// from that subset only, re-encode, train, and score the frozen test
// patients (split membership depends on patient ids only).
struct AblationInput {
    const std::vector<events::PatientStream>* streams = nullptr;
    const std::vector<cohort::CohortLabel>* labels = nullptr;
    corpus::Task task = corpus::Task::prediction;
    int max_len = 512;
    int detection_horizon_days = 365;
    int min_frequency = 1;
};

std::vector<corpus::Modalities> all_modality_subsets();  // the 7 non-empty ones

std::vector<RocReport> ablation(const AblationInput& input,
                                const std::vector<models::ModelConfig>& configs,
                                const std::vector<corpus::Modalities>& subsets,
                                const corpus::SplitSpec& split_spec,
                                const std::vector<std::uint64_t>& seeds);

// Renders metrics.csv (per-seed rows plus seed="mean" aggregates),
// roc_<id>.csv + roc_<id>.svg per report, sweep SVGs when several train
// sizes are present, and manifest.json echoing `manifest_extra`.
void report(const std::vector<RocReport>& reports, const std::string& out_dir,
            const nlohmann::json& manifest_extra = nlohmann::json::object());

// FNV-1a digest of a file's bytes, hex-encoded; used in manifests.
std::string file_digest(const std::string& path);

}  // namespace ehrseq::evalkit
