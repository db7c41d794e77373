#pragma once

// The five classifier families: bag-of-words logistic regression and random
// forest; GRU and LSTM sequence classifiers; transformer encoder with
// masked-code pre-training and a one-node fine-tuning head.
//
// All training is deterministic given (data, config.seed): batching order,
// parameter init, dropout and masking all derive from seeded substreams.
// Scores are probabilities in [0,1]; scoring a sequence alone or inside a
// batch gives bitwise-identical results (see nn.hpp).

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ehrseq/corpus.hpp"
#include "ehrseq/nn.hpp"
#include "ehrseq/optim.hpp"

#include <json.hpp>

namespace ehrseq::models {

enum class Kind { lr, rf, gru, lstm, transformer };
const char* to_string(Kind k);
std::optional<Kind> kind_from_string(std::string_view s);

struct ModelConfig {
    Kind kind = Kind::gru;
    std::uint64_t seed = 1;

    // neural sizes (defaults are desk-scale; the published scale is 768)
    int hidden_size = 64;
    int layers = 2;        // transformer blocks
    int heads = 4;         // transformer attention heads
    int ffn_size = 128;    // transformer feed-forward width
    int max_positions = 513;  // 512 codes + CLS

    // optimization
    double learning_rate = 1e-3;
    int batch_size = 32;
    int max_epochs = 50;
    int patience = 5;  // early stopping on validation AUC
    double dropout = 0.0;

    // transformer pre-training
    int pretrain_epochs = 5;
    double mask_rate = 0.15;
    bool freeze_encoder = false;

    // recurrent direction (chronological by default)
    bool reverse_input = false;
    // optional positive-class weighting (off: plain unweighted BCE)
    bool class_weighting = false;

    // random forest
    int n_trees = 100;
    int max_depth = 12;
    int min_leaf = 1;

    // logistic regression
    double l2 = 1e-4;
    int lr_max_iters = 1500;

    bool operator==(const ModelConfig&) const = default;
    std::vector<std::string> validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct TrainMeta {
    int epochs_run = 0;
    double final_train_loss = 0.0;
    double best_val_auc = 0.0;
    std::vector<double> val_auc_history;
    std::vector<double> mlm_accuracy;  // per pre-training epoch
};

// --- baseline internals --------------------------------------------------

struct LinearModel {
    std::vector<float> weights;
    float bias = 0.0f;
    bool degenerate = false;  // single-class training set
    float prior = 0.5f;       // scored for every row when degenerate
};

struct TreeNode {
    int feature = -1;  // -1 marks a leaf
    float threshold = 0.0f;
    int left = -1;
    int right = -1;
    float value = 0.0f;  // leaf positive fraction
};

struct Forest {
    std::vector<std::vector<TreeNode>> trees;
    bool degenerate = false;
    float prior = 0.5f;
};

// --- neural internals -----------------------------------------------------

struct RecurrentNet {
    nn::ParamSet params;
    num::Tensor embed;  // vocab×hidden
    nn::GRUCell gru;
    nn::LSTMCell lstm;
    nn::Linear head;  // hidden→1
};

struct TransformerNet {
    nn::ParamSet params;
    nn::TransformerEncoder encoder;
    nn::Linear mlm_head;  // hidden→vocab, pre-training only
    nn::Linear cls_head;  // hidden→1, classifier only
    bool has_mlm = false;
    bool has_cls = false;
};

struct TrainedModel {
    ModelConfig config;
    std::uint64_t vocab_hash = 0;
    int vocab_size = 0;
    TrainMeta meta;

    // exactly one of these is populated, matching config.kind
    std::optional<LinearModel> linear;
    std::optional<Forest> forest;
    std::shared_ptr<RecurrentNet> recurrent;
    std::shared_ptr<TransformerNet> transformer;

    // patient ids seen during pre-training; fine-tuning refuses labeled
    // sets that overlap them
    std::vector<std::string> pretrain_patient_ids;
    bool pretrained_init = false;  // fine-tuned from a pre-trained encoder
};

// --- training -------------------------------------------------------------

TrainedModel train_lr(const corpus::BowMatrix& x, const std::vector<int>& labels,
                      const ModelConfig& config, std::uint64_t vocab_hash);

TrainedModel train_rf(const corpus::BowMatrix& x, const std::vector<int>& labels,
                      const ModelConfig& config, std::uint64_t vocab_hash);

// config.kind selects gru or lstm. Validation drives early stopping; pass
// an empty val set to train for max_epochs flat.
TrainedModel train_recurrent(const std::vector<const corpus::CodeSequence*>& train,
                             const std::vector<const corpus::CodeSequence*>& val,
                             const ModelConfig& config, int vocab_size,
                             std::uint64_t vocab_hash);

TrainedModel pretrain_transformer(const std::vector<const corpus::CodeSequence*>& unlabeled,
                                  const ModelConfig& config, int vocab_size,
                                  std::uint64_t vocab_hash);

// pretrained == nullptr trains from scratch (same architecture).
TrainedModel finetune_transformer(const TrainedModel* pretrained,
                                  const std::vector<const corpus::CodeSequence*>& train,
                                  const std::vector<const corpus::CodeSequence*>& val,
                                  const ModelConfig& config, int vocab_size,
                                  std::uint64_t vocab_hash);

// --- scoring & persistence -------------------------------------------------

std::vector<double> score_bow(const TrainedModel& model, const corpus::BowMatrix& x);
std::vector<double> score_sequences(const TrainedModel& model,
                                    const std::vector<const corpus::CodeSequence*>& seqs);

void save_model(const TrainedModel& model, const std::string& path);
TrainedModel load_model(const std::string& path);

}  // namespace ehrseq::models
