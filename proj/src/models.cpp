#include "ehrseq/models.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>

#include "ehrseq/evalkit.hpp"
#include "ehrseq/rng.hpp"

namespace ehrseq::models {

using corpus::CodeSequence;
using nlohmann::json;
using num::Graph;
using num::Tensor;

const char* to_string(Kind k) {
    switch (k) {
        case Kind::lr: return "lr";
        case Kind::rf: return "rf";
        case Kind::gru: return "gru";
        case Kind::lstm: return "lstm";
        case Kind::transformer: return "transformer";
    }
    return "?";
}

std::optional<Kind> kind_from_string(std::string_view s) {
    if (s == "lr") return Kind::lr;
    if (s == "rf") return Kind::rf;
    if (s == "gru") return Kind::gru;
    if (s == "lstm") return Kind::lstm;
    if (s == "transformer") return Kind::transformer;
    return std::nullopt;
}

std::vector<std::string> ModelConfig::validate() const {
    std::vector<std::string> v;
    if (hidden_size <= 0) v.push_back("hidden_size must be positive");
    if (kind == Kind::transformer) {
        if (heads <= 0 || layers <= 0 || ffn_size <= 0)
            v.push_back("transformer heads/layers/ffn_size must be positive");
        if (heads > 0 && hidden_size % heads != 0)
            v.push_back("hidden_size " + std::to_string(hidden_size) +
                        " is not divisible by heads " + std::to_string(heads));
        if (max_positions <= 1) v.push_back("max_positions must exceed 1");
        if (!(mask_rate > 0.0 && mask_rate <= 1.0))
            v.push_back("mask_rate must be in (0, 1]");
        if (pretrain_epochs <= 0) v.push_back("pretrain_epochs must be positive");
    }
    if (!(learning_rate > 0)) v.push_back("learning_rate must be positive");
    if (batch_size <= 0) v.push_back("batch_size must be positive");
    if (max_epochs <= 0) v.push_back("max_epochs must be positive");
    if (patience < 0) v.push_back("patience must be non-negative");
    if (!(dropout >= 0.0 && dropout < 1.0)) v.push_back("dropout must be in [0, 1)");
    if (kind == Kind::rf) {
        if (n_trees <= 0) v.push_back("n_trees must be positive");
        if (max_depth <= 0) v.push_back("max_depth must be positive");
        if (min_leaf < 1) v.push_back("min_leaf must be at least 1");
    }
    if (kind == Kind::lr) {
        if (l2 < 0) v.push_back("l2 must be non-negative");
        if (lr_max_iters <= 0) v.push_back("lr_max_iters must be positive");
    }
    return v;
}

void to_json(json& j, const ModelConfig& c) {
    j = json{{"kind", to_string(c.kind)},
             {"seed", c.seed},
             {"hidden_size", c.hidden_size},
             {"layers", c.layers},
             {"heads", c.heads},
             {"ffn_size", c.ffn_size},
             {"max_positions", c.max_positions},
             {"learning_rate", c.learning_rate},
             {"batch_size", c.batch_size},
             {"max_epochs", c.max_epochs},
             {"patience", c.patience},
             {"dropout", c.dropout},
             {"pretrain_epochs", c.pretrain_epochs},
             {"mask_rate", c.mask_rate},
             {"freeze_encoder", c.freeze_encoder},
             {"reverse_input", c.reverse_input},
             {"class_weighting", c.class_weighting},
             {"n_trees", c.n_trees},
             {"max_depth", c.max_depth},
             {"min_leaf", c.min_leaf},
             {"l2", c.l2},
             {"lr_max_iters", c.lr_max_iters}};
}

void from_json(const json& j, ModelConfig& c) {
    c = ModelConfig{};
    if (j.contains("kind")) {
        auto k = kind_from_string(j.at("kind").get<std::string>());
        if (!k) throw std::runtime_error("unknown model kind '" +
                                         j.at("kind").get<std::string>() + "'");
        c.kind = *k;
    }
    c.seed = j.value("seed", c.seed);
    c.hidden_size = j.value("hidden_size", c.hidden_size);
    c.layers = j.value("layers", c.layers);
    c.heads = j.value("heads", c.heads);
    c.ffn_size = j.value("ffn_size", c.ffn_size);
    c.max_positions = j.value("max_positions", c.max_positions);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.patience = j.value("patience", c.patience);
    c.dropout = j.value("dropout", c.dropout);
    c.pretrain_epochs = j.value("pretrain_epochs", c.pretrain_epochs);
    c.mask_rate = j.value("mask_rate", c.mask_rate);
    c.freeze_encoder = j.value("freeze_encoder", c.freeze_encoder);
    c.reverse_input = j.value("reverse_input", c.reverse_input);
    c.class_weighting = j.value("class_weighting", c.class_weighting);
    c.n_trees = j.value("n_trees", c.n_trees);
    c.max_depth = j.value("max_depth", c.max_depth);
    c.min_leaf = j.value("min_leaf", c.min_leaf);
    c.l2 = j.value("l2", c.l2);
    c.lr_max_iters = j.value("lr_max_iters", c.lr_max_iters);
}

namespace {

void check_binary_labels(const std::vector<int>& labels) {
    for (int y : labels)
        if (y != 0 && y != 1)
            throw std::runtime_error("training labels must be 0/1, got " + std::to_string(y));
}

double class_prior(const std::vector<int>& labels) {
    double pos = 0;
    for (int y : labels) pos += y;
    return labels.empty() ? 0.5 : pos / double(labels.size());
}

bool single_class(const std::vector<int>& labels) {
    bool pos = false, neg = false;
    for (int y : labels) (y ? pos : neg) = true;
    return !(pos && neg);
}

double stable_sigmoid(double z) {
    return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

void shuffle_indices(std::vector<std::size_t>& idx, rng::Xoshiro256& g) {
    for (std::size_t i = idx.size(); i > 1; --i)
        std::swap(idx[i - 1], idx[g.below(i)]);
}

std::vector<int> labels_of(const std::vector<const CodeSequence*>& seqs) {
    std::vector<int> y;
    y.reserve(seqs.size());
    for (const auto* s : seqs) y.push_back(s->label);
    return y;
}

Tensor label_tensor(const std::vector<const CodeSequence*>& seqs,
                    const std::vector<std::size_t>& order, std::size_t begin,
                    std::size_t end) {
    std::vector<float> t;
    t.reserve(end - begin);
    for (std::size_t i = begin; i < end; ++i)
        t.push_back(float(seqs[order[i]]->label));
    return Tensor::from_values(int(end - begin), 1, std::move(t));
}

// --- logistic regression --------------------------------------------------

Tensor bow_tensor(const corpus::BowMatrix& x) {
    return Tensor::from_values(int(x.rows), int(x.cols), x.values);
}

}  // namespace

TrainedModel train_lr(const corpus::BowMatrix& x, const std::vector<int>& labels,
                      const ModelConfig& config, std::uint64_t vocab_hash) {
    if (x.rows == 0) throw std::runtime_error("train_lr: empty training set");
    if (x.rows != labels.size())
        throw std::runtime_error("train_lr: " + std::to_string(x.rows) + " rows vs " +
                                 std::to_string(labels.size()) + " labels");
    check_binary_labels(labels);

    TrainedModel model;
    model.config = config;
    model.config.kind = Kind::lr;
    model.vocab_hash = vocab_hash;
    model.vocab_size = int(x.cols);
    model.linear = LinearModel{};
    model.linear->weights.assign(x.cols, 0.0f);
    model.linear->prior = float(class_prior(labels));
    if (single_class(labels)) {
        model.linear->degenerate = true;
        return model;
    }

    Tensor features = bow_tensor(x);
    Tensor targets = Tensor::from_values(int(x.rows), 1,
                                         std::vector<float>(labels.begin(), labels.end()));
    Tensor w = Tensor::zeros(int(x.cols), 1, true);
    Tensor b = Tensor::zeros(1, 1, true);

    num::Adam opt_w({w}, {.lr = float(config.learning_rate),
                          .weight_decay = float(config.l2)});
    num::Adam opt_b({b}, {.lr = float(config.learning_rate)});

    Graph g;
    double prev = 0.0;
    int calm = 0;
    for (int it = 0; it < config.lr_max_iters; ++it) {
        g.clear();
        w.zero_grad();
        b.zero_grad();
        Tensor logits = num::add_bias(g, num::matmul(g, features, w), b);
        Tensor loss = num::bce_with_logits(g, logits, targets);
        const double l = loss.item();
        g.backward(loss);
        opt_w.step();
        opt_b.step();
        model.meta.final_train_loss = l;
        model.meta.epochs_run = it + 1;
        if (it > 0 && std::abs(l - prev) < 1e-9 * std::max(1.0, std::abs(prev))) {
            if (++calm >= 10) break;
        } else {
            calm = 0;
        }
        prev = l;
    }
    for (std::size_t i = 0; i < x.cols; ++i) model.linear->weights[i] = w.values()[i];
    model.linear->bias = b.values()[0];
    return model;
}

// --- random forest ----------------------------------------------------------

namespace {

struct ForestBuilder {
    const corpus::BowMatrix& x;
    const std::vector<int>& y;
    const ModelConfig& cfg;
    int n_candidates;
    rng::Xoshiro256* rng = nullptr;
    std::vector<TreeNode>* nodes = nullptr;
    std::vector<int> feature_pool;

    ForestBuilder(const corpus::BowMatrix& x_, const std::vector<int>& y_,
                  const ModelConfig& cfg_)
        : x(x_), y(y_), cfg(cfg_) {
        n_candidates = std::max(1, int(std::sqrt(double(x.cols))));
        feature_pool.resize(x.cols);
        for (std::size_t f = 0; f < x.cols; ++f) feature_pool[f] = int(f);
    }

    int leaf(const std::vector<int>& idx) {
        double pos = 0;
        for (int i : idx) pos += y[std::size_t(i)];
        nodes->push_back(TreeNode{-1, 0.0f, -1, -1, float(pos / double(idx.size()))});
        return int(nodes->size()) - 1;
    }

    int build(std::vector<int>& idx, int depth) {
        double pos = 0;
        for (int i : idx) pos += y[std::size_t(i)];
        const bool pure = pos == 0.0 || pos == double(idx.size());
        if (depth >= cfg.max_depth || int(idx.size()) < 2 * cfg.min_leaf || pure)
            return leaf(idx);

        // sample candidate features without replacement
        for (int c = 0; c < n_candidates; ++c) {
            const std::size_t j = c + std::size_t(rng->below(feature_pool.size() - c));
            std::swap(feature_pool[std::size_t(c)], feature_pool[j]);
        }

        int best_f = -1;
        float best_thr = 0.0f;
        double best_imp = 1e18;
        std::vector<std::pair<float, int>> vals;
        for (int c = 0; c < n_candidates; ++c) {
            const int f = feature_pool[std::size_t(c)];
            vals.clear();
            for (int i : idx) vals.emplace_back(x.at(std::size_t(i), std::size_t(f)), i);
            std::sort(vals.begin(), vals.end(),
                      [](const auto& a, const auto& b) { return a.first < b.first; });
            const double n = double(vals.size());
            double lpos = 0, lcnt = 0;
            for (std::size_t k = 0; k + 1 < vals.size(); ++k) {
                lpos += y[std::size_t(vals[k].second)];
                lcnt += 1;
                if (vals[k].first == vals[k + 1].first) continue;  // tie group
                const double rcnt = n - lcnt, rpos = pos - lpos;
                if (lcnt < cfg.min_leaf || rcnt < cfg.min_leaf) continue;
                const double pl = lpos / lcnt, pr = rpos / rcnt;
                const double gini = lcnt * (1.0 - pl * pl - (1.0 - pl) * (1.0 - pl)) +
                                    rcnt * (1.0 - pr * pr - (1.0 - pr) * (1.0 - pr));
                if (gini < best_imp - 1e-12) {
                    best_imp = gini;
                    best_f = f;
                    best_thr = float((double(vals[k].first) + double(vals[k + 1].first)) / 2.0);
                }
            }
        }
        if (best_f < 0) return leaf(idx);

        std::vector<int> left, right;
        for (int i : idx)
            (x.at(std::size_t(i), std::size_t(best_f)) <= best_thr ? left : right).push_back(i);
        if (left.empty() || right.empty()) return leaf(idx);  // numeric edge
        nodes->push_back(TreeNode{best_f, best_thr, -1, -1, 0.0f});
        const int self = int(nodes->size()) - 1;
        const int l = build(left, depth + 1);
        const int r = build(right, depth + 1);
        (*nodes)[std::size_t(self)].left = l;
        (*nodes)[std::size_t(self)].right = r;
        return self;
    }
};

float tree_score(const std::vector<TreeNode>& nodes, const corpus::BowMatrix& x,
                 std::size_t row) {
    int n = 0;
    while (nodes[std::size_t(n)].feature >= 0) {
        const TreeNode& nd = nodes[std::size_t(n)];
        n = x.at(row, std::size_t(nd.feature)) <= nd.threshold ? nd.left : nd.right;
    }
    return nodes[std::size_t(n)].value;
}

}  // namespace

TrainedModel train_rf(const corpus::BowMatrix& x, const std::vector<int>& labels,
                      const ModelConfig& config, std::uint64_t vocab_hash) {
    if (x.rows == 0) throw std::runtime_error("train_rf: empty training set");
    if (x.rows != labels.size())
        throw std::runtime_error("train_rf: " + std::to_string(x.rows) + " rows vs " +
                                 std::to_string(labels.size()) + " labels");
    check_binary_labels(labels);

    TrainedModel model;
    model.config = config;
    model.config.kind = Kind::rf;
    model.vocab_hash = vocab_hash;
    model.vocab_size = int(x.cols);
    model.forest = Forest{};
    model.forest->prior = float(class_prior(labels));
    if (single_class(labels)) {
        model.forest->degenerate = true;
        return model;
    }

    ForestBuilder builder(x, labels, config);
    for (int t = 0; t < config.n_trees; ++t) {
        rng::Xoshiro256 g = rng::Xoshiro256::substream(config.seed, std::uint64_t(t));
        builder.rng = &g;
        std::vector<int> idx(x.rows);
        for (auto& i : idx) i = int(g.below(x.rows));
        std::sort(idx.begin(), idx.end());  // draw order must not matter
        std::vector<TreeNode> nodes;
        builder.nodes = &nodes;
        builder.build(idx, 0);
        model.forest->trees.push_back(std::move(nodes));
    }
    model.meta.epochs_run = config.n_trees;
    return model;
}

// --- shared neural plumbing -------------------------------------------------

namespace {

std::shared_ptr<RecurrentNet> make_recurrent_net(const ModelConfig& cfg, int vocab_size) {
    auto net = std::make_shared<RecurrentNet>();
    rng::Xoshiro256 g = rng::Xoshiro256::substream(cfg.seed, 0xA11CE);
    net->embed = net->params.add("embed.tok", nn::xavier(vocab_size, cfg.hidden_size, g));
    if (cfg.kind == Kind::gru)
        net->gru = nn::GRUCell(net->params, "gru", cfg.hidden_size, cfg.hidden_size, g);
    else
        net->lstm = nn::LSTMCell(net->params, "lstm", cfg.hidden_size, cfg.hidden_size, g);
    net->head.W = net->params.add("cls.w", Tensor::zeros(cfg.hidden_size, 1));
    net->head.b = net->params.add("cls.b", Tensor::zeros(1, 1));
    return net;
}

std::shared_ptr<TransformerNet> make_transformer_net(const ModelConfig& cfg, int vocab_size,
                                                     bool mlm, bool cls) {
    auto net = std::make_shared<TransformerNet>();
    rng::Xoshiro256 g = rng::Xoshiro256::substream(cfg.seed, 0xA11CE);
    nn::TransformerConfig tc;
    tc.vocab_size = vocab_size;
    tc.hidden = cfg.hidden_size;
    tc.heads = cfg.heads;
    tc.layers = cfg.layers;
    tc.ffn = cfg.ffn_size;
    tc.max_positions = cfg.max_positions;
    net->encoder = nn::TransformerEncoder(net->params, tc, g);
    if (mlm) {
        net->mlm_head = nn::Linear(net->params, "mlm", cfg.hidden_size, vocab_size, g);
        net->has_mlm = true;
    }
    if (cls) {
        net->cls_head.W = net->params.add("cls.w", Tensor::zeros(cfg.hidden_size, 1));
        net->cls_head.b = net->params.add("cls.b", Tensor::zeros(1, 1));
        net->has_cls = true;
    }
    return net;
}

// Per-timestep id/mask views of a left-padded batch, oldest token first.
struct StepBatch {
    int batch = 0, len = 0;
    std::vector<std::vector<int>> ids;  // len × batch
    std::vector<Tensor> masks;          // len × (batch×hidden), 1 real / 0 pad
};

StepBatch make_step_batch(const std::vector<const std::vector<int>*>& seqs, int hidden,
                          bool reverse) {
    StepBatch b;
    b.batch = int(seqs.size());
    std::size_t longest = 1;
    for (const auto* s : seqs) longest = std::max(longest, s->size());
    b.len = int(longest);
    b.ids.assign(std::size_t(b.len), std::vector<int>(std::size_t(b.batch), corpus::kPad));
    for (int t = 0; t < b.len; ++t) {
        Tensor mask = Tensor::zeros(b.batch, hidden);
        for (int s = 0; s < b.batch; ++s) {
            const auto& ids = *seqs[std::size_t(s)];
            const int pad = b.len - int(ids.size());
            if (t >= pad) {
                const std::size_t k = std::size_t(t - pad);
                b.ids[std::size_t(t)][std::size_t(s)] =
                    reverse ? ids[ids.size() - 1 - k] : ids[k];
                for (int j = 0; j < hidden; ++j) mask.at(s, j) = 1.0f;
            }
        }
        b.masks.push_back(mask);
    }
    return b;
}

Tensor recurrent_logits(Graph& g, const RecurrentNet& net, const ModelConfig& cfg,
                        const std::vector<const std::vector<int>*>& seqs,
                        const num::DropoutMask* drop) {
    StepBatch b = make_step_batch(seqs, cfg.hidden_size, cfg.reverse_input);
    Tensor h = Tensor::zeros(b.batch, cfg.hidden_size);
    nn::LSTMCell::State state{h, Tensor::zeros(b.batch, cfg.hidden_size)};
    for (int t = 0; t < b.len; ++t) {
        Tensor x = num::embedding(g, net.embed, b.ids[std::size_t(t)]);
        if (cfg.kind == Kind::gru)
            h = net.gru.step(g, x, h, b.masks[std::size_t(t)]);
        else
            state = net.lstm.step(g, x, state, b.masks[std::size_t(t)]);
    }
    Tensor final_h = cfg.kind == Kind::gru ? h : state.h;
    if (drop) final_h = num::dropout(g, final_h, *drop);
    return net.head.forward(g, final_h);
}

Tensor transformer_cls_logits(Graph& g, const TransformerNet& net,
                              const std::vector<const std::vector<int>*>& seqs,
                              const num::DropoutMask* drop) {
    auto batch = nn::TransformerEncoder::make_batch(seqs);
    Tensor hidden = net.encoder.forward(g, batch);
    Tensor cls = num::gather_rows(g, hidden, batch.cls_rows);
    if (drop) cls = num::dropout(g, cls, *drop);
    return net.cls_head.forward(g, cls);
}

std::vector<const std::vector<int>*> token_ptrs(
    const std::vector<const CodeSequence*>& seqs, const std::vector<std::size_t>& order,
    std::size_t begin, std::size_t end) {
    std::vector<const std::vector<int>*> out;
    out.reserve(end - begin);
    for (std::size_t i = begin; i < end; ++i) out.push_back(&seqs[order[i]]->token_ids);
    return out;
}

num::DropoutMask make_dropout_mask(std::size_t n, double rate, rng::Xoshiro256& g) {
    num::DropoutMask m;
    m.keep.resize(n);
    const double keep_prob = 1.0 - rate;
    const float scale = float(1.0 / keep_prob);
    for (auto& v : m.keep) v = g.uniform01() < keep_prob ? scale : 0.0f;
    return m;
}

// Scores with a logits functor; used by both training validation and the
// public scoring entry points.
template <class LogitsFn>
std::vector<double> score_with(const std::vector<const CodeSequence*>& seqs, int batch_size,
                               LogitsFn&& logits_fn) {
    std::vector<double> out;
    out.reserve(seqs.size());
    std::vector<std::size_t> order(seqs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Graph g;
    g.set_recording(false);
    for (std::size_t begin = 0; begin < seqs.size(); begin += std::size_t(batch_size)) {
        const std::size_t end = std::min(seqs.size(), begin + std::size_t(batch_size));
        Tensor logits = logits_fn(g, token_ptrs(seqs, order, begin, end));
        Tensor probs = num::sigmoid(g, logits);
        for (int i = 0; i < probs.rows(); ++i) out.push_back(double(probs.at(i, 0)));
    }
    return out;
}

struct BestState {
    double auc = -1.0;
    int since = 0;
    std::vector<std::vector<float>> values;

    void snapshot(const nn::ParamSet& ps) {
        values.clear();
        for (const auto& [n, t] : ps.items()) values.push_back(t.values());
    }
    void restore(nn::ParamSet& ps) const {
        if (values.empty()) return;
        std::size_t k = 0;
        for (const auto& [n, t] : ps.items()) {
            Tensor h = t;  // shared storage
            h.values() = values[k++];
        }
    }
};

Tensor class_weights(const std::vector<const CodeSequence*>& seqs,
                     const std::vector<std::size_t>& order, std::size_t begin,
                     std::size_t end, double w_pos, double w_neg) {
    std::vector<float> w;
    w.reserve(end - begin);
    for (std::size_t i = begin; i < end; ++i)
        w.push_back(float(seqs[order[i]]->label ? w_pos : w_neg));
    return Tensor::from_values(int(end - begin), 1, std::move(w));
}

// Shared epoch-driven trainer for the sequence models.
template <class LogitsFn>
TrainMeta train_sequence_model(const std::vector<const CodeSequence*>& train,
                               const std::vector<const CodeSequence*>& val,
                               const ModelConfig& cfg, nn::ParamSet& params,
                               std::vector<Tensor> opt_params, LogitsFn&& logits_fn) {
    if (train.empty()) throw std::runtime_error("training set is empty");
    check_binary_labels(labels_of(train));
    if (!val.empty()) check_binary_labels(labels_of(val));

    num::Adam opt(std::move(opt_params), {.lr = float(cfg.learning_rate)});
    TrainMeta meta;
    BestState best;

    double w_pos = 1.0, w_neg = 1.0;
    if (cfg.class_weighting) {
        const double prior = class_prior(labels_of(train));
        if (prior > 0.0 && prior < 1.0) {
            w_pos = 0.5 / prior;
            w_neg = 0.5 / (1.0 - prior);
        }
    }

    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    const std::vector<int> val_labels = labels_of(val);

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        rng::Xoshiro256 shuffle_rng =
            rng::Xoshiro256::substream(cfg.seed, 0xE9000 + std::uint64_t(epoch));
        shuffle_indices(order, shuffle_rng);
        rng::Xoshiro256 drop_rng =
            rng::Xoshiro256::substream(cfg.seed, 0xD0000 + std::uint64_t(epoch));

        double loss_sum = 0.0;
        std::size_t batches = 0;
        Graph g;
        for (std::size_t begin = 0; begin < train.size();
             begin += std::size_t(cfg.batch_size)) {
            const std::size_t end =
                std::min(train.size(), begin + std::size_t(cfg.batch_size));
            g.clear();
            for (const auto& [name, t] : params.items()) {
                Tensor h = t;
                h.zero_grad();
            }

            num::DropoutMask mask;
            const num::DropoutMask* mask_ptr = nullptr;
            if (cfg.dropout > 0.0) {
                mask = make_dropout_mask((end - begin) * std::size_t(cfg.hidden_size),
                                         cfg.dropout, drop_rng);
                mask_ptr = &mask;
            }
            Tensor logits = logits_fn(g, token_ptrs(train, order, begin, end), mask_ptr);
            Tensor targets = label_tensor(train, order, begin, end);
            Tensor loss;
            if (cfg.class_weighting) {
                Tensor w = class_weights(train, order, begin, end, w_pos, w_neg);
                loss = num::bce_with_logits(g, logits, targets, w);
            } else {
                loss = num::bce_with_logits(g, logits, targets);
            }
            loss_sum += double(loss.item());
            ++batches;
            g.backward(loss);
            opt.step();
        }
        meta.final_train_loss = loss_sum / double(std::max<std::size_t>(1, batches));
        meta.epochs_run = epoch + 1;

        if (val.empty()) continue;
        auto val_scores = score_with(val, cfg.batch_size,
                                     [&](Graph& sg, std::vector<const std::vector<int>*> b) {
                                         return logits_fn(sg, std::move(b), nullptr);
                                     });
        const double auc = evalkit::roc_auc(val_scores, val_labels).auc;
        meta.val_auc_history.push_back(auc);
        if (auc > best.auc) {
            best.auc = auc;
            best.since = 0;
            best.snapshot(params);
        } else if (++best.since >= cfg.patience) {
            break;
        }
    }
    if (!val.empty()) {
        best.restore(params);
        meta.best_val_auc = best.auc;
    }
    return meta;
}

}  // namespace

TrainedModel train_recurrent(const std::vector<const CodeSequence*>& train,
                             const std::vector<const CodeSequence*>& val,
                             const ModelConfig& config, int vocab_size,
                             std::uint64_t vocab_hash) {
    if (config.kind != Kind::gru && config.kind != Kind::lstm)
        throw std::runtime_error("train_recurrent: kind must be gru or lstm");
    if (vocab_size <= corpus::kReserved)
        throw std::runtime_error("train_recurrent: vocabulary too small");

    TrainedModel model;
    model.config = config;
    model.vocab_hash = vocab_hash;
    model.vocab_size = vocab_size;
    model.recurrent = make_recurrent_net(config, vocab_size);
    auto& net = *model.recurrent;
    model.meta = train_sequence_model(
        train, val, config, net.params, net.params.tensors(),
        [&](Graph& g, std::vector<const std::vector<int>*> seqs,
            const num::DropoutMask* drop) {
            return recurrent_logits(g, net, config, seqs, drop);
        });
    return model;
}

TrainedModel pretrain_transformer(const std::vector<const CodeSequence*>& unlabeled,
                                  const ModelConfig& config, int vocab_size,
                                  std::uint64_t vocab_hash) {
    if (config.kind != Kind::transformer)
        throw std::runtime_error("pretrain_transformer: kind must be transformer");
    if (!(config.mask_rate > 0.0 && config.mask_rate <= 1.0))
        throw std::runtime_error("pretrain_transformer: mask_rate must be in (0, 1]");
    if (vocab_size <= corpus::kReserved)
        throw std::runtime_error("pretrain_transformer: vocabulary too small");

    std::vector<const CodeSequence*> seqs;
    for (const auto* s : unlabeled)
        if (!s->token_ids.empty()) seqs.push_back(s);
    if (seqs.empty())
        throw std::runtime_error("pretrain_transformer: no non-empty sequences");

    TrainedModel model;
    model.config = config;
    model.vocab_hash = vocab_hash;
    model.vocab_size = vocab_size;
    model.transformer = make_transformer_net(config, vocab_size, /*mlm=*/true, /*cls=*/false);
    auto& net = *model.transformer;

    std::set<std::string> ids;
    for (const auto* s : seqs) ids.insert(s->patient_id);
    model.pretrain_patient_ids.assign(ids.begin(), ids.end());

    num::Adam opt(net.params.tensors(), {.lr = float(config.learning_rate)});
    const int n_real_codes = vocab_size - corpus::kReserved;

    std::vector<std::size_t> order(seqs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < config.pretrain_epochs; ++epoch) {
        rng::Xoshiro256 shuffle_rng =
            rng::Xoshiro256::substream(config.seed, 0xE9000 + std::uint64_t(epoch));
        shuffle_indices(order, shuffle_rng);
        rng::Xoshiro256 mask_rng =
            rng::Xoshiro256::substream(config.seed, 0x3A000 + std::uint64_t(epoch));

        double loss_sum = 0.0;
        std::size_t batches = 0, correct = 0, masked_total = 0;
        Graph g;
        for (std::size_t begin = 0; begin < seqs.size();
             begin += std::size_t(config.batch_size)) {
            const std::size_t end =
                std::min(seqs.size(), begin + std::size_t(config.batch_size));
            auto batch = nn::TransformerEncoder::make_batch(
                token_ptrs(seqs, order, begin, end));

            // choose positions, then corrupt them 80/10/10
            std::vector<int> masked_rows;
            std::vector<int> targets;
            std::vector<std::size_t> candidates;
            for (std::size_t r = 0; r < batch.token_ids.size(); ++r)
                if (batch.key_mask[r] == 0.0f && batch.token_ids[r] != corpus::kCls)
                    candidates.push_back(r);
            for (std::size_t r : candidates) {
                if (!mask_rng.chance(config.mask_rate)) continue;
                masked_rows.push_back(int(r));
                targets.push_back(batch.token_ids[r]);
                const std::uint64_t roll = mask_rng.below(10);
                if (roll < 8)
                    batch.token_ids[r] = corpus::kMask;
                else if (roll == 8)
                    batch.token_ids[r] =
                        corpus::kReserved + int(mask_rng.below(std::uint64_t(n_real_codes)));
                // roll == 9: keep the original token
            }
            if (masked_rows.empty() && !candidates.empty()) {
                // tiny batch, unlucky draw: mask the first candidate so the
                // loss stays defined
                const std::size_t r = candidates[0];
                masked_rows.push_back(int(r));
                targets.push_back(batch.token_ids[r]);
                batch.token_ids[r] = corpus::kMask;
            }
            if (masked_rows.empty()) continue;

            g.clear();
            for (const auto& [name, t] : net.params.items()) {
                Tensor h = t;
                h.zero_grad();
            }
            Tensor hidden = net.encoder.forward(g, batch);
            Tensor picked = num::gather_rows(g, hidden, masked_rows);
            Tensor logits = net.mlm_head.forward(g, picked);
            Tensor loss = num::masked_cross_entropy(g, logits, targets);
            loss_sum += double(loss.item());
            ++batches;

            for (int i = 0; i < logits.rows(); ++i) {
                int arg = 0;
                float mx = logits.at(i, 0);
                for (int j = 1; j < logits.cols(); ++j)
                    if (logits.at(i, j) > mx) {
                        mx = logits.at(i, j);
                        arg = j;
                    }
                correct += arg == targets[std::size_t(i)];
                ++masked_total;
            }

            g.backward(loss);
            opt.step();
        }
        model.meta.final_train_loss = loss_sum / double(std::max<std::size_t>(1, batches));
        model.meta.mlm_accuracy.push_back(
            masked_total ? double(correct) / double(masked_total) : 0.0);
        model.meta.epochs_run = epoch + 1;
    }
    return model;
}

TrainedModel finetune_transformer(const TrainedModel* pretrained,
                                  const std::vector<const CodeSequence*>& train,
                                  const std::vector<const CodeSequence*>& val,
                                  const ModelConfig& config, int vocab_size,
                                  std::uint64_t vocab_hash) {
    ModelConfig cfg = config;
    cfg.kind = Kind::transformer;
    if (pretrained) {
        if (!pretrained->transformer || !pretrained->transformer->has_mlm)
            throw std::runtime_error("finetune: given model is not a pre-trained encoder");
        if (pretrained->vocab_hash != vocab_hash)
            throw std::runtime_error("finetune: vocabulary hash mismatch (pretrained " +
                                     std::to_string(pretrained->vocab_hash) + ", corpus " +
                                     std::to_string(vocab_hash) + ")");
        // architecture must match to reuse the weights
        cfg.hidden_size = pretrained->config.hidden_size;
        cfg.layers = pretrained->config.layers;
        cfg.heads = pretrained->config.heads;
        cfg.ffn_size = pretrained->config.ffn_size;
        cfg.max_positions = pretrained->config.max_positions;

        const auto& banned = pretrained->pretrain_patient_ids;  // sorted
        auto check = [&](const std::vector<const CodeSequence*>& set, const char* name) {
            for (const auto* s : set)
                if (std::binary_search(banned.begin(), banned.end(), s->patient_id))
                    throw std::runtime_error(std::string("finetune: ") + name +
                                             " patient '" + s->patient_id +
                                             "' was part of the pre-training corpus");
        };
        check(train, "training");
        check(val, "validation");
    }

    TrainedModel model;
    model.config = cfg;
    model.vocab_hash = vocab_hash;
    model.vocab_size = vocab_size;
    model.pretrained_init = pretrained != nullptr;
    model.transformer = make_transformer_net(cfg, vocab_size, /*mlm=*/false, /*cls=*/true);
    auto& net = *model.transformer;
    if (pretrained) net.params.copy_common_from(pretrained->transformer->params);

    std::vector<Tensor> trainable;
    if (cfg.freeze_encoder) {
        trainable = {net.cls_head.W, net.cls_head.b};
    } else {
        trainable = net.params.tensors();
    }
    model.meta = train_sequence_model(
        train, val, cfg, net.params, std::move(trainable),
        [&](Graph& g, std::vector<const std::vector<int>*> seqs,
            const num::DropoutMask* drop) {
            return transformer_cls_logits(g, net, seqs, drop);
        });
    return model;
}

// --- scoring -----------------------------------------------------------------

std::vector<double> score_bow(const TrainedModel& model, const corpus::BowMatrix& x) {
    if (int(x.cols) != model.vocab_size)
        throw std::runtime_error("score_bow: " + std::to_string(x.cols) +
                                 " features, model expects " +
                                 std::to_string(model.vocab_size));
    std::vector<double> out;
    out.reserve(x.rows);
    if (model.config.kind == Kind::lr) {
        const auto& lm = *model.linear;
        for (std::size_t r = 0; r < x.rows; ++r) {
            if (lm.degenerate) {
                out.push_back(double(lm.prior));
                continue;
            }
            double z = lm.bias;
            for (std::size_t c = 0; c < x.cols; ++c)
                z += double(lm.weights[c]) * double(x.at(r, c));
            out.push_back(stable_sigmoid(z));
        }
    } else if (model.config.kind == Kind::rf) {
        const auto& f = *model.forest;
        for (std::size_t r = 0; r < x.rows; ++r) {
            if (f.degenerate) {
                out.push_back(double(f.prior));
                continue;
            }
            double sum = 0.0;
            for (const auto& tree : f.trees) sum += double(tree_score(tree, x, r));
            out.push_back(sum / double(f.trees.size()));
        }
    } else {
        throw std::runtime_error("score_bow: model kind is not a bag-of-words model");
    }
    return out;
}

std::vector<double> score_sequences(const TrainedModel& model,
                                    const std::vector<const CodeSequence*>& seqs) {
    switch (model.config.kind) {
        case Kind::gru:
        case Kind::lstm: {
            const auto& net = *model.recurrent;
            return score_with(seqs, model.config.batch_size,
                              [&](Graph& g, std::vector<const std::vector<int>*> b) {
                                  return recurrent_logits(g, net, model.config, b, nullptr);
                              });
        }
        case Kind::transformer: {
            const auto& net = *model.transformer;
            if (!net.has_cls)
                throw std::runtime_error(
                    "score_sequences: encoder-only model has no classification head");
            return score_with(seqs, model.config.batch_size,
                              [&](Graph& g, std::vector<const std::vector<int>*> b) {
                                  return transformer_cls_logits(g, net, b, nullptr);
                              });
        }
        default:
            throw std::runtime_error("score_sequences: model kind is not a sequence model");
    }
}

// --- persistence ----------------------------------------------------------------

namespace {

json meta_to_json(const TrainMeta& m) {
    return json{{"epochs_run", m.epochs_run},
                {"final_train_loss", m.final_train_loss},
                {"best_val_auc", m.best_val_auc},
                {"val_auc_history", m.val_auc_history},
                {"mlm_accuracy", m.mlm_accuracy}};
}

TrainMeta meta_from_json(const json& j) {
    TrainMeta m;
    m.epochs_run = j.value("epochs_run", 0);
    m.final_train_loss = j.value("final_train_loss", 0.0);
    m.best_val_auc = j.value("best_val_auc", 0.0);
    m.val_auc_history = j.value("val_auc_history", std::vector<double>{});
    m.mlm_accuracy = j.value("mlm_accuracy", std::vector<double>{});
    return m;
}

}  // namespace

void save_model(const TrainedModel& model, const std::string& path) {
    const Kind kind = model.config.kind;
    if (kind == Kind::lr || kind == Kind::rf) {
        json j;
        j["model"] = to_string(kind);
        j["config"] = model.config;
        j["vocab_hash"] = model.vocab_hash;
        j["vocab_size"] = model.vocab_size;
        j["meta"] = meta_to_json(model.meta);
        if (kind == Kind::lr) {
            const auto& lm = *model.linear;
            j["weights"] = std::vector<double>(lm.weights.begin(), lm.weights.end());
            j["bias"] = double(lm.bias);
            j["degenerate"] = lm.degenerate;
            j["prior"] = double(lm.prior);
        } else {
            const auto& f = *model.forest;
            j["degenerate"] = f.degenerate;
            j["prior"] = double(f.prior);
            auto trees = json::array();
            for (const auto& tree : f.trees) {
                auto nodes = json::array();
                for (const auto& nd : tree)
                    nodes.push_back({{"f", nd.feature},
                                     {"t", double(nd.threshold)},
                                     {"l", nd.left},
                                     {"r", nd.right},
                                     {"v", double(nd.value)}});
                trees.push_back(std::move(nodes));
            }
            j["trees"] = std::move(trees);
        }
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
        out << j.dump() << '\n';
        if (!out) throw std::runtime_error("write failure on '" + path + "'");
        return;
    }

    // neural checkpoint
    json header;
    const bool encoder_only = kind == Kind::transformer && model.transformer &&
                              model.transformer->has_mlm && !model.transformer->has_cls;
    header["model"] = encoder_only ? "transformer_pretrain" : to_string(kind);
    header["config"] = model.config;
    header["vocab_hash"] = model.vocab_hash;
    header["vocab_size"] = model.vocab_size;
    header["meta"] = meta_to_json(model.meta);
    if (kind == Kind::transformer) {
        header["pretrain_patient_ids"] = model.pretrain_patient_ids;
        header["pretrained_init"] = model.pretrained_init;
    }
    const nn::ParamSet& ps =
        kind == Kind::transformer ? model.transformer->params : model.recurrent->params;
    num::save_checkpoint(path, header, ps.items());
}

TrainedModel load_model(const std::string& path) {
    {
        std::ifstream probe(path, std::ios::binary);
        if (!probe) throw std::runtime_error("cannot open model file '" + path + "'");
        char head[8] = {};
        probe.read(head, 8);
        if (probe.gcount() == 8 && std::string_view(head, 8) == "EHRSQCKP") {
            auto ckpt = num::load_checkpoint(path);
            const std::string kind_str = ckpt.header.at("model").get<std::string>();
            TrainedModel model;
            model.config = ckpt.header.at("config").get<ModelConfig>();
            model.vocab_hash = ckpt.header.at("vocab_hash").get<std::uint64_t>();
            model.vocab_size = ckpt.header.at("vocab_size").get<int>();
            model.meta = meta_from_json(ckpt.header.at("meta"));
            if (kind_str == "gru" || kind_str == "lstm") {
                model.recurrent = make_recurrent_net(model.config, model.vocab_size);
                model.recurrent->params.load_from(ckpt);
            } else if (kind_str == "transformer" || kind_str == "transformer_pretrain") {
                const bool mlm = kind_str == "transformer_pretrain";
                model.transformer =
                    make_transformer_net(model.config, model.vocab_size, mlm, !mlm);
                model.transformer->params.load_from(ckpt);
                model.pretrain_patient_ids = ckpt.header.value(
                    "pretrain_patient_ids", std::vector<std::string>{});
                model.pretrained_init = ckpt.header.value("pretrained_init", false);
            } else {
                throw std::runtime_error("unknown checkpoint model kind '" + kind_str + "'");
            }
            return model;
        }
    }

    std::ifstream in(path);
    json j = json::parse(in);
    const std::string kind_str = j.at("model").get<std::string>();
    TrainedModel model;
    model.config = j.at("config").get<ModelConfig>();
    model.vocab_hash = j.at("vocab_hash").get<std::uint64_t>();
    model.vocab_size = j.at("vocab_size").get<int>();
    model.meta = meta_from_json(j.at("meta"));
    if (kind_str == "lr") {
        LinearModel lm;
        auto w = j.at("weights").get<std::vector<double>>();
        lm.weights.assign(w.begin(), w.end());
        lm.bias = float(j.at("bias").get<double>());
        lm.degenerate = j.at("degenerate").get<bool>();
        lm.prior = float(j.at("prior").get<double>());
        model.linear = std::move(lm);
    } else if (kind_str == "rf") {
        Forest f;
        f.degenerate = j.at("degenerate").get<bool>();
        f.prior = float(j.at("prior").get<double>());
        for (const auto& tree : j.at("trees")) {
            std::vector<TreeNode> nodes;
            for (const auto& nd : tree)
                nodes.push_back(TreeNode{nd.at("f").get<int>(),
                                         float(nd.at("t").get<double>()),
                                         nd.at("l").get<int>(), nd.at("r").get<int>(),
                                         float(nd.at("v").get<double>())});
            f.trees.push_back(std::move(nodes));
        }
        model.forest = std::move(f);
    } else {
        throw std::runtime_error("unknown model kind '" + kind_str + "' in '" + path + "'");
    }
    return model;
}

}  // namespace ehrseq::models
