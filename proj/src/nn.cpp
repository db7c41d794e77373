#include "ehrseq/nn.hpp"

#include <cmath>
#include <stdexcept>

#include "ehrseq/corpus.hpp"

namespace ehrseq::nn {

using num::Graph;
using num::Tensor;

Tensor ParamSet::add(const std::string& name, Tensor t) {
    for (const auto& [n, _] : items_)
        if (n == name) throw std::runtime_error("duplicate parameter name '" + name + "'");
    t.data()->requires_grad = true;
    items_.emplace_back(name, t);
    return t;
}

std::vector<Tensor> ParamSet::tensors() const {
    std::vector<Tensor> out;
    out.reserve(items_.size());
    for (const auto& [n, t] : items_) out.push_back(t);
    return out;
}

void ParamSet::load_from(const num::Checkpoint& ckpt) {
    for (auto& [name, t] : items_) {
        const Tensor& src = ckpt.find(name);
        if (src.rows() != t.rows() || src.cols() != t.cols())
            throw std::runtime_error("checkpoint block '" + name + "' is " +
                                     num::shape_string(src) + ", expected " +
                                     num::shape_string(t));
        t.values() = src.values();
    }
}

std::size_t ParamSet::copy_common_from(const ParamSet& other) {
    std::size_t copied = 0;
    for (auto& [name, t] : items_) {
        for (const auto& [oname, ot] : other.items_) {
            if (oname != name) continue;
            if (ot.rows() != t.rows() || ot.cols() != t.cols())
                throw std::runtime_error("parameter '" + name + "' is " +
                                         num::shape_string(ot) + " in the source, " +
                                         num::shape_string(t) + " here");
            t.values() = ot.values();
            ++copied;
            break;
        }
    }
    return copied;
}

Tensor xavier(int rows, int cols, rng::Xoshiro256& g) {
    const double a = std::sqrt(6.0 / (double(rows) + double(cols)));
    Tensor t = Tensor::zeros(rows, cols);
    for (auto& v : t.values()) v = float((g.uniform01() * 2.0 - 1.0) * a);
    return t;
}

Linear::Linear(ParamSet& ps, const std::string& prefix, int in, int out, rng::Xoshiro256& g) {
    W = ps.add(prefix + ".w", xavier(in, out, g));
    b = ps.add(prefix + ".b", Tensor::zeros(1, out));
}

Tensor Linear::forward(Graph& g, const Tensor& x) const {
    return num::add_bias(g, num::matmul(g, x, W), b);
}

namespace {

Tensor ones_minus(Graph& g, const Tensor& m) {
    Tensor one = Tensor::full(m.rows(), m.cols(), 1.0f);
    return num::sub(g, one, m);
}

}  // namespace

GRUCell::GRUCell(ParamSet& ps, const std::string& prefix, int input, int hidden,
                 rng::Xoshiro256& g)
    : input_size(input), hidden_size(hidden) {
    W = ps.add(prefix + ".w", xavier(input, 3 * hidden, g));
    U = ps.add(prefix + ".u", xavier(hidden, 3 * hidden, g));
    bx = ps.add(prefix + ".bx", Tensor::zeros(1, 3 * hidden));
    bh = ps.add(prefix + ".bh", Tensor::zeros(1, 3 * hidden));
}

Tensor GRUCell::step(Graph& g, const Tensor& x, const Tensor& h, const Tensor& mask) const {
    const int H = hidden_size;
    Tensor gx = num::add_bias(g, num::matmul(g, x, W), bx);
    Tensor gh = num::add_bias(g, num::matmul(g, h, U), bh);
    Tensor r = num::sigmoid(g, num::add(g, num::slice_cols(g, gx, 0, H),
                                        num::slice_cols(g, gh, 0, H)));
    Tensor z = num::sigmoid(g, num::add(g, num::slice_cols(g, gx, H, 2 * H),
                                        num::slice_cols(g, gh, H, 2 * H)));
    Tensor n = num::tanh_t(g, num::add(g, num::slice_cols(g, gx, 2 * H, 3 * H),
                                       num::mul(g, r, num::slice_cols(g, gh, 2 * H, 3 * H))));
    Tensor h_new = num::add(g, num::mul(g, ones_minus(g, z), n), num::mul(g, z, h));
    return num::add(g, num::mul(g, mask, h_new), num::mul(g, ones_minus(g, mask), h));
}

LSTMCell::LSTMCell(ParamSet& ps, const std::string& prefix, int input, int hidden,
                   rng::Xoshiro256& g)
    : input_size(input), hidden_size(hidden) {
    W = ps.add(prefix + ".w", xavier(input, 4 * hidden, g));
    U = ps.add(prefix + ".u", xavier(hidden, 4 * hidden, g));
    bx = ps.add(prefix + ".bx", Tensor::zeros(1, 4 * hidden));
    bh = ps.add(prefix + ".bh", Tensor::zeros(1, 4 * hidden));
}

LSTMCell::State LSTMCell::step(Graph& g, const Tensor& x, const State& s,
                               const Tensor& mask) const {
    const int H = hidden_size;
    Tensor gates = num::add(g, num::add_bias(g, num::matmul(g, x, W), bx),
                            num::add_bias(g, num::matmul(g, s.h, U), bh));
    Tensor i = num::sigmoid(g, num::slice_cols(g, gates, 0, H));
    Tensor f = num::sigmoid(g, num::slice_cols(g, gates, H, 2 * H));
    Tensor c_tilde = num::tanh_t(g, num::slice_cols(g, gates, 2 * H, 3 * H));
    Tensor o = num::sigmoid(g, num::slice_cols(g, gates, 3 * H, 4 * H));
    Tensor c_new = num::add(g, num::mul(g, f, s.c), num::mul(g, i, c_tilde));
    Tensor h_new = num::mul(g, o, num::tanh_t(g, c_new));
    Tensor keep = ones_minus(g, mask);
    State out;
    out.c = num::add(g, num::mul(g, mask, c_new), num::mul(g, keep, s.c));
    out.h = num::add(g, num::mul(g, mask, h_new), num::mul(g, keep, s.h));
    return out;
}

EncoderBlock::EncoderBlock(ParamSet& ps, const std::string& prefix, int hidden_, int heads_,
                           int ffn_, rng::Xoshiro256& g)
    : hidden(hidden_), heads(heads_), ffn(ffn_) {
    if (hidden % heads != 0)
        throw std::runtime_error("encoder: hidden " + std::to_string(hidden) +
                                 " not divisible by heads " + std::to_string(heads));
    wq = Linear(ps, prefix + ".wq", hidden, hidden, g);
    wk = Linear(ps, prefix + ".wk", hidden, hidden, g);
    wv = Linear(ps, prefix + ".wv", hidden, hidden, g);
    wo = Linear(ps, prefix + ".wo", hidden, hidden, g);
    ff1 = Linear(ps, prefix + ".ff1", hidden, ffn, g);
    ff2 = Linear(ps, prefix + ".ff2", ffn, hidden, g);
    ln1_g = ps.add(prefix + ".ln1.g", Tensor::full(1, hidden, 1.0f));
    ln1_b = ps.add(prefix + ".ln1.b", Tensor::zeros(1, hidden));
    ln2_g = ps.add(prefix + ".ln2.g", Tensor::full(1, hidden, 1.0f));
    ln2_b = ps.add(prefix + ".ln2.b", Tensor::zeros(1, hidden));
}

Tensor EncoderBlock::forward(Graph& g, const Tensor& x, int batch, int len,
                             const std::vector<float>& key_mask) const {
    if (x.rows() != batch * len)
        throw std::runtime_error("encoder: " + num::shape_string(x) + " rows != batch " +
                                 std::to_string(batch) + " x len " + std::to_string(len));
    const int dh = hidden / heads;
    Tensor q = wq.forward(g, x);
    Tensor k = wk.forward(g, x);
    Tensor v = wv.forward(g, x);

    std::vector<Tensor> ctx_rows;  // one (len×hidden) context per sequence
    ctx_rows.reserve(std::size_t(batch));
    for (int s = 0; s < batch; ++s) {
        std::vector<int> rows(std::size_t(len), 0);
        for (int t = 0; t < len; ++t) rows[std::size_t(t)] = s * len + t;
        Tensor qs = num::gather_rows(g, q, rows);
        Tensor ks = num::gather_rows(g, k, rows);
        Tensor vs = num::gather_rows(g, v, rows);
        Tensor mask = Tensor::zeros(1, len);
        for (int t = 0; t < len; ++t) mask.at(0, t) = key_mask[std::size_t(s * len + t)];

        std::vector<Tensor> heads_out;
        heads_out.reserve(std::size_t(heads));
        for (int h = 0; h < heads; ++h) {
            Tensor qh = num::slice_cols(g, qs, h * dh, (h + 1) * dh);
            Tensor kh = num::slice_cols(g, ks, h * dh, (h + 1) * dh);
            Tensor vh = num::slice_cols(g, vs, h * dh, (h + 1) * dh);
            Tensor scores = num::scale(g, num::matmul_nt(g, qh, kh),
                                       float(1.0 / std::sqrt(double(dh))));
            scores = num::add_bias(g, scores, mask);
            Tensor probs = num::softmax_rows(g, scores);
            heads_out.push_back(num::matmul(g, probs, vh));
        }
        ctx_rows.push_back(num::concat_cols(g, heads_out));
    }
    Tensor ctx = batch == 1 ? ctx_rows[0] : num::concat_rows(g, ctx_rows);
    Tensor attn_out = wo.forward(g, ctx);
    Tensor x1 = num::layer_norm(g, num::add(g, x, attn_out), ln1_g, ln1_b);
    Tensor ffn_out = ff2.forward(g, num::relu(g, ff1.forward(g, x1)));
    return num::layer_norm(g, num::add(g, x1, ffn_out), ln2_g, ln2_b);
}

TransformerEncoder::TransformerEncoder(ParamSet& ps, const TransformerConfig& cfg,
                                       rng::Xoshiro256& g)
    : config(cfg) {
    tok_emb = ps.add("embed.tok", xavier(cfg.vocab_size, cfg.hidden, g));
    pos_emb = ps.add("embed.pos", xavier(cfg.max_positions, cfg.hidden, g));
    emb_ln_g = ps.add("embed.ln.g", Tensor::full(1, cfg.hidden, 1.0f));
    emb_ln_b = ps.add("embed.ln.b", Tensor::zeros(1, cfg.hidden));
    blocks.reserve(std::size_t(cfg.layers));
    for (int l = 0; l < cfg.layers; ++l)
        blocks.emplace_back(ps, "enc" + std::to_string(l), cfg.hidden, cfg.heads, cfg.ffn, g);
}

TransformerEncoder::Batch TransformerEncoder::make_batch(
    const std::vector<const std::vector<int>*>& seqs) {
    Batch b;
    b.batch = int(seqs.size());
    std::size_t longest = 0;
    for (const auto* s : seqs) longest = std::max(longest, s->size());
    b.len = int(longest) + 1;  // CLS slot
    b.token_ids.assign(std::size_t(b.batch) * b.len, corpus::kPad);
    b.positions.assign(std::size_t(b.batch) * b.len, 0);
    b.key_mask.assign(std::size_t(b.batch) * b.len, -1e30f);
    b.cls_rows.resize(std::size_t(b.batch));
    for (int s = 0; s < b.batch; ++s) {
        const auto& ids = *seqs[std::size_t(s)];
        const int pad = b.len - 1 - int(ids.size());
        for (std::size_t t = 0; t < ids.size(); ++t) {
            const std::size_t row = std::size_t(s) * b.len + pad + t;
            b.token_ids[row] = ids[t];
            b.key_mask[row] = 0.0f;
        }
        const std::size_t cls = std::size_t(s) * b.len + b.len - 1;
        b.token_ids[cls] = corpus::kCls;
        b.key_mask[cls] = 0.0f;
        b.cls_rows[std::size_t(s)] = int(cls);
        for (int t = 0; t < b.len; ++t)
            b.positions[std::size_t(s) * b.len + t] = b.len - 1 - t;  // distance from end
    }
    return b;
}

Tensor TransformerEncoder::forward(Graph& g, const Batch& b) const {
    for (int p : b.positions)
        if (p >= config.max_positions)
            throw std::runtime_error("transformer: position " + std::to_string(p) +
                                     " exceeds max_positions " +
                                     std::to_string(config.max_positions));
    Tensor x = num::add(g, num::embedding(g, tok_emb, b.token_ids),
                        num::embedding(g, pos_emb, b.positions));
    x = num::layer_norm(g, x, emb_ln_g, emb_ln_b);
    for (const auto& blk : blocks) x = blk.forward(g, x, b.batch, b.len, b.key_mask);
    return x;
}

}  // namespace ehrseq::nn
