#pragma once

// Layers on top of the tensor core: parameter registry, linear map,
// GRU/LSTM cells and a post-LN transformer encoder.
//
// Batching convention: token batches are flattened to (batch·len) rows,
// padded on the LEFT inside each sequence block. Padding is handled with
// exact zeros everywhere (masked attention weights are exactly 0, masked
// recurrent steps copy the previous state bit for bit), so scoring a
// sequence alone or inside any batch yields identical bytes.

#include <string>
#include <utility>
#include <vector>

#include "ehrseq/checkpoint.hpp"
#include "ehrseq/rng.hpp"
#include "ehrseq/tensor.hpp"

namespace ehrseq::nn {

// Ordered, named parameter registry; the order defines checkpoint layout.
class ParamSet {
public:
    num::Tensor add(const std::string& name, num::Tensor t);
    const std::vector<std::pair<std::string, num::Tensor>>& items() const { return items_; }
    std::vector<num::Tensor> tensors() const;
    // Overwrites every registered tensor with the equally named checkpoint
    // block; throws on missing name or shape mismatch.
    void load_from(const num::Checkpoint& ckpt);
    // Copies values for every name present in both sets (shape-checked);
    // returns how many tensors were copied.
    std::size_t copy_common_from(const ParamSet& other);

private:
    std::vector<std::pair<std::string, num::Tensor>> items_;
};

// U(−a, a) with a = sqrt(6 / (fan_in + fan_out)).
num::Tensor xavier(int rows, int cols, rng::Xoshiro256& g);

struct Linear {
    num::Tensor W;  // in×out
    num::Tensor b;  // 1×out

    Linear() = default;
    Linear(ParamSet& ps, const std::string& prefix, int in, int out, rng::Xoshiro256& g);
    num::Tensor forward(num::Graph& g, const num::Tensor& x) const;
};

// Fused-gate recurrent cells; gate layout follows the usual convention
// (GRU: r,z,n — LSTM: i,f,g,o). `mask` is batch×hidden with rows of all
// 1 (real step) or all 0 (pad step); masked steps keep the previous state.
struct GRUCell {
    int input_size = 0, hidden_size = 0;
    num::Tensor W;   // in×3H
    num::Tensor U;   // H×3H
    num::Tensor bx;  // 1×3H
    num::Tensor bh;  // 1×3H

    GRUCell() = default;
    GRUCell(ParamSet& ps, const std::string& prefix, int input, int hidden,
            rng::Xoshiro256& g);
    num::Tensor step(num::Graph& g, const num::Tensor& x, const num::Tensor& h,
                     const num::Tensor& mask) const;
};

struct LSTMCell {
    int input_size = 0, hidden_size = 0;
    num::Tensor W;   // in×4H
    num::Tensor U;   // H×4H
    num::Tensor bx;  // 1×4H
    num::Tensor bh;  // 1×4H

    LSTMCell() = default;
    LSTMCell(ParamSet& ps, const std::string& prefix, int input, int hidden,
             rng::Xoshiro256& g);
    struct State {
        num::Tensor h, c;
    };
    State step(num::Graph& g, const num::Tensor& x, const State& s,
               const num::Tensor& mask) const;
};

// One post-LN encoder block: x = LN(x + Attn(x)); x = LN(x + FFN(x)).
struct EncoderBlock {
    int hidden = 0, heads = 0, ffn = 0;
    Linear wq, wk, wv, wo, ff1, ff2;
    num::Tensor ln1_g, ln1_b, ln2_g, ln2_b;

    EncoderBlock() = default;
    EncoderBlock(ParamSet& ps, const std::string& prefix, int hidden, int heads, int ffn,
                 rng::Xoshiro256& g);
    // x is (batch·len)×hidden; key_mask has one 0/−1e30 entry per row and
    // is applied to attention scores so padded keys get exactly zero weight.
    num::Tensor forward(num::Graph& g, const num::Tensor& x, int batch, int len,
                        const std::vector<float>& key_mask) const;
};

struct TransformerConfig {
    int vocab_size = 0;
    int hidden = 64;
    int heads = 4;
    int layers = 2;
    int ffn = 128;
    int max_positions = 513;  // max_len + 1 for the CLS slot
};

// Token + position embeddings with an embedding layer norm, then the block
// stack. Positions count distance from the sequence end, so the CLS token
// (always last) sits at position 0 and padding never shifts real tokens.
struct TransformerEncoder {
    TransformerConfig config;
    num::Tensor tok_emb;  // vocab×hidden
    num::Tensor pos_emb;  // max_positions×hidden
    num::Tensor emb_ln_g, emb_ln_b;
    std::vector<EncoderBlock> blocks;

    TransformerEncoder() = default;
    TransformerEncoder(ParamSet& ps, const TransformerConfig& cfg, rng::Xoshiro256& g);

    struct Batch {
        std::vector<int> token_ids;  // batch·len, left-padded, CLS last
        std::vector<int> positions;  // distance from end
        std::vector<float> key_mask; // 0 real, −1e30 pad
        std::vector<int> cls_rows;   // one row index per sequence
        int batch = 0, len = 0;
    };
    // Builds the padded batch for a window of sequences (token ids only,
    // CLS appended here).
    static Batch make_batch(const std::vector<const std::vector<int>*>& seqs);

    num::Tensor forward(num::Graph& g, const Batch& b) const;  // (batch·len)×hidden
};

}  // namespace ehrseq::nn
