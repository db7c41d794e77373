#pragma once

// Dense 2-D float tensors with tape-based reverse-mode autodiff.
//
// A Tensor is a shared handle to row-major float32 storage plus an optional
// gradient buffer of the same shape. Ops record a backward closure on the
// Graph as they execute; Graph::backward replays the tape in reverse
// creation order (which is a topological order by construction).
//
// Numerical policy: values and gradients are float32, every reduction
// (matmul inner products, softmax/log-sum-exp sums, means, layer-norm
// moments) accumulates in float64 with a fixed summation order. Together
// with strictly row-local elementwise ops this makes scores independent of
// how rows are batched, bit for bit.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace ehrseq::num {

struct TensorData {
    int rows = 0;
    int cols = 0;
    std::vector<float> values;
    std::vector<float> grad;  // empty until touched by backward
    bool requires_grad = false;
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(int rows, int cols, bool requires_grad = false);
    static Tensor full(int rows, int cols, float value, bool requires_grad = false);
    static Tensor from_values(int rows, int cols, std::vector<float> values,
                              bool requires_grad = false);
    static Tensor scalar(float value);

    bool defined() const { return bool(d_); }
    int rows() const { return d_->rows; }
    int cols() const { return d_->cols; }
    std::size_t numel() const { return d_->values.size(); }
    bool requires_grad() const { return d_->requires_grad; }

    std::vector<float>& values() { return d_->values; }
    const std::vector<float>& values() const { return d_->values; }
    float& at(int r, int c) { return d_->values[std::size_t(r) * d_->cols + c]; }
    float at(int r, int c) const { return d_->values[std::size_t(r) * d_->cols + c]; }
    float item() const;  // requires numel() == 1

    // Gradient buffer, zero-filled on first access.
    std::vector<float>& grad();
    const std::vector<float>& grad() const { return d_->grad; }
    bool has_grad() const { return !d_->grad.empty(); }
    void zero_grad();

    TensorData* data() { return d_.get(); }
    const TensorData* data() const { return d_.get(); }
    bool same_storage(const Tensor& o) const { return d_ == o.d_; }

private:
    explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}
    std::shared_ptr<TensorData> d_;
};

class Graph {
public:
    // When recording is off, ops compute forward values only (inference).
    bool recording() const { return recording_; }
    void set_recording(bool on) { recording_ = on; }

    void record(std::function<void()> backward_fn) {
        if (recording_) tape_.push_back(std::move(backward_fn));
    }

    // Seeds d(loss)/d(loss) = 1 and replays the tape. Throws if loss is not
    // scalar or if called again without clear().
    void backward(Tensor& loss);
    void clear();
    std::size_t size() const { return tape_.size(); }

private:
    std::vector<std::function<void()>> tape_;
    bool recording_ = true;
    bool backward_done_ = false;
};

// --- forward ops (each records its own backward) ------------------------

Tensor matmul(Graph& g, Tensor a, Tensor b);     // (m,k)·(k,n)
Tensor matmul_nt(Graph& g, Tensor a, Tensor b);  // (m,k)·(n,k)ᵀ
Tensor add(Graph& g, Tensor a, Tensor b);        // same shape
Tensor add_bias(Graph& g, Tensor a, Tensor bias);  // bias is 1×n
Tensor sub(Graph& g, Tensor a, Tensor b);
Tensor mul(Graph& g, Tensor a, Tensor b);  // elementwise
Tensor scale(Graph& g, Tensor a, float c);
Tensor sigmoid(Graph& g, Tensor a);
Tensor tanh_t(Graph& g, Tensor a);
Tensor relu(Graph& g, Tensor a);
Tensor softmax_rows(Graph& g, Tensor a);
Tensor layer_norm(Graph& g, Tensor a, Tensor gamma, Tensor beta,
                  float eps = 1e-5f);
// rows of `table` selected by id; ids < 0 are forbidden
Tensor embedding(Graph& g, Tensor table, const std::vector<int>& ids);
Tensor gather_rows(Graph& g, Tensor a, const std::vector<int>& rows);
Tensor slice_cols(Graph& g, Tensor a, int c0, int c1);  // [c0, c1)
Tensor concat_cols(Graph& g, std::vector<Tensor> parts);
Tensor concat_rows(Graph& g, std::vector<Tensor> parts);
Tensor sum_all(Graph& g, Tensor a);   // 1×1
Tensor mean_all(Graph& g, Tensor a);  // 1×1

// Mean of the numerically stable logistic loss, logits and targets n×1:
//   l = max(z,0) − z·t + log(1 + exp(−|z|))
// Optional per-sample weights (n×1) rescale each term before the mean.
Tensor bce_with_logits(Graph& g, Tensor logits, Tensor targets,
                       Tensor weights = {});

// Mean over selected rows of −log softmax(logits_row)[target]; rows with
// target < 0 are ignored. Throws if every target is negative.
Tensor masked_cross_entropy(Graph& g, Tensor logits, const std::vector<int>& targets);

// Inverted dropout driven by the caller's RNG stream; identity when rate=0.
class DropoutMask {
public:
    std::vector<float> keep;  // 0 or 1/(1-rate) per element
};
Tensor dropout(Graph& g, Tensor a, const DropoutMask& mask);

std::string shape_string(const Tensor& t);

}  // namespace ehrseq::num
