#include "ehrseq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ehrseq::num {

namespace {

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
    throw std::runtime_error(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " +
                             shape_string(b));
}

void require_defined(const char* op, const Tensor& t) {
    if (!t.defined()) throw std::runtime_error(std::string(op) + ": undefined tensor");
}

// out(m×n) (+)= A(m×k) · B(k×n), float64 row accumulator, fixed k order.
void gemm_nn(int m, int k, int n, const float* a, const float* b, float* out, bool add_into) {
    std::vector<double> acc(std::size_t(n), 0.0);
    for (int i = 0; i < m; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        const float* arow = a + std::size_t(i) * k;
        for (int t = 0; t < k; ++t) {
            const double av = arow[t];
            const float* brow = b + std::size_t(t) * n;
            for (int j = 0; j < n; ++j) acc[j] += av * double(brow[j]);
        }
        float* orow = out + std::size_t(i) * n;
        for (int j = 0; j < n; ++j)
            orow[j] = add_into ? orow[j] + float(acc[j]) : float(acc[j]);
    }
}

// out(m×n) (+)= A(m×k) · B(n×k)ᵀ — row-by-row dot products.
void gemm_nt(int m, int k, int n, const float* a, const float* b, float* out, bool add_into) {
    for (int i = 0; i < m; ++i) {
        const float* arow = a + std::size_t(i) * k;
        float* orow = out + std::size_t(i) * n;
        for (int j = 0; j < n; ++j) {
            const float* brow = b + std::size_t(j) * k;
            double acc = 0.0;
            for (int t = 0; t < k; ++t) acc += double(arow[t]) * double(brow[t]);
            orow[j] = add_into ? orow[j] + float(acc) : float(acc);
        }
    }
}

// out(m×n) (+)= A(p×m)ᵀ · B(p×n), full float64 accumulator.
void gemm_tn(int p, int m, int n, const float* a, const float* b, float* out, bool add_into) {
    std::vector<double> acc(std::size_t(m) * n, 0.0);
    for (int t = 0; t < p; ++t) {
        const float* arow = a + std::size_t(t) * m;
        const float* brow = b + std::size_t(t) * n;
        for (int i = 0; i < m; ++i) {
            const double av = arow[i];
            double* accrow = acc.data() + std::size_t(i) * n;
            for (int j = 0; j < n; ++j) accrow[j] += av * double(brow[j]);
        }
    }
    for (std::size_t idx = 0; idx < acc.size(); ++idx)
        out[idx] = add_into ? out[idx] + float(acc[idx]) : float(acc[idx]);
}

}  // namespace

std::string shape_string(const Tensor& t) {
    if (!t.defined()) return "(undefined)";
    return "(" + std::to_string(t.rows()) + "x" + std::to_string(t.cols()) + ")";
}

Tensor Tensor::zeros(int rows, int cols, bool requires_grad) {
    return full(rows, cols, 0.0f, requires_grad);
}

Tensor Tensor::full(int rows, int cols, float value, bool requires_grad) {
    if (rows < 0 || cols < 0) throw std::runtime_error("tensor: negative dimension");
    auto d = std::make_shared<TensorData>();
    d->rows = rows;
    d->cols = cols;
    d->values.assign(std::size_t(rows) * cols, value);
    d->requires_grad = requires_grad;
    return Tensor(std::move(d));
}

Tensor Tensor::from_values(int rows, int cols, std::vector<float> values, bool requires_grad) {
    if (values.size() != std::size_t(rows) * cols)
        throw std::runtime_error("tensor: " + std::to_string(values.size()) +
                                 " values for shape (" + std::to_string(rows) + "x" +
                                 std::to_string(cols) + ")");
    auto d = std::make_shared<TensorData>();
    d->rows = rows;
    d->cols = cols;
    d->values = std::move(values);
    d->requires_grad = requires_grad;
    return Tensor(std::move(d));
}

Tensor Tensor::scalar(float value) { return full(1, 1, value); }

float Tensor::item() const {
    if (numel() != 1)
        throw std::runtime_error("item(): tensor has " + std::to_string(numel()) + " elements");
    return d_->values[0];
}

std::vector<float>& Tensor::grad() {
    if (d_->grad.empty()) d_->grad.assign(d_->values.size(), 0.0f);
    return d_->grad;
}

void Tensor::zero_grad() {
    if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0f);
}

void Graph::backward(Tensor& loss) {
    if (backward_done_) throw std::runtime_error("backward: tape already consumed; clear() first");
    if (loss.numel() != 1)
        throw std::runtime_error("backward: loss must be scalar, got " + shape_string(loss));
    backward_done_ = true;
    loss.grad()[0] = 1.0f;
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
}

void Graph::clear() {
    tape_.clear();
    backward_done_ = false;
}

namespace {

// Shared glue: decides whether the output participates in autodiff and
// wires the closure. Closures run only when the output actually received
// a gradient (it may be off the loss path).
template <class Fn>
Tensor make_result(Graph& g, Tensor out, bool any_input_grad, Fn&& backward_fn) {
    if (g.recording() && any_input_grad) {
        out.data()->requires_grad = true;
        g.record([out, fn = std::forward<Fn>(backward_fn)]() mutable {
            if (out.has_grad()) fn(out);
        });
    }
    return out;
}

}  // namespace

Tensor matmul(Graph& g, Tensor a, Tensor b) {
    require_defined("matmul", a);
    require_defined("matmul", b);
    if (a.cols() != b.rows()) shape_error("matmul", a, b);
    const int m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out = Tensor::zeros(m, n);
    gemm_nn(m, k, n, a.values().data(), b.values().data(), out.values().data(), false);
    return make_result(g, out, a.requires_grad() || b.requires_grad(), [a, b](Tensor& o) mutable {
        const int m = a.rows(), k = a.cols(), n = b.cols();
        if (a.requires_grad())  // dA = dC · Bᵀ
            gemm_nt(m, n, k, o.grad().data(), b.values().data(), a.grad().data(), true);
        if (b.requires_grad())  // dB = Aᵀ · dC
            gemm_tn(m, k, n, a.values().data(), o.grad().data(), b.grad().data(), true);
    });
}

Tensor matmul_nt(Graph& g, Tensor a, Tensor b) {
    require_defined("matmul_nt", a);
    require_defined("matmul_nt", b);
    if (a.cols() != b.cols()) shape_error("matmul_nt", a, b);
    const int m = a.rows(), k = a.cols(), n = b.rows();
    Tensor out = Tensor::zeros(m, n);
    gemm_nt(m, k, n, a.values().data(), b.values().data(), out.values().data(), false);
    return make_result(g, out, a.requires_grad() || b.requires_grad(), [a, b](Tensor& o) mutable {
        const int m = a.rows(), k = a.cols(), n = b.rows();
        if (a.requires_grad())  // dA = dC · B
            gemm_nn(m, n, k, o.grad().data(), b.values().data(), a.grad().data(), true);
        if (b.requires_grad())  // dB = dCᵀ · A
            gemm_tn(m, n, k, o.grad().data(), a.values().data(), b.grad().data(), true);
    });
}

Tensor add(Graph& g, Tensor a, Tensor b) {
    require_defined("add", a);
    require_defined("add", b);
    if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error("add", a, b);
    Tensor out = Tensor::zeros(a.rows(), a.cols());
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.values()[i] = a.values()[i] + b.values()[i];
    return make_result(g, out, a.requires_grad() || b.requires_grad(), [a, b](Tensor& o) mutable {
        if (a.requires_grad())
            for (std::size_t i = 0; i < o.numel(); ++i) a.grad()[i] += o.grad()[i];
        if (b.requires_grad())
            for (std::size_t i = 0; i < o.numel(); ++i) b.grad()[i] += o.grad()[i];
    });
}

Tensor add_bias(Graph& g, Tensor a, Tensor bias) {
    require_defined("add_bias", a);
    require_defined("add_bias", bias);
    if (bias.rows() != 1 || bias.cols() != a.cols()) shape_error("add_bias", a, bias);
    Tensor out = Tensor::zeros(a.rows(), a.cols());
    const int n = a.cols();
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < n; ++j) out.at(i, j) = a.at(i, j) + bias.at(0, j);
    return make_result(g, out, a.requires_grad() || bias.requires_grad(),
                       [a, bias](Tensor& o) mutable {
                           const int m = o.rows(), n = o.cols();
                           if (a.requires_grad())
                               for (std::size_t i = 0; i < o.numel(); ++i)
                                   a.grad()[i] += o.grad()[i];
                           if (bias.requires_grad()) {
                               std::vector<double> acc(std::size_t(n), 0.0);
                               for (int i = 0; i < m; ++i)
                                   for (int j = 0; j < n; ++j)
                                       acc[j] += double(o.grad()[std::size_t(i) * n + j]);
                               for (int j = 0; j < n; ++j) bias.grad()[j] += float(acc[j]);
                           }
                       });
}

Tensor sub(Graph& g, Tensor a, Tensor b) {
    require_defined("sub", a);
    require_defined("sub", b);
    if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error("sub", a, b);
    Tensor out = Tensor::zeros(a.rows(), a.cols());
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.values()[i] = a.values()[i] - b.values()[i];
    return make_result(g, out, a.requires_grad() || b.requires_grad(), [a, b](Tensor& o) mutable {
        if (a.requires_grad())
            for (std::size_t i = 0; i < o.numel(); ++i) a.grad()[i] += o.grad()[i];
        if (b.requires_grad())
            for (std::size_t i = 0; i < o.numel(); ++i) b.grad()[i] -= o.grad()[i];
    });
}

Tensor mul(Graph& g, Tensor a, Tensor b) {
    require_defined("mul", a);
    require_defined("mul", b);
    if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error("mul", a, b);
    Tensor out = Tensor::zeros(a.rows(), a.cols());
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.values()[i] = a.values()[i] * b.values()[i];
    return make_result(g, out, a.requires_grad() || b.requires_grad(), [a, b](Tensor& o) mutable {
        if (a.requires_grad())
            for (std::size_t i = 0; i < o.numel(); ++i)
                a.grad()[i] += o.grad()[i] * b.values()[i];
        if (b.requires_grad())
            for (std::size_t i = 0; i < o.numel(); ++i)
                b.grad()[i] += o.grad()[i] * a.values()[i];
    });
}

Tensor scale(Graph& g, Tensor a, float c) {
    require_defined("scale", a);
    Tensor out = Tensor::zeros(a.rows(), a.cols());
    for (std::size_t i = 0; i < out.numel(); ++i) out.values()[i] = a.values()[i] * c;
    return make_result(g, out, a.requires_grad(), [a, c](Tensor& o) mutable {
        for (std::size_t i = 0; i < o.numel(); ++i) a.grad()[i] += o.grad()[i] * c;
    });
}

Tensor sigmoid(Graph& g, Tensor a) {
    require_defined("sigmoid", a);
    Tensor out = Tensor::zeros(a.rows(), a.cols());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        const double x = a.values()[i];
        out.values()[i] = x >= 0 ? float(1.0 / (1.0 + std::exp(-x)))
                                 : float(std::exp(x) / (1.0 + std::exp(x)));
    }
    return make_result(g, out, a.requires_grad(), [a](Tensor& o) mutable {
        for (std::size_t i = 0; i < o.numel(); ++i) {
            const float y = o.values()[i];
            a.grad()[i] += o.grad()[i] * y * (1.0f - y);
        }
    });
}

Tensor tanh_t(Graph& g, Tensor a) {
    require_defined("tanh", a);
    Tensor out = Tensor::zeros(a.rows(), a.cols());
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.values()[i] = float(std::tanh(double(a.values()[i])));
    return make_result(g, out, a.requires_grad(), [a](Tensor& o) mutable {
        for (std::size_t i = 0; i < o.numel(); ++i) {
            const float y = o.values()[i];
            a.grad()[i] += o.grad()[i] * (1.0f - y * y);
        }
    });
}

Tensor relu(Graph& g, Tensor a) {
    require_defined("relu", a);
    Tensor out = Tensor::zeros(a.rows(), a.cols());
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.values()[i] = a.values()[i] > 0.0f ? a.values()[i] : 0.0f;
    return make_result(g, out, a.requires_grad(), [a](Tensor& o) mutable {
        for (std::size_t i = 0; i < o.numel(); ++i)
            if (a.values()[i] > 0.0f) a.grad()[i] += o.grad()[i];
    });
}

Tensor softmax_rows(Graph& g, Tensor a) {
    require_defined("softmax", a);
    Tensor out = Tensor::zeros(a.rows(), a.cols());
    const int n = a.cols();
    if (n == 0) throw std::runtime_error("softmax: empty rows");
    for (int i = 0; i < a.rows(); ++i) {
        float mx = a.at(i, 0);
        for (int j = 1; j < n; ++j) mx = std::max(mx, a.at(i, j));
        double sum = 0.0;
        for (int j = 0; j < n; ++j) {
            const double e = std::exp(double(a.at(i, j)) - double(mx));
            out.at(i, j) = float(e);  // exactly 0 for -inf-style masked inputs
            sum += e;
        }
        for (int j = 0; j < n; ++j) out.at(i, j) = float(double(out.at(i, j)) / sum);
    }
    return make_result(g, out, a.requires_grad(), [a](Tensor& o) mutable {
        const int n = o.cols();
        for (int i = 0; i < o.rows(); ++i) {
            double dot = 0.0;
            for (int j = 0; j < n; ++j) dot += double(o.grad()[std::size_t(i) * n + j]) *
                                               double(o.values()[std::size_t(i) * n + j]);
            for (int j = 0; j < n; ++j) {
                const std::size_t idx = std::size_t(i) * n + j;
                a.grad()[idx] += float(double(o.values()[idx]) *
                                       (double(o.grad()[idx]) - dot));
            }
        }
    });
}

Tensor layer_norm(Graph& g, Tensor a, Tensor gamma, Tensor beta,
                  float eps) {
    require_defined("layer_norm", a);
    if (gamma.rows() != 1 || gamma.cols() != a.cols()) shape_error("layer_norm", a, gamma);
    if (beta.rows() != 1 || beta.cols() != a.cols()) shape_error("layer_norm", a, beta);
    const int n = a.cols();
    if (n == 0) throw std::runtime_error("layer_norm: empty rows");
    Tensor out = Tensor::zeros(a.rows(), n);
    Tensor xhat = Tensor::zeros(a.rows(), n);  // cached for backward
    std::vector<float> inv_std(std::size_t(a.rows()));
    for (int i = 0; i < a.rows(); ++i) {
        double mean = 0.0;
        for (int j = 0; j < n; ++j) mean += double(a.at(i, j));
        mean /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) {
            const double d = double(a.at(i, j)) - mean;
            var += d * d;
        }
        var /= n;
        const double inv = 1.0 / std::sqrt(var + double(eps));
        inv_std[std::size_t(i)] = float(inv);
        for (int j = 0; j < n; ++j) {
            const double xh = (double(a.at(i, j)) - mean) * inv;
            xhat.at(i, j) = float(xh);
            out.at(i, j) = float(xh * double(gamma.at(0, j)) + double(beta.at(0, j)));
        }
    }
    const bool needs = a.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    return make_result(g, out, needs,
                       [a, gamma, beta, xhat, inv_std = std::move(inv_std)](Tensor& o) mutable {
        const int n = o.cols();
        std::vector<double> dgamma(std::size_t(n), 0.0), dbeta(std::size_t(n), 0.0);
        for (int i = 0; i < o.rows(); ++i) {
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (int j = 0; j < n; ++j) {
                const std::size_t idx = std::size_t(i) * n + j;
                const double dy = o.grad()[idx];
                const double xh = xhat.values()[idx];
                dgamma[std::size_t(j)] += dy * xh;
                dbeta[std::size_t(j)] += dy;
                const double dxhat = dy * double(gamma.at(0, j));
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xh;
            }
            if (a.requires_grad()) {
                const double inv = inv_std[std::size_t(i)];
                for (int j = 0; j < n; ++j) {
                    const std::size_t idx = std::size_t(i) * n + j;
                    const double dxhat = double(o.grad()[idx]) * double(gamma.at(0, j));
                    a.grad()[idx] += float(
                        inv * (dxhat - sum_dxhat / n -
                               double(xhat.values()[idx]) * sum_dxhat_xhat / n));
                }
            }
        }
        if (gamma.requires_grad())
            for (int j = 0; j < n; ++j) gamma.grad()[std::size_t(j)] += float(dgamma[std::size_t(j)]);
        if (beta.requires_grad())
            for (int j = 0; j < n; ++j) beta.grad()[std::size_t(j)] += float(dbeta[std::size_t(j)]);
    });
}

Tensor embedding(Graph& g, Tensor table, const std::vector<int>& ids) {
    require_defined("embedding", table);
    const int n = table.cols();
    Tensor out = Tensor::zeros(int(ids.size()), n);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= table.rows())
            throw std::runtime_error("embedding: id " + std::to_string(ids[i]) +
                                     " outside table " + shape_string(table));
        const float* src = table.values().data() + std::size_t(ids[i]) * n;
        std::copy(src, src + n, out.values().data() + i * n);
    }
    return make_result(g, out, table.requires_grad(), [table, ids](Tensor& o) mutable {
        const int n = o.cols();
        for (std::size_t i = 0; i < ids.size(); ++i) {
            float* dst = table.grad().data() + std::size_t(ids[i]) * n;
            const float* src = o.grad().data() + i * n;
            for (int j = 0; j < n; ++j) dst[j] += src[j];
        }
    });
}

Tensor gather_rows(Graph& g, Tensor a, const std::vector<int>& rows) {
    require_defined("gather_rows", a);
    const int n = a.cols();
    Tensor out = Tensor::zeros(int(rows.size()), n);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= a.rows())
            throw std::runtime_error("gather_rows: row " + std::to_string(rows[i]) +
                                     " outside " + shape_string(a));
        const float* src = a.values().data() + std::size_t(rows[i]) * n;
        std::copy(src, src + n, out.values().data() + i * n);
    }
    return make_result(g, out, a.requires_grad(), [a, rows](Tensor& o) mutable {
        const int n = o.cols();
        for (std::size_t i = 0; i < rows.size(); ++i) {
            float* dst = a.grad().data() + std::size_t(rows[i]) * n;
            const float* src = o.grad().data() + i * n;
            for (int j = 0; j < n; ++j) dst[j] += src[j];
        }
    });
}

Tensor slice_cols(Graph& g, Tensor a, int c0, int c1) {
    require_defined("slice_cols", a);
    if (c0 < 0 || c1 > a.cols() || c0 >= c1)
        throw std::runtime_error("slice_cols: [" + std::to_string(c0) + ", " +
                                 std::to_string(c1) + ") of " + shape_string(a));
    const int n = c1 - c0;
    Tensor out = Tensor::zeros(a.rows(), n);
    for (int i = 0; i < a.rows(); ++i)
        std::copy(a.values().data() + std::size_t(i) * a.cols() + c0,
                  a.values().data() + std::size_t(i) * a.cols() + c1,
                  out.values().data() + std::size_t(i) * n);
    return make_result(g, out, a.requires_grad(), [a, c0, n](Tensor& o) mutable {
        for (int i = 0; i < o.rows(); ++i) {
            float* dst = a.grad().data() + std::size_t(i) * a.cols() + c0;
            const float* src = o.grad().data() + std::size_t(i) * n;
            for (int j = 0; j < n; ++j) dst[j] += src[j];
        }
    });
}

Tensor concat_cols(Graph& g, std::vector<Tensor> parts) {
    if (parts.empty()) throw std::runtime_error("concat_cols: nothing to concatenate");
    const int m = parts[0].rows();
    int total = 0;
    bool needs = false;
    for (const auto& p : parts) {
        require_defined("concat_cols", p);
        if (p.rows() != m) shape_error("concat_cols", parts[0], p);
        total += p.cols();
        needs = needs || p.requires_grad();
    }
    Tensor out = Tensor::zeros(m, total);
    int off = 0;
    for (const auto& p : parts) {
        for (int i = 0; i < m; ++i)
            std::copy(p.values().data() + std::size_t(i) * p.cols(),
                      p.values().data() + std::size_t(i) * p.cols() + p.cols(),
                      out.values().data() + std::size_t(i) * total + off);
        off += p.cols();
    }
    return make_result(g, out, needs, [parts, total](Tensor& o) mutable {
        int off = 0;
        for (auto& p : parts) {
            if (p.requires_grad())
                for (int i = 0; i < o.rows(); ++i) {
                    float* dst = p.grad().data() + std::size_t(i) * p.cols();
                    const float* src = o.grad().data() + std::size_t(i) * total + off;
                    for (int j = 0; j < p.cols(); ++j) dst[j] += src[j];
                }
            off += p.cols();
        }
    });
}

Tensor concat_rows(Graph& g, std::vector<Tensor> parts) {
    if (parts.empty()) throw std::runtime_error("concat_rows: nothing to concatenate");
    const int n = parts[0].cols();
    int total = 0;
    bool needs = false;
    for (const auto& p : parts) {
        require_defined("concat_rows", p);
        if (p.cols() != n) shape_error("concat_rows", parts[0], p);
        total += p.rows();
        needs = needs || p.requires_grad();
    }
    Tensor out = Tensor::zeros(total, n);
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.values().begin(), p.values().end(), out.values().begin() + off);
        off += p.numel();
    }
    return make_result(g, out, needs, [parts](Tensor& o) mutable {
        std::size_t off = 0;
        for (auto& p : parts) {
            if (p.requires_grad())
                for (std::size_t i = 0; i < p.numel(); ++i) p.grad()[i] += o.grad()[off + i];
            off += p.numel();
        }
    });
}

Tensor sum_all(Graph& g, Tensor a) {
    require_defined("sum_all", a);
    double acc = 0.0;
    for (float v : a.values()) acc += double(v);
    Tensor out = Tensor::scalar(float(acc));
    return make_result(g, out, a.requires_grad(), [a](Tensor& o) mutable {
        const float dy = o.grad()[0];
        for (std::size_t i = 0; i < a.numel(); ++i) a.grad()[i] += dy;
    });
}

Tensor mean_all(Graph& g, Tensor a) {
    require_defined("mean_all", a);
    if (a.numel() == 0) throw std::runtime_error("mean_all: empty tensor");
    double acc = 0.0;
    for (float v : a.values()) acc += double(v);
    Tensor out = Tensor::scalar(float(acc / double(a.numel())));
    return make_result(g, out, a.requires_grad(), [a](Tensor& o) mutable {
        const float dy = o.grad()[0] / float(a.numel());
        for (std::size_t i = 0; i < a.numel(); ++i) a.grad()[i] += dy;
    });
}

Tensor bce_with_logits(Graph& g, Tensor logits, Tensor targets,
                       Tensor weights) {
    require_defined("bce", logits);
    require_defined("bce", targets);
    if (logits.rows() != targets.rows() || logits.cols() != 1 || targets.cols() != 1)
        shape_error("bce_with_logits", logits, targets);
    if (weights.defined() && (weights.rows() != logits.rows() || weights.cols() != 1))
        shape_error("bce_with_logits weights", logits, weights);
    const int n = logits.rows();
    if (n == 0) throw std::runtime_error("bce_with_logits: empty batch");
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        const double z = logits.at(i, 0);
        const double t = targets.at(i, 0);
        const double w = weights.defined() ? double(weights.at(i, 0)) : 1.0;
        acc += w * (std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z))));
    }
    Tensor out = Tensor::scalar(float(acc / n));
    return make_result(g, out, logits.requires_grad(),
                       [logits, targets, weights](Tensor& o) mutable {
        const int n = logits.rows();
        const double dy = double(o.grad()[0]) / n;
        for (int i = 0; i < n; ++i) {
            const double z = logits.at(i, 0);
            const double p = z >= 0 ? 1.0 / (1.0 + std::exp(-z))
                                    : std::exp(z) / (1.0 + std::exp(z));
            const double w = weights.defined() ? double(weights.at(i, 0)) : 1.0;
            logits.grad()[std::size_t(i)] += float(dy * w * (p - double(targets.at(i, 0))));
        }
    });
}

Tensor masked_cross_entropy(Graph& g, Tensor logits, const std::vector<int>& targets) {
    require_defined("masked_ce", logits);
    if (int(targets.size()) != logits.rows())
        throw std::runtime_error("masked_ce: " + std::to_string(targets.size()) +
                                 " targets for " + shape_string(logits));
    const int n = logits.cols();
    int selected = 0;
    double acc = 0.0;
    std::vector<double> lse(targets.size(), 0.0);
    for (std::size_t i = 0; i < targets.size(); ++i) {
        if (targets[i] < 0) continue;
        if (targets[i] >= n)
            throw std::runtime_error("masked_ce: target " + std::to_string(targets[i]) +
                                     " outside " + shape_string(logits));
        const float* row = logits.values().data() + i * std::size_t(n);
        float mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < n; ++j) sum += std::exp(double(row[j]) - double(mx));
        lse[i] = double(mx) + std::log(sum);
        acc += lse[i] - double(row[targets[i]]);
        ++selected;
    }
    if (selected == 0) throw std::runtime_error("masked_ce: no selected positions");
    Tensor out = Tensor::scalar(float(acc / selected));
    return make_result(g, out, logits.requires_grad(),
                       [logits, targets, lse = std::move(lse), selected](Tensor& o) mutable {
        const int n = logits.cols();
        const double dy = double(o.grad()[0]) / selected;
        for (std::size_t i = 0; i < targets.size(); ++i) {
            if (targets[i] < 0) continue;
            const float* row = logits.values().data() + i * std::size_t(n);
            float* grow = logits.grad().data() + i * std::size_t(n);
            for (int j = 0; j < n; ++j) {
                const double p = std::exp(double(row[j]) - lse[i]);
                grow[j] += float(dy * (p - (j == targets[i] ? 1.0 : 0.0)));
            }
        }
    });
}

Tensor dropout(Graph& g, Tensor a, const DropoutMask& mask) {
    require_defined("dropout", a);
    if (mask.keep.size() != a.numel())
        throw std::runtime_error("dropout: mask size " + std::to_string(mask.keep.size()) +
                                 " for " + shape_string(a));
    Tensor out = Tensor::zeros(a.rows(), a.cols());
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.values()[i] = a.values()[i] * mask.keep[i];
    return make_result(g, out, a.requires_grad(), [a, keep = mask.keep](Tensor& o) mutable {
        for (std::size_t i = 0; i < o.numel(); ++i) a.grad()[i] += o.grad()[i] * keep[i];
    });
}

}  // namespace ehrseq::num
