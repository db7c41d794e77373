#include "ehrseq/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace ehrseq::num {

Adam::Adam(std::vector<Tensor> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
    if (!(config_.lr > 0)) throw std::runtime_error("adam: learning rate must be positive");
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t p = 0; p < params_.size(); ++p) {
        m_[p].assign(params_[p].numel(), 0.0f);
        v_[p].assign(params_[p].numel(), 0.0f);
    }
}

void Adam::step() {
    ++step_;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double bc1 = 1.0 - std::pow(b1, step_);
    const double bc2 = 1.0 - std::pow(b2, step_);
    for (std::size_t p = 0; p < params_.size(); ++p) {
        Tensor& w = params_[p];
        if (!w.has_grad()) continue;
        auto& m = m_[p];
        auto& v = v_[p];
        for (std::size_t i = 0; i < w.numel(); ++i) {
            double g = w.grad()[i];
            if (config_.weight_decay != 0.0f)
                g += double(config_.weight_decay) * double(w.values()[i]);
            const double mi = b1 * double(m[i]) + (1.0 - b1) * g;
            const double vi = b2 * double(v[i]) + (1.0 - b2) * g * g;
            m[i] = float(mi);
            v[i] = float(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            w.values()[i] =
                float(double(w.values()[i]) -
                      double(config_.lr) * mhat / (std::sqrt(vhat) + double(config_.eps)));
        }
    }
}

void Adam::zero_grad() {
    for (auto& w : params_) w.zero_grad();
}

}  // namespace ehrseq::num
