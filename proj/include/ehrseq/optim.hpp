#pragma once

// Adam with bias correction. One state slot (first/second moment) per
// registered parameter tensor; updates are elementwise in a fixed order,
// computed in float64 and stored back as float32.

#include <cstdint>
#include <vector>

#include "ehrseq/tensor.hpp"

namespace ehrseq::num {

struct AdamConfig {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.0f;  // classic L2: g += wd · w
};

class Adam {
public:
    Adam(std::vector<Tensor> params, AdamConfig config);

    // Applies one update from the gradients currently held by the
    // parameters. Parameters without a gradient buffer are skipped.
    void step();
    void zero_grad();

    int step_count() const { return step_; }
    const AdamConfig& config() const { return config_; }
    void set_lr(float lr) { config_.lr = lr; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<float>> m_, v_;
    AdamConfig config_;
    int step_ = 0;
};

}  // namespace ehrseq::num
