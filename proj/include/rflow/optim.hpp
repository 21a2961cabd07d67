#pragma once

#include <map>

#include "rflow/tensor.hpp"

namespace rflow {

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;

    void validate() const;
};

// Decoupled weight decay: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
class AdamW {
public:
    AdamW(Parameters& params, AdamWConfig cfg);

    // Consumes current parameter gradients (absent gradient = zero).
    void step();
    void zero_grad() { params_.zero_grad(); }

    int64_t step_count() const { return step_; }
    const AdamWConfig& config() const { return cfg_; }

    // Moment buffers and step counter under an "opt." prefix, for embedding
    // in a checkpoint next to the parameters.
    void export_state(std::map<std::string, Tensor>& out) const;
    void import_state(const std::map<std::string, Tensor>& in);

private:
    Parameters& params_;
    AdamWConfig cfg_;
    int64_t step_ = 0;
    std::map<std::string, std::vector<double>> m_, v_;
};

}  // namespace rflow
