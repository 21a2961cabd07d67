#pragma once

#include <vector>

#include "rflow/tensor.hpp"

namespace rflow {

struct UNetConfig {
    int in_channels = 12;   // latent channels x 3 streams
    int out_channels = 4;
    std::vector<int> channels = {16, 16, 32};  // per level
    int res_blocks = 2;
    int time_embed_dim = 32;
    int groups = 8;

    int levels() const { return static_cast<int>(channels.size()); }
    void validate() const;
};

struct ConditioningLatents {
    Tensor cond_t1w;
    Tensor cond_flair;
    bool mask_t1w = false;
    bool mask_flair = false;
};

// Raw sinusoidal features [sin(t*w_i), cos(t*w_i)], w geometric over [1, 1e4].
Tensor time_embed(double t, int dim);

// Fixed-order channel concatenation (z_t, t1w, flair); masked streams
// contribute exact zeros.
Tensor assemble_input(const Tensor& z_t, const ConditioningLatents& c);

// Symmetric encoder/decoder over 5-D tensors [B,C,D,H,W]: residual blocks
// (group_norm -> silu -> conv, time bias after the first conv), stride-2
// conv downsampling, nearest-neighbor + conv upsampling, skip concatenation,
// zero-initialized output conv.
class UNet {
public:
    UNet(UNetConfig cfg, uint64_t seed);

    Tensor forward(const Tensor& x, double t) const;

    const UNetConfig& config() const { return cfg_; }
    Parameters& params() { return params_; }
    const Parameters& params() const { return params_; }

private:
    Tensor res_block(const Tensor& x, const Tensor& time_feat, const std::string& name,
                     int in_ch, int out_ch) const;

    UNetConfig cfg_;
    Parameters params_;
};

}  // namespace rflow
