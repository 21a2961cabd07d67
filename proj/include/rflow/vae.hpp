#pragma once

#include "rflow/tensor.hpp"
#include "rflow/volume.hpp"

namespace rflow {

struct VaeConfig {
    int latent_channels = 4;
    int base_width = 12;
    int groups = 4;

    void validate() const;
};

struct GaussianPosterior {
    Tensor mu;       // [B,Clat,D/4,H/4,W/4]
    Tensor log_var;  // same shape
};

// Convolutional VAE compressing 4x per axis into latent_channels channels.
class Vae {
public:
    Vae(VaeConfig cfg, uint64_t seed);

    GaussianPosterior encode(const Tensor& x) const;  // x: [B,1,D,H,W], extents % 4 == 0
    Tensor decode(const Tensor& z) const;             // z: [B,Clat,d,h,w] -> [B,1,4d,4h,4w]

    const VaeConfig& config() const { return cfg_; }
    Parameters& params() { return params_; }
    const Parameters& params() const { return params_; }

private:
    VaeConfig cfg_;
    Parameters params_;
};

// z = mu + exp(log_var / 2) * eps, eps ~ N(0, I); gradient flows to mu and
// log_var only.
Tensor reparameterize(const GaussianPosterior& p, Rng& rng);

// Sum over elements of (mu^2 + sigma^2 - 1 - ln sigma^2) / 2.
Tensor kl_normal(const GaussianPosterior& p);

// Reconstruction MSE + beta_kl * KL.
Tensor elbo_loss(const Vae& vae, const Tensor& x, double beta_kl, Rng& rng);

// Tensor <-> Volume bridges ([1,1,D,H,W] with W fastest on both sides).
Tensor volume_to_tensor(const Volume& v);
Volume tensor_to_volume(const Tensor& t, std::array<double, 3> spacing);

// Cached-latent container: JSON header line {case_id, role, geometry}, then
// mu and log-variance payloads, little-endian f64.
struct LatentRecord {
    std::string case_id;
    std::string role;  // t1w | flair | t1c
    Tensor mu;
    Tensor log_var;
};

void write_lat(const LatentRecord& rec, const std::string& path);
LatentRecord read_lat(const std::string& path);

}  // namespace rflow
