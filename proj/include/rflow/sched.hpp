#pragma once

#include <functional>

#include "rflow/tensor.hpp"

namespace rflow {

struct TimestepDist {
    enum class Kind { LogitNormal, Uniform };
    Kind kind = Kind::LogitNormal;
    double loc = 0.0;
    double scale = 1.0;
};

// Linear path alpha(t) = t with K-step Euler inference.
struct RFlowSchedule {
    int train_timesteps = 1000;
    int steps = 200;  // K
    TimestepDist dist;

    void validate() const;
};

struct DdpmSchedule {
    int T = 1000;
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;

    static DdpmSchedule linear(int T = 1000, double beta_start = 1e-4, double beta_end = 0.02);
};

// Conditioning is bound into the callable by the caller.
using VelocityFn = std::function<Tensor(const Tensor& z_t, double t)>;
using EpsFn = std::function<Tensor(const Tensor& z_t, int t)>;

// z_t = (1 - t) z0 + t z1
Tensor rf_interpolate(const Tensor& z0, const Tensor& z1, double t);

// alpha'(t) (z1 - z0) = z1 - z0 for the linear path
Tensor rf_target_velocity(const Tensor& z0, const Tensor& z1, double t);

// t = sigmoid(loc + scale * n) for logit-normal, open interval (0, 1)
double sample_train_t(const TimestepDist& dist, Rng& rng);

// Draws z1 ~ N(0,I) and t, returns l1_loss(vnet(z_t, t), z1 - z0).
Tensor rflow_loss(const VelocityFn& vnet, const Tensor& z0, const TimestepDist& dist, Rng& rng);

// Euler integration z^{k-1} = z^k - (1/K) vnet(z^k, k/K) for k = K..1;
// exactly K evaluations, no randomness.
Tensor rf_sample(const VelocityFn& vnet, const Tensor& z_init, int K);

// sqrt(abar_t) z0 + sqrt(1 - abar_t) eps
Tensor ddpm_forward(const Tensor& z0, int t, const Tensor& eps, const DdpmSchedule& sched);

// mu = (z_t - beta_t/sqrt(1-abar_t) eps_hat)/sqrt(alpha_t), plus sqrt(beta_t) noise for t > 0
Tensor ddpm_ancestral_step(const EpsFn& eps_net, const Tensor& z_t, int t,
                           const DdpmSchedule& sched, Rng& rng);

// Full reverse chain t = T-1 .. 0; exactly T evaluations.
Tensor ddpm_sample(const EpsFn& eps_net, const Tensor& z_init, const DdpmSchedule& sched,
                   Rng& rng);

// Draws t uniform over [0, T) and eps ~ N(0,I); MSE between predicted and true eps.
Tensor ddpm_loss(const EpsFn& eps_net, const Tensor& z0, const DdpmSchedule& sched, Rng& rng);

// Integer timestep mapped onto the continuous embedding domain; training
// and sampling must agree on this.
inline double ddpm_time(int t, int T) { return static_cast<double>(t) / static_cast<double>(T); }

}  // namespace rflow
