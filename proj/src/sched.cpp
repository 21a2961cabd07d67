#include "rflow/sched.hpp"

#include <cmath>

namespace rflow {

void RFlowSchedule::validate() const {
    check(steps >= 1, Err::ConfigInvalid, "rflow: steps must be >= 1");
    check(train_timesteps >= steps, Err::ConfigInvalid,
          "rflow: train_timesteps must be >= steps");
    check(dist.scale > 0.0, Err::ConfigInvalid, "rflow: timestep scale must be positive");
}

DdpmSchedule DdpmSchedule::linear(int T, double beta_start, double beta_end) {
    check(T >= 1, Err::ConfigInvalid, "ddpm: T must be >= 1");
    check(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end, Err::ConfigInvalid,
          "ddpm: beta range invalid");
    DdpmSchedule s;
    s.T = T;
    s.betas.resize(T);
    s.alphas.resize(T);
    s.alpha_bars.resize(T);
    double abar = 1.0;
    for (int t = 0; t < T; ++t) {
        double frac = T == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(T - 1);
        s.betas[t] = beta_start + (beta_end - beta_start) * frac;
        s.alphas[t] = 1.0 - s.betas[t];
        abar *= s.alphas[t];
        s.alpha_bars[t] = abar;
    }
    return s;
}

namespace {

void check_t01(double t) {
    check(t >= 0.0 && t <= 1.0, Err::TOutOfRange,
          "t=" + std::to_string(t) + " outside [0,1]");
}

void check_ddpm_t(int t, const DdpmSchedule& sched) {
    check(t >= 0 && t < sched.T, Err::TOutOfRange,
          "t=" + std::to_string(t) + " outside [0," + std::to_string(sched.T) + ")");
}

}  // namespace

Tensor rf_interpolate(const Tensor& z0, const Tensor& z1, double t) {
    check_t01(t);
    check(z0.shape() == z1.shape(), Err::ShapeMismatch, "rf_interpolate: shapes differ");
    if (t == 0.0) return z0;
    if (t == 1.0) return z1;
    return add(mul_scalar(z0, 1.0 - t), mul_scalar(z1, t));
}

Tensor rf_target_velocity(const Tensor& z0, const Tensor& z1, double t) {
    check_t01(t);
    check(z0.shape() == z1.shape(), Err::ShapeMismatch, "rf_target_velocity: shapes differ");
    return sub(z1, z0);
}

double sample_train_t(const TimestepDist& dist, Rng& rng) {
    if (dist.kind == TimestepDist::Kind::Uniform) return rng.uniform_open();
    double n = rng.normal();
    return 1.0 / (1.0 + std::exp(-(dist.loc + dist.scale * n)));
}

Tensor rflow_loss(const VelocityFn& vnet, const Tensor& z0, const TimestepDist& dist,
                  Rng& rng) {
    Tensor z1 = Tensor::randn(z0.shape(), rng);
    double t = sample_train_t(dist, rng);
    Tensor z_t = rf_interpolate(z0, z1, t);
    Tensor target = rf_target_velocity(z0, z1, t);
    return l1_loss(vnet(z_t, t), target);
}

Tensor rf_sample(const VelocityFn& vnet, const Tensor& z_init, int K) {
    check(K >= 1, Err::ConfigInvalid, "rf_sample: K must be >= 1");
    NoGradGuard ng;
    double dt = 1.0 / static_cast<double>(K);
    Tensor z = z_init;
    for (int k = K; k >= 1; --k) {
        double t = static_cast<double>(k) / static_cast<double>(K);
        z = sub(z, mul_scalar(vnet(z, t), dt));
    }
    return z;
}

Tensor ddpm_forward(const Tensor& z0, int t, const Tensor& eps, const DdpmSchedule& sched) {
    check_ddpm_t(t, sched);
    check(z0.shape() == eps.shape(), Err::ShapeMismatch, "ddpm_forward: shapes differ");
    double abar = sched.alpha_bars[static_cast<size_t>(t)];
    return add(mul_scalar(z0, std::sqrt(abar)), mul_scalar(eps, std::sqrt(1.0 - abar)));
}

Tensor ddpm_ancestral_step(const EpsFn& eps_net, const Tensor& z_t, int t,
                           const DdpmSchedule& sched, Rng& rng) {
    check_ddpm_t(t, sched);
    NoGradGuard ng;
    double beta = sched.betas[static_cast<size_t>(t)];
    double alpha = sched.alphas[static_cast<size_t>(t)];
    double abar = sched.alpha_bars[static_cast<size_t>(t)];
    Tensor eps_hat = eps_net(z_t, t);
    Tensor mu = mul_scalar(sub(z_t, mul_scalar(eps_hat, beta / std::sqrt(1.0 - abar))),
                           1.0 / std::sqrt(alpha));
    if (t == 0) return mu;
    Tensor noise = Tensor::randn(z_t.shape(), rng);
    return add(mu, mul_scalar(noise, std::sqrt(beta)));
}

Tensor ddpm_sample(const EpsFn& eps_net, const Tensor& z_init, const DdpmSchedule& sched,
                   Rng& rng) {
    Tensor z = z_init;
    for (int t = sched.T - 1; t >= 0; --t) z = ddpm_ancestral_step(eps_net, z, t, sched, rng);
    return z;
}

Tensor ddpm_loss(const EpsFn& eps_net, const Tensor& z0, const DdpmSchedule& sched, Rng& rng) {
    int t = static_cast<int>(rng.uniform_int(0, sched.T - 1));
    Tensor eps = Tensor::randn(z0.shape(), rng);
    Tensor z_t = ddpm_forward(z0, t, eps, sched);
    return mse_loss(eps_net(z_t, t), eps);
}

}  // namespace rflow
