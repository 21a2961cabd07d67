#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "rflow/rng.hpp"
#include "rflow/sched.hpp"
#include "rflow/tensor.hpp"

using namespace rflow;

namespace {

template <typename F>
Err code_of(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    return Err::Internal;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape() == b.shape());
    double m = 0.0;
    for (size_t i = 0; i < a.data().size(); ++i)
        m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

double sample_mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

double sample_var(const std::vector<double>& v) {
    double m = sample_mean(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return s / static_cast<double>(v.size() - 1);
}

double sample_corr(const std::vector<double>& a, const std::vector<double>& b) {
    double ma = sample_mean(a), mb = sample_mean(b);
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

}  // namespace

TEST_CASE("rf_interpolate endpoints and midpoint") {
    Rng rng(11);
    Tensor z0 = Tensor::randn({2, 3, 4, 4, 4}, rng);
    Tensor z1 = Tensor::randn({2, 3, 4, 4, 4}, rng);

    CHECK(max_abs_diff(rf_interpolate(z0, z1, 0.0), z0) == 0.0);
    CHECK(max_abs_diff(rf_interpolate(z0, z1, 1.0), z1) == 0.0);

    Tensor mid = rf_interpolate(z0, z1, 0.5);
    for (size_t i = 0; i < mid.data().size(); ++i)
        CHECK(mid.data()[i] == doctest::Approx(0.5 * (z0.data()[i] + z1.data()[i])).epsilon(1e-15));

    CHECK(code_of([&] { rf_interpolate(z0, z1, -0.1); }) == Err::TOutOfRange);
    CHECK(code_of([&] { rf_interpolate(z0, z1, 1.1); }) == Err::TOutOfRange);
    Tensor bad = Tensor::randn({2, 3}, rng);
    CHECK(code_of([&] { rf_interpolate(z0, bad, 0.5); }) == Err::ShapeMismatch);
}

TEST_CASE("rf_target_velocity is the straight-line displacement") {
    Rng rng(12);
    Tensor z0 = Tensor::randn({4, 4, 4}, rng);
    Tensor z1 = Tensor::randn({4, 4, 4}, rng);
    Tensor d = sub(z1, z0);

    for (double t : {0.0, 0.25, 0.5, 0.99, 1.0})
        CHECK(max_abs_diff(rf_target_velocity(z0, z1, t), d) == 0.0);

    CHECK(max_abs_diff(rf_target_velocity(z0, z0, 0.3), Tensor::zeros(z0.shape())) == 0.0);

    // Central difference of the path itself: (z_{t+h} - z_{t-h}) / (2h).
    double t = 0.4, h = 1e-5;
    Tensor hi = rf_interpolate(z0, z1, t + h);
    Tensor lo = rf_interpolate(z0, z1, t - h);
    Tensor fd = mul_scalar(sub(hi, lo), 1.0 / (2.0 * h));
    CHECK(max_abs_diff(fd, rf_target_velocity(z0, z1, t)) < 1e-8);

    CHECK(code_of([&] { rf_target_velocity(z0, z1, 2.0); }) == Err::TOutOfRange);
}

TEST_CASE("sample_train_t stays in the open interval with the right moments") {
    const int n = 100000;

    TimestepDist logit;  // loc 0, scale 1
    Rng rng(301);
    std::vector<double> ts(n);
    for (int i = 0; i < n; ++i) {
        ts[i] = sample_train_t(logit, rng);
        REQUIRE(ts[i] > 0.0);
        REQUIRE(ts[i] < 1.0);
    }
    CHECK(std::abs(sample_mean(ts) - 0.5) < 0.01);

    TimestepDist uni;
    uni.kind = TimestepDist::Kind::Uniform;
    Rng rng2(302);
    for (int i = 0; i < n; ++i) {
        ts[i] = sample_train_t(uni, rng2);
        REQUIRE(ts[i] > 0.0);
        REQUIRE(ts[i] < 1.0);
    }
    CHECK(std::abs(sample_mean(ts) - 0.5) < 0.01);
    CHECK(std::abs(sample_var(ts) - 1.0 / 12.0) < 0.005);

    TimestepDist shifted;
    shifted.loc = 2.0;
    Rng rng3(303);
    double m = 0.0;
    for (int i = 0; i < n; ++i) m += sample_train_t(shifted, rng3);
    CHECK(m / n > 0.7);
}

TEST_CASE("rflow_loss vanishes for the exact field and matches E|z1-z0| for zero field") {
    Rng rng(41);
    Tensor z0 = Tensor::randn({100000}, rng);

    // The straight path gives z1 - z0 = (z_t - z0) / t for t > 0.
    VelocityFn oracle = [&](const Tensor& z_t, double t) {
        return mul_scalar(sub(z_t, z0), 1.0 / t);
    };
    Rng r1(42);
    Tensor zero_loss = rflow_loss(oracle, z0, TimestepDist{}, r1);
    REQUIRE(zero_loss.data().size() == 1);
    CHECK(zero_loss.data()[0] >= 0.0);
    CHECK(zero_loss.data()[0] < 1e-10);

    // Zero field: loss is mean |z1 - z0| with z0, z1 ~ N(0,1), i.e. E|N(0,2)| = 2/sqrt(pi).
    VelocityFn zero_field = [&](const Tensor& z_t, double) { return Tensor::zeros(z_t.shape()); };
    Rng r2(43);
    Tensor l = rflow_loss(zero_field, z0, TimestepDist{}, r2);
    CHECK(l.data()[0] == doctest::Approx(1.1283791670955126).epsilon(0.02));
}

TEST_CASE("rf_sample integrates a constant field exactly and counts evaluations") {
    Rng rng(51);
    Tensor z0 = Tensor::randn({2, 4, 4, 4}, rng);
    Tensor z1 = Tensor::randn({2, 4, 4, 4}, rng);
    Tensor d = sub(z1, z0);

    for (int K : {1, 10, 200}) {
        int nfe = 0;
        VelocityFn vnet = [&](const Tensor&, double) {
            ++nfe;
            return d;
        };
        Tensor out = rf_sample(vnet, z1, K);
        CHECK(nfe == K);
        CHECK(max_abs_diff(out, z0) < 1e-10);
    }

    VelocityFn zero_field = [](const Tensor& z, double) { return Tensor::zeros(z.shape()); };
    CHECK(max_abs_diff(rf_sample(zero_field, z1, 17), z1) == 0.0);

    // No randomness anywhere: repeated runs are bit-identical.
    VelocityFn bent = [&](const Tensor& z, double t) { return mul_scalar(z, t); };
    Tensor a = rf_sample(bent, z1, 25);
    Tensor b = rf_sample(bent, z1, 25);
    CHECK(a.data() == b.data());

    CHECK(code_of([&] { rf_sample(zero_field, z1, 0); }) == Err::ConfigInvalid);
}

TEST_CASE("schedule validation rejects bad settings") {
    RFlowSchedule s;
    s.steps = 0;
    CHECK(code_of([&] { s.validate(); }) == Err::ConfigInvalid);
    s.steps = 2000;
    s.train_timesteps = 1000;
    CHECK(code_of([&] { s.validate(); }) == Err::ConfigInvalid);
    s.steps = 200;
    s.dist.scale = 0.0;
    CHECK(code_of([&] { s.validate(); }) == Err::ConfigInvalid);
    s.dist.scale = 1.0;
    s.validate();

    CHECK(code_of([] { DdpmSchedule::linear(0); }) == Err::ConfigInvalid);
    CHECK(code_of([] { DdpmSchedule::linear(10, 0.0, 0.02); }) == Err::ConfigInvalid);
    CHECK(code_of([] { DdpmSchedule::linear(10, 1e-4, 1.0); }) == Err::ConfigInvalid);
    CHECK(code_of([] { DdpmSchedule::linear(10, 0.02, 1e-4); }) == Err::ConfigInvalid);
}

TEST_CASE("ddpm linear schedule endpoints") {
    DdpmSchedule s = DdpmSchedule::linear(1000, 1e-4, 0.02);
    REQUIRE(s.betas.size() == 1000);
    CHECK(s.betas.front() == 1e-4);
    CHECK(s.betas.back() == 0.02);
    CHECK(s.alpha_bars.front() == 0.9999);
    CHECK(s.alpha_bars.back() == 4.0358297653756754e-05);
    for (size_t t = 1; t < s.alpha_bars.size(); ++t) {
        CHECK(s.betas[t] > s.betas[t - 1]);
        CHECK(s.alpha_bars[t] < s.alpha_bars[t - 1]);
    }
}

TEST_CASE("ddpm_forward endpoints and exact scaling") {
    DdpmSchedule s = DdpmSchedule::linear(1000, 1e-4, 0.02);
    Rng rng(61);
    Tensor z0 = Tensor::randn({32, 32, 32}, rng);
    Tensor eps = Tensor::randn({32, 32, 32}, rng);

    // eps = 0 leaves exactly sqrt(abar_t) z0.
    Tensor zt = ddpm_forward(z0, 500, Tensor::zeros(z0.shape()), s);
    double root = std::sqrt(s.alpha_bars[500]);
    for (size_t i = 0; i < zt.data().size(); ++i)
        CHECK(zt.data()[i] == z0.data()[i] * root);

    // t = 0 barely perturbs the sample.
    Tensor z_first = ddpm_forward(z0, 0, eps, s);
    double mse = 0.0;
    for (size_t i = 0; i < z0.data().size(); ++i) {
        double d = z_first.data()[i] - z0.data()[i];
        mse += d * d;
    }
    mse /= static_cast<double>(z0.data().size());
    CHECK(mse < 1e-3);

    // t = T-1 has essentially forgotten the sample.
    Tensor z_last = ddpm_forward(z0, 999, eps, s);
    CHECK(std::abs(sample_corr(z_last.data(), z0.data())) < 0.05);

    CHECK(code_of([&] { ddpm_forward(z0, -1, eps, s); }) == Err::TOutOfRange);
    CHECK(code_of([&] { ddpm_forward(z0, 1000, eps, s); }) == Err::TOutOfRange);
}

TEST_CASE("ddpm forward marginal is variance preserving") {
    DdpmSchedule s = DdpmSchedule::linear(1000, 1e-4, 0.02);
    Rng rng(71);
    Tensor z0 = Tensor::randn({100000}, rng);
    Tensor eps = Tensor::randn({100000}, rng);
    for (int t : {100, 500, 999}) {
        Tensor zt = ddpm_forward(z0, t, eps, s);
        CHECK(sample_var(zt.data()) == doctest::Approx(1.0).epsilon(0.05));
    }
}

TEST_CASE("ddpm ancestral step inverts a one-step chain") {
    DdpmSchedule s = DdpmSchedule::linear(1, 0.1, 0.1);
    Rng rng(81);
    Tensor z0 = Tensor::randn({4, 4, 4}, rng);
    Tensor eps = Tensor::randn({4, 4, 4}, rng);
    Tensor zt = ddpm_forward(z0, 0, eps, s);

    EpsFn exact = [&](const Tensor&, int) { return eps; };
    Rng chain_rng(82);
    Tensor rec = ddpm_ancestral_step(exact, zt, 0, s, chain_rng);
    CHECK(max_abs_diff(rec, z0) < 1e-6);
}

TEST_CASE("ddpm ancestral step adds no noise at t=0") {
    DdpmSchedule s = DdpmSchedule::linear(16, 1e-4, 0.02);
    Rng rng(91);
    Tensor zt = Tensor::randn({4, 4, 4}, rng);
    EpsFn zero_eps = [](const Tensor& z, int) { return Tensor::zeros(z.shape()); };

    Rng ra(1), rb(2);
    Tensor a = ddpm_ancestral_step(zero_eps, zt, 0, s, ra);
    Tensor b = ddpm_ancestral_step(zero_eps, zt, 0, s, rb);
    CHECK(a.data() == b.data());

    Rng rc(1), rd(2);
    Tensor c = ddpm_ancestral_step(zero_eps, zt, 5, s, rc);
    Tensor d = ddpm_ancestral_step(zero_eps, zt, 5, s, rd);
    CHECK(max_abs_diff(c, d) > 0.0);
}

TEST_CASE("ddpm_sample walks the full chain with exactly T evaluations") {
    const int T = 37;
    DdpmSchedule s = DdpmSchedule::linear(T, 1e-4, 0.02);
    Rng rng(101);
    Tensor z = Tensor::randn({2, 4, 4, 4}, rng);

    int nfe = 0;
    int last_t = T;
    EpsFn counting = [&](const Tensor& zt, int t) {
        ++nfe;
        CHECK(t == last_t - 1);  // strictly descending T-1 .. 0
        last_t = t;
        return Tensor::zeros(zt.shape());
    };
    Rng chain_rng(102);
    ddpm_sample(counting, z, s, chain_rng);
    CHECK(nfe == T);
    CHECK(last_t == 0);

    // Same seed, same chain — bit-identical.
    EpsFn zero_eps = [](const Tensor& zt, int) { return Tensor::zeros(zt.shape()); };
    Rng r1(103), r2(103);
    Tensor a = ddpm_sample(zero_eps, z, s, r1);
    Tensor b = ddpm_sample(zero_eps, z, s, r2);
    CHECK(a.data() == b.data());
}

TEST_CASE("ddpm_loss is a nonnegative scalar and zero for the exact predictor") {
    DdpmSchedule s = DdpmSchedule::linear(50, 1e-4, 0.02);
    Rng rng(111);
    Tensor z0 = Tensor::randn({4, 4, 4}, rng);

    // Recover eps from z_t: eps = (z_t - sqrt(abar) z0) / sqrt(1 - abar).
    EpsFn exact = [&](const Tensor& zt, int t) {
        double abar = s.alpha_bars[static_cast<size_t>(t)];
        return mul_scalar(sub(zt, mul_scalar(z0, std::sqrt(abar))),
                          1.0 / std::sqrt(1.0 - abar));
    };
    Rng r1(112);
    Tensor l = ddpm_loss(exact, z0, s, r1);
    REQUIRE(l.data().size() == 1);
    CHECK(l.data()[0] >= 0.0);
    CHECK(l.data()[0] < 1e-10);

    EpsFn zero_eps = [](const Tensor& zt, int) { return Tensor::zeros(zt.shape()); };
    Rng r2(113);
    Tensor lz = ddpm_loss(zero_eps, z0, s, r2);
    CHECK(lz.data()[0] > 0.0);
}

TEST_CASE("ddpm_time maps integer steps onto the unit interval") {
    CHECK(ddpm_time(0, 1000) == 0.0);
    CHECK(ddpm_time(500, 1000) == 0.5);
    CHECK(ddpm_time(999, 1000) == 0.999);
}
