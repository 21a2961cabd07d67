#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>

#include "rflow/rng.hpp"
#include "rflow/vae.hpp"

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

VaeConfig tiny_config() {
    VaeConfig cfg;
    cfg.latent_channels = 4;
    cfg.base_width = 8;
    cfg.groups = 2;
    return cfg;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape() == b.shape());
    double m = 0.0;
    for (size_t i = 0; i < a.data().size(); ++i)
        m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

std::string temp_path(const std::string& name) {
    return "/tmp/rflow_vae_test_" + name;
}

}  // namespace

TEST_CASE("encode compresses 4x per axis into the latent channels") {
    Vae vae(tiny_config(), 3);
    Rng rng(10);
    Tensor x = Tensor::randn({1, 1, 16, 16, 16}, rng);

    GaussianPosterior p = vae.encode(x);
    REQUIRE(p.mu.shape() == Shape{1, 4, 4, 4, 4});
    REQUIRE(p.log_var.shape() == Shape{1, 4, 4, 4, 4});

    GaussianPosterior p2 = vae.encode(x);
    CHECK(p.mu.data() == p2.mu.data());
    CHECK(p.log_var.data() == p2.log_var.data());

    Tensor y = Tensor::randn({1, 1, 16, 16, 16}, rng);
    GaussianPosterior q = vae.encode(y);
    CHECK(max_abs_diff(p.mu, q.mu) > 0.0);

    Tensor z = vae.decode(p.mu);
    REQUIRE(z.shape() == x.shape());

    CHECK(code_of([&] { vae.encode(Tensor::randn({1, 1, 15, 16, 16}, rng)); }) ==
          Err::IndivisibleExtent);
    CHECK(code_of([&] { vae.encode(Tensor::randn({1, 2, 16, 16, 16}, rng)); }) ==
          Err::ShapeMismatch);
    CHECK(code_of([&] { vae.encode(Tensor::randn({1, 16, 16, 16}, rng)); }) ==
          Err::ShapeMismatch);
}

TEST_CASE("reparameterize moments, collapse, and gradient structure") {
    Shape s{100000};
    GaussianPosterior std_post{Tensor::zeros(s), Tensor::zeros(s)};
    Rng rng(21);
    Tensor z = reparameterize(std_post, rng);
    double mean = 0.0;
    for (double v : z.data()) mean += v;
    mean /= static_cast<double>(z.data().size());
    double var = 0.0;
    for (double v : z.data()) var += (v - mean) * (v - mean);
    var /= static_cast<double>(z.data().size() - 1);
    CHECK(std::abs(mean) < 0.02);
    CHECK(var > 0.98);
    CHECK(var < 1.02);

    // Vanishing variance collapses onto mu.
    Rng rng2(22);
    Tensor mu_small = Tensor::randn({64}, rng2);
    GaussianPosterior tight{mu_small, Tensor::full({64}, -80.0)};
    Rng rng3(23);
    CHECK(max_abs_diff(reparameterize(tight, rng3), mu_small) < 1e-15);

    // d sum(z)/d mu = 1 everywhere; d sum(z)/d log_var = (z - mu) / 2 at log_var = 0.
    Tensor mu = Tensor::zeros({256}, true);
    Tensor lv = Tensor::zeros({256}, true);
    Rng rng4(24);
    Tensor zs = reparameterize(GaussianPosterior{mu, lv}, rng4);
    sum(zs).backward();
    for (double g : mu.grad()) CHECK(g == 1.0);
    for (size_t i = 0; i < lv.grad().size(); ++i)
        CHECK(lv.grad()[i] ==
              doctest::Approx(0.5 * (zs.data()[i] - mu.data()[i])).epsilon(1e-12));

    GaussianPosterior bad{Tensor::zeros({4}), Tensor::zeros({5})};
    Rng rng5(25);
    CHECK(code_of([&] { reparameterize(bad, rng5); }) == Err::ShapeMismatch);
}

TEST_CASE("kl_normal closed form against Monte Carlo") {
    GaussianPosterior std_post{Tensor::zeros({3, 4}), Tensor::zeros({3, 4})};
    CHECK(kl_normal(std_post).data()[0] == 0.0);

    GaussianPosterior one{Tensor::full({1}, 1.0), Tensor::zeros({1})};
    CHECK(kl_normal(one).data()[0] == 0.5);

    Rng rng(31);
    GaussianPosterior rand_post{Tensor::randn({1000}, rng), Tensor::randn({1000}, rng)};
    CHECK(kl_normal(rand_post).data()[0] >= 0.0);

    // MC estimate of E_q[ln q(z) - ln p(z)] for a single component.
    const double mu = 0.7, lv = 0.4;
    double analytic = 0.5 * (mu * mu + std::exp(lv) - 1.0 - lv);
    GaussianPosterior post{Tensor::full({1}, mu), Tensor::full({1}, lv)};
    CHECK(kl_normal(post).data()[0] == doctest::Approx(analytic).epsilon(1e-15));

    double sigma2 = std::exp(lv);
    Rng mc_rng(32);
    double acc = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        double zv = mu + std::sqrt(sigma2) * mc_rng.normal();
        double lq = -0.5 * std::log(sigma2) - (zv - mu) * (zv - mu) / (2.0 * sigma2);
        double lp = -0.5 * zv * zv;
        acc += lq - lp;
    }
    CHECK(acc / n == doctest::Approx(analytic).epsilon(0.02));

    GaussianPosterior bad{Tensor::zeros({4}), Tensor::zeros({5})};
    CHECK(code_of([&] { kl_normal(bad); }) == Err::ShapeMismatch);
}

TEST_CASE("elbo_loss composes reconstruction and weighted KL") {
    Vae vae(tiny_config(), 3);
    Rng rng(41);
    Tensor x = Tensor::randn({1, 1, 8, 8, 8}, rng);

    Rng ra(42);
    Tensor with_kl = elbo_loss(vae, x, 0.5, ra);

    // Same draw sequence, assembled by hand.
    Rng rb(42);
    GaussianPosterior post = vae.encode(x);
    Tensor z = reparameterize(post, rb);
    Tensor d = sub(vae.decode(z), x);
    Tensor manual = add(sum(mul(d, d)), mul_scalar(kl_normal(post), 0.5));
    CHECK(with_kl.data()[0] == doctest::Approx(manual.data()[0]).epsilon(1e-15));

    Rng rc(42);
    Tensor no_kl = elbo_loss(vae, x, 0.0, rc);
    Rng rd(42);
    Tensor d2 = sub(vae.decode(reparameterize(vae.encode(x), rd)), x);
    Tensor manual_sq = sum(mul(d2, d2));
    CHECK(no_kl.data()[0] == doctest::Approx(manual_sq.data()[0]).epsilon(1e-15));
    CHECK(with_kl.data()[0] > no_kl.data()[0]);

    Rng re(43);
    CHECK(code_of([&] { elbo_loss(vae, x, -0.1, re); }) == Err::ConfigInvalid);
}

TEST_CASE("posterior and autoencoding gradients match finite differences") {
    Parameters params;
    Rng rng(51);
    params.add("mu", Tensor::randn({2, 3}, rng, 1.0, true));
    params.add("lv", Tensor::randn({2, 3}, rng, 0.5, true));
    Tensor target = Tensor::randn({2, 3}, rng);

    auto f = [&](Parameters& p) {
        GaussianPosterior post{p.at("mu"), p.at("lv")};
        return add(kl_normal(post), mse_loss(post.mu, target));
    };
    GradCheckReport rep = grad_check(f, params, 1e-4, 1e-6);
    INFO("max_rel_err=", rep.max_rel_err, " worst=", rep.worst.param);
    CHECK(rep.pass());
    CHECK(rep.checked == 12);

    VaeConfig cfg;
    cfg.latent_channels = 2;
    cfg.base_width = 4;
    cfg.groups = 2;
    Vae vae(cfg, 5);
    Rng xr(52);
    Tensor x = Tensor::randn({1, 1, 4, 4, 4}, xr);
    auto g = [&](Parameters&) {
        GaussianPosterior post = vae.encode(x);
        Tensor recon = vae.decode(post.mu);
        return add(mse_loss(recon, x), mul_scalar(kl_normal(post), 1e-2));
    };
    GradCheckReport vrep = grad_check(g, vae.params(), 1e-3, 1e-4, 3);
    INFO("max_rel_err=", vrep.max_rel_err, " worst=", vrep.worst.param);
    CHECK(vrep.pass());
    CHECK(vrep.checked > 30);
}

TEST_CASE("volume bridges preserve layout and spacing") {
    Volume v({2, 3, 4}, {1.0, 0.8, 1.2});
    for (size_t i = 0; i < v.data.size(); ++i) v.data[i] = static_cast<double>(i) * 0.25 - 1.0;
    v.intensity_range = {-40.0, 160.0};

    Tensor t = volume_to_tensor(v);
    REQUIRE(t.shape() == Shape{1, 1, 2, 3, 4});
    CHECK(t.data() == v.data);

    Volume back = tensor_to_volume(t, v.spacing);
    CHECK(back.extents == v.extents);
    CHECK(back.spacing == v.spacing);
    CHECK(back.data == v.data);

    Rng rng(61);
    CHECK(code_of([&] { tensor_to_volume(Tensor::randn({2, 3, 4}, rng), {1, 1, 1}); }) ==
          Err::ShapeMismatch);
    CHECK(code_of([&] { tensor_to_volume(Tensor::randn({1, 2, 2, 3, 4}, rng), {1, 1, 1}); }) ==
          Err::ShapeMismatch);
}

TEST_CASE("lat files round-trip exactly and reject junk") {
    Rng rng(71);
    LatentRecord rec;
    rec.case_id = "case_0042";
    rec.role = "flair";
    rec.mu = Tensor::randn({1, 4, 2, 2, 2}, rng);
    rec.log_var = Tensor::randn({1, 4, 2, 2, 2}, rng);

    std::string path = temp_path("roundtrip.lat");
    write_lat(rec, path);
    LatentRecord got = read_lat(path);
    CHECK(got.case_id == rec.case_id);
    CHECK(got.role == rec.role);
    REQUIRE(got.mu.shape() == rec.mu.shape());
    CHECK(got.mu.data() == rec.mu.data());
    CHECK(got.log_var.data() == rec.log_var.data());
    std::remove(path.c_str());

    CHECK(code_of([] { read_lat("/tmp/rflow_vae_test_absent.lat"); }) == Err::DataMissing);

    std::string junk = temp_path("junk.lat");
    {
        std::ofstream os(junk, std::ios::binary);
        os << "this is not a latent header\n";
    }
    CHECK(code_of([&] { read_lat(junk); }) == Err::BadMagic);
    std::remove(junk.c_str());

    std::string trunc = temp_path("trunc.lat");
    write_lat(rec, trunc);
    {
        std::ifstream is(trunc, std::ios::binary);
        std::string all((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
        std::ofstream os(trunc, std::ios::binary | std::ios::trunc);
        os.write(all.data(), static_cast<std::streamsize>(all.size() / 2));
    }
    CHECK(code_of([&] { read_lat(trunc); }) == Err::BadMagic);
    std::remove(trunc.c_str());

    LatentRecord bad = rec;
    bad.log_var = Tensor::randn({1, 4, 2, 2, 3}, rng);
    CHECK(code_of([&] { write_lat(bad, temp_path("bad.lat")); }) == Err::ShapeMismatch);
}
