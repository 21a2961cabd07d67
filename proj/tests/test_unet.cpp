#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "rflow/rng.hpp"
#include "rflow/unet.hpp"

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

UNetConfig tiny_config() {
    UNetConfig cfg;
    cfg.in_channels = 6;
    cfg.out_channels = 2;
    cfg.channels = {4, 4};
    cfg.res_blocks = 1;
    cfg.time_embed_dim = 8;
    cfg.groups = 2;
    return cfg;
}

double l2_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape() == b.shape());
    double s = 0.0;
    for (size_t i = 0; i < a.data().size(); ++i) {
        double d = a.data()[i] - b.data()[i];
        s += d * d;
    }
    return std::sqrt(s);
}

}  // namespace

TEST_CASE("time_embed layout: sin block then cos block, geometric frequencies") {
    Tensor e0 = time_embed(0.0, 8);
    REQUIRE(e0.shape() == Shape{8});
    for (int i = 0; i < 4; ++i) {
        CHECK(e0.data()[static_cast<size_t>(i)] == 0.0);
        CHECK(e0.data()[static_cast<size_t>(4 + i)] == 1.0);
    }

    const double omegas[4] = {1.0, std::pow(10.0, 4.0 / 3.0), std::pow(10.0, 8.0 / 3.0), 1e4};
    double t = 0.37;
    Tensor e = time_embed(t, 8);
    for (int i = 0; i < 4; ++i) {
        CHECK(e.data()[static_cast<size_t>(i)] ==
              doctest::Approx(std::sin(t * omegas[i])).epsilon(1e-14));
        CHECK(e.data()[static_cast<size_t>(4 + i)] ==
              doctest::Approx(std::cos(t * omegas[i])).epsilon(1e-14));
    }

    Tensor e2 = time_embed(0.5, 2);
    CHECK(e2.data()[0] == doctest::Approx(std::sin(0.5)).epsilon(1e-15));
    CHECK(e2.data()[1] == doctest::Approx(std::cos(0.5)).epsilon(1e-15));

    CHECK(l2_diff(time_embed(0.1, 16), time_embed(0.9, 16)) > 0.1);

    CHECK(code_of([] { time_embed(0.5, 7); }) == Err::OddDim);
    CHECK(code_of([] { time_embed(0.5, 0); }) == Err::OddDim);
}

TEST_CASE("assemble_input concatenates streams in fixed order") {
    Shape s{1, 2, 2, 2, 2};
    Tensor z = Tensor::full(s, 1.0);
    ConditioningLatents c;
    c.cond_t1w = Tensor::full(s, 2.0);
    c.cond_flair = Tensor::full(s, 3.0);

    Tensor x = assemble_input(z, c);
    REQUIRE(x.shape() == Shape{1, 6, 2, 2, 2});
    size_t block = 2 * 2 * 2 * 2;
    for (size_t i = 0; i < block; ++i) CHECK(x.data()[i] == 1.0);
    for (size_t i = 0; i < block; ++i) CHECK(x.data()[block + i] == 2.0);
    for (size_t i = 0; i < block; ++i) CHECK(x.data()[2 * block + i] == 3.0);

    c.mask_t1w = true;
    Tensor xm = assemble_input(z, c);
    for (size_t i = 0; i < block; ++i) CHECK(xm.data()[block + i] == 0.0);
    for (size_t i = 0; i < block; ++i) CHECK(xm.data()[2 * block + i] == 3.0);

    c.mask_flair = true;
    Tensor xb = assemble_input(z, c);
    for (size_t i = 0; i < block; ++i) CHECK(xb.data()[block + i] == 0.0);
    for (size_t i = 0; i < block; ++i) CHECK(xb.data()[2 * block + i] == 0.0);
    for (size_t i = 0; i < block; ++i) CHECK(xb.data()[i] == 1.0);

    ConditioningLatents bad;
    bad.cond_t1w = Tensor::full({1, 2, 2, 2, 4}, 2.0);
    bad.cond_flair = Tensor::full(s, 3.0);
    CHECK(code_of([&] { assemble_input(z, bad); }) == Err::ShapeMismatch);

    ConditioningLatents missing;  // undefined streams, no masks
    CHECK(code_of([&] { assemble_input(z, missing); }) == Err::ShapeMismatch);

    // Masked streams do not need a tensor at all.
    ConditioningLatents masked_only;
    masked_only.mask_t1w = true;
    masked_only.mask_flair = true;
    Tensor xo = assemble_input(z, masked_only);
    REQUIRE(xo.shape() == Shape{1, 6, 2, 2, 2});
}

TEST_CASE("unet forward shape, zero init, and determinism") {
    UNetConfig cfg = tiny_config();
    UNet u(cfg, 7);
    CHECK(u.params().count_elements() == 5142);
    CHECK(u.params().size() == 46);

    Rng rng(5);
    Tensor x = Tensor::randn({1, 6, 8, 8, 8}, rng);
    Tensor y = u.forward(x, 0.3);
    REQUIRE(y.shape() == Shape{1, 2, 8, 8, 8});

    // Zero-initialized output conv: identically zero prediction at init.
    for (double v : y.data()) CHECK(v == 0.0);

    UNet u2(cfg, 7);
    CHECK(u2.params().count_elements() == u.params().count_elements());
    Tensor y2 = u2.forward(x, 0.3);
    CHECK(y.data() == y2.data());

    UNet u3(cfg, 8);
    bool same = true;
    for (const auto& [name, t] : u.params()) {
        if (t.data() != u3.params().at(name).data()) same = false;
        REQUIRE(t.shape() == u3.params().at(name).shape());
    }
    CHECK_FALSE(same);
}

TEST_CASE("unet responds to conditioning and time once the head is live") {
    UNetConfig cfg = tiny_config();
    UNet u(cfg, 7);
    Rng wr(99);
    for (double& v : u.params().at("out.w").raw_data()) v = wr.normal() * 0.1;

    Rng rng(6);
    Tensor z = Tensor::randn({1, 2, 8, 8, 8}, rng);
    ConditioningLatents c;
    c.cond_t1w = Tensor::randn({1, 2, 8, 8, 8}, rng);
    c.cond_flair = Tensor::randn({1, 2, 8, 8, 8}, rng);

    Tensor base = u.forward(assemble_input(z, c), 0.3);

    ConditioningLatents masked = c;
    masked.mask_flair = true;
    Tensor altered = u.forward(assemble_input(z, masked), 0.3);
    CHECK(l2_diff(base, altered) > 0.0);

    Tensor later = u.forward(assemble_input(z, c), 0.9);
    CHECK(l2_diff(base, later) > 0.0);
}

TEST_CASE("unet rejects malformed inputs") {
    UNetConfig cfg = tiny_config();
    UNet u(cfg, 7);
    Rng rng(5);

    CHECK(code_of([&] { u.forward(Tensor::randn({6, 8, 8, 8}, rng), 0.5); }) ==
          Err::ShapeMismatch);
    CHECK(code_of([&] { u.forward(Tensor::randn({1, 4, 8, 8, 8}, rng), 0.5); }) ==
          Err::ShapeMismatch);
    CHECK(code_of([&] { u.forward(Tensor::randn({1, 6, 7, 8, 8}, rng), 0.5); }) ==
          Err::IndivisibleExtent);

    UNetConfig bad = cfg;
    bad.time_embed_dim = 7;
    CHECK(code_of([&] { UNet v(bad, 7); }) == Err::ConfigInvalid);
}

TEST_CASE("unet gradients match finite differences") {
    UNetConfig cfg = tiny_config();
    UNet u(cfg, 7);
    Rng wr(99);
    for (double& v : u.params().at("out.w").raw_data()) v = wr.normal() * 0.05;

    Rng rng(8);
    Tensor x = Tensor::randn({1, 6, 4, 4, 4}, rng);
    Tensor target = Tensor::randn({1, 2, 4, 4, 4}, rng);

    auto f = [&](Parameters&) { return l1_loss(u.forward(x, 0.4), target); };
    GradCheckReport rep = grad_check(f, u.params(), 1e-3, 1e-4, 3);
    INFO("max_rel_err=", rep.max_rel_err, " worst=", rep.worst.param);
    CHECK(rep.pass());
    CHECK(rep.checked > 100);
}
