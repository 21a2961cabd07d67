#include "rflow/unet.hpp"

#include <cmath>

namespace rflow {

void UNetConfig::validate() const {
    check(channels.size() >= 2, Err::ConfigInvalid, "unet: need at least 2 levels");
    check(in_channels >= 1 && out_channels >= 1, Err::ConfigInvalid,
          "unet: channel counts must be positive");
    check(res_blocks >= 1, Err::ConfigInvalid, "unet: res_blocks must be >= 1");
    check(time_embed_dim >= 4 && time_embed_dim % 2 == 0, Err::ConfigInvalid,
          "unet: time_embed_dim must be even and >= 4");
    check(groups >= 1, Err::ConfigInvalid, "unet: groups must be >= 1");
    for (int c : channels)
        check(c >= groups && c % groups == 0, Err::ConfigInvalid,
              "unet: every level width must be a positive multiple of groups");
}

Tensor time_embed(double t, int dim) {
    check(dim >= 2 && dim % 2 == 0, Err::OddDim,
          "time_embed: dim must be even, got " + std::to_string(dim));
    int half = dim / 2;
    std::vector<double> out(static_cast<size_t>(dim));
    for (int i = 0; i < half; ++i) {
        double omega =
            half == 1 ? 1.0
                      : std::pow(10.0, 4.0 * static_cast<double>(i) /
                                           static_cast<double>(half - 1));
        out[static_cast<size_t>(i)] = std::sin(t * omega);
        out[static_cast<size_t>(half + i)] = std::cos(t * omega);
    }
    return Tensor::from_data({static_cast<size_t>(dim)}, std::move(out));
}

Tensor assemble_input(const Tensor& z_t, const ConditioningLatents& c) {
    Tensor t1w = c.mask_t1w ? Tensor::zeros(z_t.shape()) : c.cond_t1w;
    Tensor flair = c.mask_flair ? Tensor::zeros(z_t.shape()) : c.cond_flair;
    check(t1w.defined() && flair.defined(), Err::ShapeMismatch,
          "assemble_input: missing conditioning stream");
    check(t1w.shape() == z_t.shape() && flair.shape() == z_t.shape(), Err::ShapeMismatch,
          "assemble_input: conditioning shape differs from latent");
    return concat_channels({z_t, t1w, flair});
}

namespace {

size_t conv_fan_in(const Shape& kshape) {
    return kshape[1] * kshape[2] * kshape[3] * kshape[4];
}

void add_conv(Parameters& p, Rng& rng, const std::string& name, int out_ch, int in_ch,
              int k) {
    Shape ks{static_cast<size_t>(out_ch), static_cast<size_t>(in_ch), static_cast<size_t>(k),
             static_cast<size_t>(k), static_cast<size_t>(k)};
    double std = 1.0 / std::sqrt(static_cast<double>(conv_fan_in(ks)));
    p.add(name + ".w", Tensor::randn(ks, rng, std));
    p.add(name + ".b", Tensor::zeros({static_cast<size_t>(out_ch)}));
}

void add_linear(Parameters& p, Rng& rng, const std::string& name, int in_dim, int out_dim) {
    double std = 1.0 / std::sqrt(static_cast<double>(in_dim));
    p.add(name + ".w",
          Tensor::randn({static_cast<size_t>(in_dim), static_cast<size_t>(out_dim)}, rng, std));
    p.add(name + ".b", Tensor::zeros({static_cast<size_t>(out_dim)}));
}

void add_gn(Parameters& p, const std::string& name, int ch) {
    p.add(name + ".g", Tensor::full({static_cast<size_t>(ch)}, 1.0));
    p.add(name + ".b", Tensor::zeros({static_cast<size_t>(ch)}));
}

void add_res_block(Parameters& p, Rng& rng, const std::string& name, int in_ch, int out_ch,
                   int ted) {
    add_gn(p, name + ".gn1", in_ch);
    add_conv(p, rng, name + ".conv1", out_ch, in_ch, 3);
    add_linear(p, rng, name + ".temb", ted, out_ch);
    add_gn(p, name + ".gn2", out_ch);
    add_conv(p, rng, name + ".conv2", out_ch, out_ch, 3);
    if (in_ch != out_ch) add_conv(p, rng, name + ".skip", out_ch, in_ch, 1);
}

}  // namespace

UNet::UNet(UNetConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng = derive_rng(seed, {0x756e6574});  // "unet" stream
    int L = cfg_.levels();
    int ted = cfg_.time_embed_dim;

    add_conv(params_, rng, "stem", cfg_.channels[0], cfg_.in_channels, 3);
    add_linear(params_, rng, "time.l1", ted, ted);
    add_linear(params_, rng, "time.l2", ted, ted);

    for (int l = 0; l < L; ++l) {
        int in_ch = l == 0 ? cfg_.channels[0] : cfg_.channels[l - 1];
        for (int r = 0; r < cfg_.res_blocks; ++r) {
            add_res_block(params_, rng, "enc" + std::to_string(l) + ".res" + std::to_string(r),
                          r == 0 ? in_ch : cfg_.channels[l], cfg_.channels[l], ted);
        }
        if (l < L - 1)
            add_conv(params_, rng, "down" + std::to_string(l), cfg_.channels[l],
                     cfg_.channels[l], 3);
    }
    for (int l = L - 2; l >= 0; --l) {
        std::string name = "dec" + std::to_string(l);
        add_conv(params_, rng, name + ".up", cfg_.channels[l], cfg_.channels[l + 1], 3);
        for (int r = 0; r < cfg_.res_blocks; ++r) {
            add_res_block(params_, rng, name + ".res" + std::to_string(r),
                          r == 0 ? 2 * cfg_.channels[l] : cfg_.channels[l], cfg_.channels[l],
                          ted);
        }
    }
    add_gn(params_, "out.gn", cfg_.channels[0]);
    params_.add("out.w", Tensor::zeros({static_cast<size_t>(cfg_.out_channels),
                                        static_cast<size_t>(cfg_.channels[0]), 3, 3, 3}));
    params_.add("out.b", Tensor::zeros({static_cast<size_t>(cfg_.out_channels)}));
}

Tensor UNet::res_block(const Tensor& x, const Tensor& time_feat, const std::string& name,
                       int in_ch, int out_ch) const {
    const Parameters& p = params_;
    Tensor h = group_norm(x, cfg_.groups, p.at(name + ".gn1.g"), p.at(name + ".gn1.b"));
    h = silu(h);
    h = conv3d(h, p.at(name + ".conv1.w"), 1, 1);
    h = add_channel_bias(h, p.at(name + ".conv1.b"));
    Tensor e = linear(time_feat, p.at(name + ".temb.w"), p.at(name + ".temb.b"));
    h = add_sample_channel_bias(h, e);
    h = group_norm(h, cfg_.groups, p.at(name + ".gn2.g"), p.at(name + ".gn2.b"));
    h = silu(h);
    h = conv3d(h, p.at(name + ".conv2.w"), 1, 1);
    h = add_channel_bias(h, p.at(name + ".conv2.b"));
    Tensor skip = in_ch == out_ch ? x : conv3d(x, p.at(name + ".skip.w"), 1, 0);
    return add(h, skip);
}

Tensor UNet::forward(const Tensor& x, double t) const {
    check(x.rank() == 5, Err::ShapeMismatch, "unet: input must be [B,C,D,H,W]");
    check(x.shape()[1] == static_cast<size_t>(cfg_.in_channels), Err::ShapeMismatch,
          "unet: input has " + std::to_string(x.shape()[1]) + " channels, config expects " +
              std::to_string(cfg_.in_channels));
    int L = cfg_.levels();
    size_t div = size_t{1} << (L - 1);
    for (int a = 2; a < 5; ++a)
        check(x.shape()[static_cast<size_t>(a)] % div == 0, Err::IndivisibleExtent,
              "unet: spatial extent " + std::to_string(x.shape()[static_cast<size_t>(a)]) +
                  " not divisible by " + std::to_string(div));

    const Parameters& p = params_;
    size_t B = x.shape()[0];
    size_t ted = static_cast<size_t>(cfg_.time_embed_dim);
    Tensor sinus = time_embed(t, cfg_.time_embed_dim);
    std::vector<double> rows(B * ted);
    for (size_t b = 0; b < B; ++b)
        std::copy(sinus.data().begin(), sinus.data().end(), rows.begin() + b * ted);
    Tensor tf = Tensor::from_data({B, ted}, std::move(rows));
    tf = silu(linear(tf, p.at("time.l1.w"), p.at("time.l1.b")));
    tf = linear(tf, p.at("time.l2.w"), p.at("time.l2.b"));

    Tensor h = conv3d(x, p.at("stem.w"), 1, 1);
    h = add_channel_bias(h, p.at("stem.b"));

    std::vector<Tensor> skips;
    for (int l = 0; l < L; ++l) {
        int in_ch = l == 0 ? cfg_.channels[0] : cfg_.channels[l - 1];
        for (int r = 0; r < cfg_.res_blocks; ++r)
            h = res_block(h, tf, "enc" + std::to_string(l) + ".res" + std::to_string(r),
                          r == 0 ? in_ch : cfg_.channels[l], cfg_.channels[l]);
        if (l < L - 1) {
            skips.push_back(h);
            h = conv3d(h, p.at("down" + std::to_string(l) + ".w"), 2, 1);
            h = add_channel_bias(h, p.at("down" + std::to_string(l) + ".b"));
        }
    }
    for (int l = L - 2; l >= 0; --l) {
        std::string name = "dec" + std::to_string(l);
        h = upsample_nearest2(h);
        h = conv3d(h, p.at(name + ".up.w"), 1, 1);
        h = add_channel_bias(h, p.at(name + ".up.b"));
        h = concat_channels({h, skips[static_cast<size_t>(l)]});
        for (int r = 0; r < cfg_.res_blocks; ++r)
            h = res_block(h, tf, name + ".res" + std::to_string(r),
                          r == 0 ? 2 * cfg_.channels[l] : cfg_.channels[l], cfg_.channels[l]);
    }
    h = group_norm(h, cfg_.groups, p.at("out.gn.g"), p.at("out.gn.b"));
    h = silu(h);
    h = conv3d(h, p.at("out.w"), 1, 1);
    return add_channel_bias(h, p.at("out.b"));
}

}  // namespace rflow
