#include "rflow/vae.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

namespace rflow {

void VaeConfig::validate() const {
    check(latent_channels >= 1, Err::ConfigInvalid, "vae: latent_channels must be >= 1");
    check(base_width >= groups && base_width % groups == 0 &&
              (2 * base_width) % groups == 0,
          Err::ConfigInvalid, "vae: base_width must be a positive multiple of groups");
}

namespace {

void add_conv(Parameters& p, Rng& rng, const std::string& name, int out_ch, int in_ch, int k) {
    size_t fan_in = static_cast<size_t>(in_ch) * static_cast<size_t>(k * k * k);
    double std = 1.0 / std::sqrt(static_cast<double>(fan_in));
    p.add(name + ".w",
          Tensor::randn({static_cast<size_t>(out_ch), static_cast<size_t>(in_ch),
                         static_cast<size_t>(k), static_cast<size_t>(k),
                         static_cast<size_t>(k)},
                        rng, std));
    p.add(name + ".b", Tensor::zeros({static_cast<size_t>(out_ch)}));
}

Tensor conv_bias(const Parameters& p, const Tensor& x, const std::string& name, int stride) {
    return add_channel_bias(conv3d(x, p.at(name + ".w"), stride, 1), p.at(name + ".b"));
}

}  // namespace

Vae::Vae(VaeConfig cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng = derive_rng(seed, {0x766165});  // "vae" stream
    int b = cfg_.base_width, lat = cfg_.latent_channels;
    add_conv(params_, rng, "enc.c1", b, 1, 3);
    add_conv(params_, rng, "enc.c2", 2 * b, b, 3);       // stride 2
    add_conv(params_, rng, "enc.c3", 2 * b, 2 * b, 3);   // stride 2
    add_conv(params_, rng, "enc.c4", 2 * b, 2 * b, 3);
    add_conv(params_, rng, "enc.mu", lat, 2 * b, 3);
    add_conv(params_, rng, "enc.lv", lat, 2 * b, 3);
    add_conv(params_, rng, "dec.c1", 2 * b, lat, 3);
    add_conv(params_, rng, "dec.u1", b, 2 * b, 3);       // after 2x upsample
    add_conv(params_, rng, "dec.u2", b, b, 3);           // after 2x upsample
    add_conv(params_, rng, "dec.out", 1, b, 3);
}

GaussianPosterior Vae::encode(const Tensor& x) const {
    check(x.rank() == 5 && x.shape()[1] == 1, Err::ShapeMismatch,
          "vae encode: input must be [B,1,D,H,W]");
    for (int a = 2; a < 5; ++a)
        check(x.shape()[static_cast<size_t>(a)] % 4 == 0, Err::IndivisibleExtent,
              "vae encode: extent " + std::to_string(x.shape()[static_cast<size_t>(a)]) +
                  " not divisible by 4");
    Tensor h = silu(conv_bias(params_, x, "enc.c1", 1));
    h = silu(conv_bias(params_, h, "enc.c2", 2));
    h = silu(conv_bias(params_, h, "enc.c3", 2));
    h = silu(conv_bias(params_, h, "enc.c4", 1));
    return {conv_bias(params_, h, "enc.mu", 1), conv_bias(params_, h, "enc.lv", 1)};
}

Tensor Vae::decode(const Tensor& z) const {
    check(z.rank() == 5 && z.shape()[1] == static_cast<size_t>(cfg_.latent_channels),
          Err::ShapeMismatch, "vae decode: latent geometry mismatch");
    Tensor h = silu(conv_bias(params_, z, "dec.c1", 1));
    h = upsample_nearest2(h);
    h = silu(conv_bias(params_, h, "dec.u1", 1));
    h = upsample_nearest2(h);
    h = silu(conv_bias(params_, h, "dec.u2", 1));
    return conv_bias(params_, h, "dec.out", 1);
}

Tensor reparameterize(const GaussianPosterior& p, Rng& rng) {
    check(p.mu.shape() == p.log_var.shape(), Err::ShapeMismatch,
          "reparameterize: mu and log_var shapes differ");
    Tensor eps = Tensor::randn(p.mu.shape(), rng);
    return add(p.mu, mul(exp(mul_scalar(p.log_var, 0.5)), eps));
}

Tensor kl_normal(const GaussianPosterior& p) {
    check(p.mu.shape() == p.log_var.shape(), Err::ShapeMismatch,
          "kl_normal: mu and log_var shapes differ");
    Tensor term = sub(add(mul(p.mu, p.mu), exp(p.log_var)),
                      add_scalar(p.log_var, 1.0));
    return mul_scalar(sum(term), 0.5);
}

Tensor elbo_loss(const Vae& vae, const Tensor& x, double beta_kl, Rng& rng) {
    check(beta_kl >= 0.0, Err::ConfigInvalid, "elbo_loss: beta_kl must be >= 0");
    GaussianPosterior post = vae.encode(x);
    Tensor z = reparameterize(post, rng);
    Tensor recon = vae.decode(z);
    Tensor diff = sub(recon, x);
    Tensor loss = sum(mul(diff, diff));
    if (beta_kl > 0.0) loss = add(loss, mul_scalar(kl_normal(post), beta_kl));
    return loss;
}

Tensor volume_to_tensor(const Volume& v) {
    return Tensor::from_data({1, 1, v.extents[0], v.extents[1], v.extents[2]}, v.data);
}

Volume tensor_to_volume(const Tensor& t, std::array<double, 3> spacing) {
    check(t.rank() == 5 && t.shape()[0] == 1 && t.shape()[1] == 1, Err::ShapeMismatch,
          "tensor_to_volume: expected [1,1,D,H,W]");
    Volume v({t.shape()[2], t.shape()[3], t.shape()[4]}, spacing);
    v.data = t.data();
    return v;
}

void write_lat(const LatentRecord& rec, const std::string& path) {
    check(rec.mu.shape() == rec.log_var.shape(), Err::ShapeMismatch,
          "write_lat: mu and log_var shapes differ");
    nlohmann::json h{{"format", "lat"},
                     {"case_id", rec.case_id},
                     {"role", rec.role},
                     {"shape", rec.mu.shape()}};
    std::ofstream os(path, std::ios::binary);
    check(os.good(), Err::DataMissing, "cannot open for write: " + path);
    os << h.dump() << "\n";
    auto put = [&](const Tensor& t) {
        os.write(reinterpret_cast<const char*>(t.data().data()),
                 static_cast<std::streamsize>(t.numel() * sizeof(double)));
    };
    put(rec.mu);
    put(rec.log_var);
    check(os.good(), Err::Internal, "write failed: " + path);
}

LatentRecord read_lat(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    check(is.good(), Err::DataMissing, "cannot open: " + path);
    std::string line;
    std::getline(is, line);
    nlohmann::json h = nlohmann::json::parse(line, nullptr, false);
    check(!h.is_discarded() && h.value("format", "") == "lat", Err::BadMagic,
          "not a lat file: " + path);
    LatentRecord rec;
    rec.case_id = h.at("case_id").get<std::string>();
    rec.role = h.at("role").get<std::string>();
    Shape shape = h.at("shape").get<Shape>();
    auto get = [&](const char* what) {
        std::vector<double> data(shape_numel(shape));
        is.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(data.size() * sizeof(double)));
        check(static_cast<bool>(is), Err::BadMagic,
              std::string("truncated lat ") + what + " payload: " + path);
        return Tensor::from_data(shape, std::move(data));
    };
    rec.mu = get("mu");
    rec.log_var = get("log_var");
    return rec;
}

}  // namespace rflow
