#include "rflow/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "rflow/nifti.hpp"

namespace rflow {

namespace {

constexpr uint64_t kStreamCase = 1;
constexpr uint64_t kStreamSplit = 2;
constexpr double kAir = -0.95;

// Sum of three low-frequency cosine modes, scaled into [-1, 1].
struct SmoothField {
    struct Mode {
        double amp, fd, fh, fw, phase;
    };
    std::array<Mode, 3> modes;
    double norm = 1.0;

    static SmoothField draw(Rng& rng) {
        SmoothField f;
        double total = 0.0;
        for (auto& m : f.modes) {
            m.amp = 0.4 + 0.6 * rng.uniform();
            m.fd = static_cast<double>(rng.uniform_int(1, 2));
            m.fh = static_cast<double>(rng.uniform_int(1, 2));
            m.fw = static_cast<double>(rng.uniform_int(1, 2));
            m.phase = 2.0 * std::numbers::pi * rng.uniform();
            total += m.amp;
        }
        f.norm = total;
        return f;
    }

    double at(double ud, double uh, double uw) const {
        double acc = 0.0;
        for (const auto& m : modes)
            acc += m.amp * std::cos(2.0 * std::numbers::pi *
                                        (m.fd * ud + m.fh * uh + m.fw * uw) +
                                    m.phase);
        return acc / norm;
    }
};

double shading_at(const std::array<size_t, 3>& extents, size_t d, size_t h, size_t w) {
    auto u = [](size_t i, size_t n) {
        return n > 1 ? static_cast<double>(i) / static_cast<double>(n - 1) : 0.0;
    };
    return 0.05 * std::cos(std::numbers::pi * u(d, extents[0])) *
           std::cos(std::numbers::pi * u(h, extents[1])) *
           std::cos(std::numbers::pi * u(w, extents[2]));
}

std::string case_name(uint64_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "case_%04llu", static_cast<unsigned long long>(index));
    return buf;
}

}  // namespace

void PhantomSpec::validate() const {
    for (size_t e : extents)
        check(e >= 8 && e % 4 == 0, Err::ConfigInvalid,
              "phantom extents must be >= 8 and divisible by 4");
    check(n_lesions_min >= 0 && n_lesions_max >= n_lesions_min, Err::ConfigInvalid,
          "lesion count range invalid");
    check(lesion_radius_min >= 1.0 && lesion_radius_max >= lesion_radius_min,
          Err::ConfigInvalid, "lesion radius range invalid");
    check(tissue_noise >= 0.0 && tissue_noise <= 0.05, Err::ConfigInvalid,
          "tissue_noise outside [0, 0.05]");
    check(enhancement_gain >= 0.0 && enhancement_gain <= 0.5, Err::ConfigInvalid,
          "enhancement_gain outside [0, 0.5]");
}

std::vector<uint8_t> lesion_rim(const SegMask& mask) {
    std::vector<uint8_t> rim(mask.numel(), 0);
    auto fg = [&](long d, long h, long w) {
        if (d < 0 || h < 0 || w < 0 || d >= static_cast<long>(mask.extents[0]) ||
            h >= static_cast<long>(mask.extents[1]) || w >= static_cast<long>(mask.extents[2]))
            return false;
        return mask.at(static_cast<size_t>(d), static_cast<size_t>(h),
                       static_cast<size_t>(w)) != 0;
    };
    for (size_t d = 0; d < mask.extents[0]; ++d)
        for (size_t h = 0; h < mask.extents[1]; ++h)
            for (size_t w = 0; w < mask.extents[2]; ++w) {
                if (mask.at(d, h, w) == 0) continue;
                long ld = static_cast<long>(d), lh = static_cast<long>(h),
                     lw = static_cast<long>(w);
                bool boundary = !fg(ld - 1, lh, lw) || !fg(ld + 1, lh, lw) ||
                                !fg(ld, lh - 1, lw) || !fg(ld, lh + 1, lw) ||
                                !fg(ld, lh, lw - 1) || !fg(ld, lh, lw + 1);
                if (boundary) rim[mask.index(d, h, w)] = 1;
            }
    return rim;
}

Volume enhancement_target(const Volume& t1w, const SegMask& mask, double gain) {
    check(t1w.extents == mask.extents, Err::ShapeMismatch,
          "enhancement_target: extents differ");
    std::vector<uint8_t> rim = lesion_rim(mask);
    Volume t1c = t1w;
    for (size_t d = 0; d < t1w.extents[0]; ++d)
        for (size_t h = 0; h < t1w.extents[1]; ++h)
            for (size_t w = 0; w < t1w.extents[2]; ++w) {
                size_t i = t1w.index(d, h, w);
                t1c.data[i] += gain * rim[i] + shading_at(t1w.extents, d, h, w);
            }
    return t1c;
}

SynthCase make_case(const PhantomSpec& spec, uint64_t case_index) {
    spec.validate();
    SynthCase out;
    out.id = case_name(case_index);
    out.t1w = Volume(spec.extents, {1.0, 1.0, 1.0}, kAir);
    out.flair = Volume(spec.extents, {1.0, 1.0, 1.0}, kAir);
    out.mask.extents = spec.extents;
    out.mask.labels.assign(out.mask.numel(), 0);

    Rng geo = derive_rng(spec.seed, {kStreamCase, case_index, 0});
    Rng tex = derive_rng(spec.seed, {kStreamCase, case_index, 1});
    Rng les = derive_rng(spec.seed, {kStreamCase, case_index, 2});

    const auto [D, H, W] = spec.extents;
    std::array<double, 3> center, semi;
    for (int a = 0; a < 3; ++a) {
        double n = static_cast<double>(spec.extents[static_cast<size_t>(a)]);
        center[static_cast<size_t>(a)] = n * (0.5 + 0.05 * (geo.uniform() - 0.5));
        semi[static_cast<size_t>(a)] = n * (0.36 + 0.05 * geo.uniform());
    }
    SmoothField f_t1w = SmoothField::draw(geo);
    SmoothField f_flair = SmoothField::draw(geo);

    // 1 deep inside, 0 in air, with a ~2-voxel partial-volume falloff at the
    // brain surface.
    auto brain_frac = [&](double d, double h, double w) {
        double qd = (d - center[0]) / semi[0];
        double qh = (h - center[1]) / semi[1];
        double qw = (w - center[2]) / semi[2];
        double q = std::sqrt(qd * qd + qh * qh + qw * qw);
        return std::clamp((1.14 - q) / 0.28, 0.0, 1.0);
    };

    // Lesions first so tissue values can react to membership.
    int n_lesions = static_cast<int>(
        les.uniform_int(spec.n_lesions_min, spec.n_lesions_max));
    for (int li = 0; li < n_lesions; ++li) {
        double r = spec.lesion_radius_min +
                   (spec.lesion_radius_max - spec.lesion_radius_min) * les.uniform();
        double margin = r + 2.0;
        std::array<double, 3> c{};
        bool placed = false;
        for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
            for (int a = 0; a < 3; ++a) {
                double n = static_cast<double>(spec.extents[static_cast<size_t>(a)]);
                c[static_cast<size_t>(a)] = margin + (n - 1.0 - 2.0 * margin) * les.uniform();
            }
            placed = brain_frac(c[0], c[1], c[2]) >= 1.0;
        }
        if (!placed) continue;
        for (size_t d = 0; d < D; ++d)
            for (size_t h = 0; h < H; ++h)
                for (size_t w = 0; w < W; ++w) {
                    double dd = static_cast<double>(d) - c[0];
                    double dh = static_cast<double>(h) - c[1];
                    double dw = static_cast<double>(w) - c[2];
                    if (dd * dd + dh * dh + dw * dw <= r * r)
                        out.mask.at(d, h, w) = li + 1;
                }
    }

    auto clamp3 = [](double n) { return std::clamp(n, -3.0, 3.0); };
    for (size_t d = 0; d < D; ++d)
        for (size_t h = 0; h < H; ++h)
            for (size_t w = 0; w < W; ++w) {
                // texture draws happen for every voxel so geometry never
                // shifts the stream
                double n1 = clamp3(tex.normal());
                double n2 = clamp3(tex.normal());
                double s = brain_frac(static_cast<double>(d), static_cast<double>(h),
                                      static_cast<double>(w));
                if (s == 0.0) continue;
                double ud = static_cast<double>(d) / static_cast<double>(D);
                double uh = static_cast<double>(h) / static_cast<double>(H);
                double uw = static_cast<double>(w) / static_cast<double>(W);
                bool lesion = out.mask.at(d, h, w) != 0;
                double t1 = 0.10 + 0.25 * f_t1w.at(ud, uh, uw) + spec.tissue_noise * n1;
                if (lesion) t1 -= 0.03;
                double fl = -0.15 + 0.20 * f_flair.at(ud, uh, uw) + spec.tissue_noise * n2;
                if (lesion) fl += 0.50;
                out.t1w.at(d, h, w) = kAir + s * (t1 - kAir);
                out.flair.at(d, h, w) = kAir + s * (fl - kAir);
            }

    out.t1c = enhancement_target(out.t1w, out.mask, spec.enhancement_gain);
    return out;
}

Split make_split(const PhantomSpec& spec, size_t n_train, size_t n_val, size_t n_test) {
    check(n_train >= 1 && n_val >= 1 && n_test >= 1, Err::ConfigInvalid,
          "split sizes must be >= 1");
    size_t total = n_train + n_val + n_test;
    std::vector<uint64_t> ids(total);
    for (size_t i = 0; i < total; ++i) ids[i] = i;
    Rng rng = derive_rng(spec.seed, {kStreamSplit});
    for (size_t i = total - 1; i > 0; --i) {
        size_t j = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i)));
        std::swap(ids[i], ids[j]);
    }
    Split s;
    s.train.assign(ids.begin(), ids.begin() + static_cast<long>(n_train));
    s.val.assign(ids.begin() + static_cast<long>(n_train),
                 ids.begin() + static_cast<long>(n_train + n_val));
    s.test.assign(ids.begin() + static_cast<long>(n_train + n_val), ids.end());
    return s;
}

std::vector<const ManifestCase*> Manifest::in_split(const std::string& split) const {
    std::vector<const ManifestCase*> out;
    for (const auto& c : cases)
        if (c.split == split) out.push_back(&c);
    return out;
}

namespace {

nlohmann::json spec_json(const PhantomSpec& s) {
    return {{"extents", {s.extents[0], s.extents[1], s.extents[2]}},
            {"seed", s.seed},
            {"n_lesions", {s.n_lesions_min, s.n_lesions_max}},
            {"lesion_radius", {s.lesion_radius_min, s.lesion_radius_max}},
            {"tissue_noise", s.tissue_noise},
            {"enhancement_gain", s.enhancement_gain}};
}

PhantomSpec spec_from_json(const nlohmann::json& j) {
    PhantomSpec s;
    auto e = j.at("extents");
    s.extents = {e.at(0).get<size_t>(), e.at(1).get<size_t>(), e.at(2).get<size_t>()};
    s.seed = j.at("seed").get<uint64_t>();
    s.n_lesions_min = j.at("n_lesions").at(0).get<int>();
    s.n_lesions_max = j.at("n_lesions").at(1).get<int>();
    s.lesion_radius_min = j.at("lesion_radius").at(0).get<double>();
    s.lesion_radius_max = j.at("lesion_radius").at(1).get<double>();
    s.tissue_noise = j.at("tissue_noise").get<double>();
    s.enhancement_gain = j.at("enhancement_gain").get<double>();
    return s;
}

}  // namespace

Manifest generate_dataset(const PhantomSpec& spec, size_t n_train, size_t n_val, size_t n_test,
                          const std::string& out_dir, bool also_nifti) {
    spec.validate();
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(out_dir) / "cases");

    Split split = make_split(spec, n_train, n_val, n_test);
    Manifest m;
    m.spec = spec;
    auto emit = [&](uint64_t index, const std::string& split_name) {
        SynthCase c = make_case(spec, index);
        ManifestCase mc;
        mc.id = c.id;
        mc.split = split_name;
        std::string base = "cases/" + c.id;
        mc.t1w = base + "_t1w.vvol";
        mc.flair = base + "_flair.vvol";
        mc.t1c = base + "_t1c.vvol";
        mc.mask = base + "_mask.vvol";
        write_vvol(c.t1w, out_dir + "/" + mc.t1w);
        write_vvol(c.flair, out_dir + "/" + mc.flair);
        write_vvol(c.t1c, out_dir + "/" + mc.t1c);
        write_vvol_mask(c.mask, out_dir + "/" + mc.mask);
        if (also_nifti) {
            write_nifti(c.t1w, out_dir + "/" + base + "_t1w.nii");
            write_nifti(c.flair, out_dir + "/" + base + "_flair.nii");
            write_nifti(c.t1c, out_dir + "/" + base + "_t1c.nii");
        }
        m.cases.push_back(std::move(mc));
    };
    for (uint64_t id : split.train) emit(id, "train");
    for (uint64_t id : split.val) emit(id, "val");
    for (uint64_t id : split.test) emit(id, "test");
    std::sort(m.cases.begin(), m.cases.end(),
              [](const ManifestCase& a, const ManifestCase& b) { return a.id < b.id; });
    write_manifest(m, out_dir + "/manifest.json");
    return m;
}

void write_manifest(const Manifest& m, const std::string& path) {
    nlohmann::json j;
    j["spec"] = spec_json(m.spec);
    j["cases"] = nlohmann::json::array();
    for (const auto& c : m.cases)
        j["cases"].push_back({{"id", c.id},
                              {"split", c.split},
                              {"t1w", c.t1w},
                              {"flair", c.flair},
                              {"t1c", c.t1c},
                              {"mask", c.mask}});
    std::ofstream os(path);
    check(os.good(), Err::DataMissing, "cannot open for write: " + path);
    os << j.dump(2) << "\n";
    check(os.good(), Err::Internal, "write failed: " + path);
}

Manifest read_manifest(const std::string& path) {
    std::ifstream is(path);
    check(is.good(), Err::DataMissing, "manifest not found: " + path);
    nlohmann::json j = nlohmann::json::parse(is, nullptr, false);
    check(!j.is_discarded(), Err::ConfigInvalid, "manifest is not valid JSON: " + path);
    Manifest m;
    try {
        m.spec = spec_from_json(j.at("spec"));
        for (const auto& c : j.at("cases"))
            m.cases.push_back({c.at("id").get<std::string>(), c.at("split").get<std::string>(),
                               c.at("t1w").get<std::string>(),
                               c.at("flair").get<std::string>(),
                               c.at("t1c").get<std::string>(),
                               c.at("mask").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
        fail(Err::ConfigInvalid, std::string("manifest field error: ") + e.what());
    }
    return m;
}

}  // namespace rflow
