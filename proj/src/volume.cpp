#include "rflow/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace rflow {

namespace {

static_assert(std::endian::native == std::endian::little);

void check_spacing(const std::array<double, 3>& sp) {
    for (double s : sp)
        check(s > 0.0 && std::isfinite(s), Err::InvalidSpacing,
              "spacing must be positive, got " + std::to_string(s));
}

}  // namespace

Volume::Volume(std::array<size_t, 3> ext, std::array<double, 3> sp, double fill)
    : extents(ext), spacing(sp), data(ext[0] * ext[1] * ext[2], fill) {
    check_spacing(sp);
}

Volume normalize_unit(const Volume& v) {
    Volume out = v;
    out.intensity_range = {-1.0, 1.0};
    if (v.data.empty()) return out;
    auto [lo_it, hi_it] = std::minmax_element(v.data.begin(), v.data.end());
    double lo = *lo_it, hi = *hi_it;
    if (hi == lo) {
        std::fill(out.data.begin(), out.data.end(), 0.0);
        return out;
    }
    double scale = 2.0 / (hi - lo);
    for (auto& x : out.data) x = (x - lo) * scale - 1.0;
    return out;
}

Volume resample(const Volume& v, std::array<double, 3> new_spacing, Resample mode) {
    check_spacing(new_spacing);
    std::array<size_t, 3> ne;
    for (int a = 0; a < 3; ++a) {
        ne[a] = static_cast<size_t>(std::llround(static_cast<double>(v.extents[a]) *
                                                 v.spacing[a] / new_spacing[a]));
        ne[a] = std::max<size_t>(ne[a], 1);
    }
    if (ne == v.extents && new_spacing == v.spacing) return v;

    Volume out(ne, new_spacing);
    out.intensity_range = v.intensity_range;
    auto clampi = [](long i, size_t n) {
        return static_cast<size_t>(std::clamp(i, 0L, static_cast<long>(n) - 1));
    };
    for (size_t d = 0; d < ne[0]; ++d)
        for (size_t h = 0; h < ne[1]; ++h)
            for (size_t w = 0; w < ne[2]; ++w) {
                // source coordinate in voxel units of v
                double sd = static_cast<double>(d) * new_spacing[0] / v.spacing[0];
                double sh = static_cast<double>(h) * new_spacing[1] / v.spacing[1];
                double sw = static_cast<double>(w) * new_spacing[2] / v.spacing[2];
                if (mode == Resample::Nearest) {
                    out.at(d, h, w) = v.at(clampi(std::llround(sd), v.extents[0]),
                                           clampi(std::llround(sh), v.extents[1]),
                                           clampi(std::llround(sw), v.extents[2]));
                } else {
                    long d0 = static_cast<long>(std::floor(sd));
                    long h0 = static_cast<long>(std::floor(sh));
                    long w0 = static_cast<long>(std::floor(sw));
                    double fd = sd - static_cast<double>(d0);
                    double fh = sh - static_cast<double>(h0);
                    double fw = sw - static_cast<double>(w0);
                    double acc = 0.0;
                    for (int dz = 0; dz < 2; ++dz)
                        for (int dy = 0; dy < 2; ++dy)
                            for (int dx = 0; dx < 2; ++dx) {
                                double wgt = (dz ? fd : 1.0 - fd) * (dy ? fh : 1.0 - fh) *
                                             (dx ? fw : 1.0 - fw);
                                if (wgt == 0.0) continue;
                                acc += wgt * v.at(clampi(d0 + dz, v.extents[0]),
                                                  clampi(h0 + dy, v.extents[1]),
                                                  clampi(w0 + dx, v.extents[2]));
                            }
                    out.at(d, h, w) = acc;
                }
            }
    return out;
}

BoundingBox tumor_bbox(const SegMask& m, int pad) {
    check(pad >= 0, Err::OutOfBounds, "negative padding");
    std::array<size_t, 3> lo = m.extents;
    std::array<size_t, 3> hi{0, 0, 0};
    bool any = false;
    for (size_t d = 0; d < m.extents[0]; ++d)
        for (size_t h = 0; h < m.extents[1]; ++h)
            for (size_t w = 0; w < m.extents[2]; ++w)
                if (m.at(d, h, w) != 0) {
                    any = true;
                    std::array<size_t, 3> idx{d, h, w};
                    for (int a = 0; a < 3; ++a) {
                        lo[a] = std::min(lo[a], idx[a]);
                        hi[a] = std::max(hi[a], idx[a]);
                    }
                }
    check(any, Err::NoForeground, "segmentation mask has no nonzero labels");

    BoundingBox b;
    size_t p = static_cast<size_t>(pad);
    for (int a = 0; a < 3; ++a) {
        b.min[a] = lo[a] > p ? lo[a] - p : 0;
        b.max[a] = std::min(hi[a] + p, m.extents[a] - 1);
    }
    return b;
}

Volume crop(const Volume& v, const BoundingBox& b) {
    for (int a = 0; a < 3; ++a)
        check(b.min[a] <= b.max[a] && b.max[a] < v.extents[a], Err::OutOfBounds,
              "bounding box exceeds volume extents");
    Volume out(b.extents(), v.spacing);
    out.intensity_range = v.intensity_range;
    for (size_t d = 0; d < out.extents[0]; ++d)
        for (size_t h = 0; h < out.extents[1]; ++h)
            for (size_t w = 0; w < out.extents[2]; ++w)
                out.at(d, h, w) = v.at(b.min[0] + d, b.min[1] + h, b.min[2] + w);
    return out;
}

// ---- .vvol -----------------------------------------------------------------

namespace {

nlohmann::json read_vvol_header(std::ifstream& is, const std::string& path,
                                const char* expected_kind) {
    check(is.good(), Err::DataMissing, "cannot open: " + path);
    std::string line;
    std::getline(is, line);
    nlohmann::json h = nlohmann::json::parse(line, nullptr, false);
    check(!h.is_discarded() && h.value("format", "") == "vvol", Err::BadMagic,
          "not a vvol file: " + path);
    check(h.value("kind", "") == expected_kind, Err::BadMagic,
          std::string("vvol kind mismatch (want ") + expected_kind + "): " + path);
    return h;
}

std::array<size_t, 3> header_extents(const nlohmann::json& h) {
    auto e = h.at("extents");
    return {e.at(0).get<size_t>(), e.at(1).get<size_t>(), e.at(2).get<size_t>()};
}

}  // namespace

void write_vvol(const Volume& v, const std::string& path) {
    nlohmann::json h{{"format", "vvol"},
                     {"kind", "image"},
                     {"extents", {v.extents[0], v.extents[1], v.extents[2]}},
                     {"spacing", {v.spacing[0], v.spacing[1], v.spacing[2]}},
                     {"intensity_range", {v.intensity_range[0], v.intensity_range[1]}}};
    std::ofstream os(path, std::ios::binary);
    check(os.good(), Err::DataMissing, "cannot open for write: " + path);
    os << h.dump() << "\n";
    os.write(reinterpret_cast<const char*>(v.data.data()),
             static_cast<std::streamsize>(v.data.size() * sizeof(double)));
    check(os.good(), Err::Internal, "write failed: " + path);
}

Volume read_vvol(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    nlohmann::json h = read_vvol_header(is, path, "image");
    Volume v;
    v.extents = header_extents(h);
    auto sp = h.at("spacing");
    v.spacing = {sp.at(0).get<double>(), sp.at(1).get<double>(), sp.at(2).get<double>()};
    check_spacing(v.spacing);
    auto ir = h.at("intensity_range");
    v.intensity_range = {ir.at(0).get<double>(), ir.at(1).get<double>()};
    v.data.resize(v.numel());
    is.read(reinterpret_cast<char*>(v.data.data()),
            static_cast<std::streamsize>(v.data.size() * sizeof(double)));
    check(static_cast<bool>(is), Err::BadMagic, "truncated vvol payload: " + path);
    return v;
}

void write_vvol_mask(const SegMask& m, const std::string& path) {
    nlohmann::json h{{"format", "vvol"},
                     {"kind", "mask"},
                     {"extents", {m.extents[0], m.extents[1], m.extents[2]}}};
    std::ofstream os(path, std::ios::binary);
    check(os.good(), Err::DataMissing, "cannot open for write: " + path);
    os << h.dump() << "\n";
    std::vector<double> payload(m.labels.begin(), m.labels.end());
    os.write(reinterpret_cast<const char*>(payload.data()),
             static_cast<std::streamsize>(payload.size() * sizeof(double)));
    check(os.good(), Err::Internal, "write failed: " + path);
}

SegMask read_vvol_mask(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    nlohmann::json h = read_vvol_header(is, path, "mask");
    SegMask m;
    m.extents = header_extents(h);
    std::vector<double> payload(m.extents[0] * m.extents[1] * m.extents[2]);
    is.read(reinterpret_cast<char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(double)));
    check(static_cast<bool>(is), Err::BadMagic, "truncated vvol payload: " + path);
    m.labels.resize(payload.size());
    for (size_t i = 0; i < payload.size(); ++i)
        m.labels[i] = static_cast<int32_t>(std::llround(payload[i]));
    return m;
}

}  // namespace rflow
