#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "rflow/rng.hpp"
#include "rflow/volume.hpp"

using namespace rflow;

namespace {

std::string temp_path(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "rflow_volume_tests";
    std::filesystem::create_directories(dir);
    return (dir / name).string();
}

Volume random_volume(std::array<size_t, 3> ext, uint64_t seed) {
    Volume v(ext, {1.0, 1.0, 1.0});
    Rng rng(seed);
    for (double& x : v.data) x = rng.normal();
    return v;
}

Err code_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    return Err::Internal;
}

}  // namespace

TEST_CASE("normalize_unit endpoints and degenerate input") {
    Volume v({1, 1, 11}, {1, 1, 1});
    for (size_t i = 0; i < 11; ++i) v.data[i] = static_cast<double>(i);
    Volume n = normalize_unit(v);
    CHECK(n.data.front() == -1.0);
    CHECK(n.data.back() == 1.0);
    CHECK(n.data[5] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(n.intensity_range[0] == -1.0);
    CHECK(n.intensity_range[1] == 1.0);

    Volume c({2, 2, 2}, {1, 1, 1}, 5.0);
    Volume nc = normalize_unit(c);
    for (double x : nc.data) CHECK(x == 0.0);

    Volume two({1, 1, 2}, {1, 1, 1});
    two.data = {-3.0, 1.0};
    Volume nt = normalize_unit(two);
    CHECK(nt.data[0] == -1.0);
    CHECK(nt.data[1] == 1.0);
}

TEST_CASE("normalize_unit is idempotent for non-constant volumes") {
    Volume v = random_volume({4, 5, 6}, 31);
    Volume n1 = normalize_unit(v);
    Volume n2 = normalize_unit(n1);
    for (size_t i = 0; i < n1.data.size(); ++i)
        CHECK(std::abs(n2.data[i] - n1.data[i]) < 1e-12);
}

TEST_CASE("resample identity spacing is a no-op") {
    Volume v = random_volume({3, 4, 5}, 7);
    Volume r = resample(v, v.spacing, Resample::Trilinear);
    CHECK(r.extents == v.extents);
    CHECK(r.data == v.data);
}

TEST_CASE("resample constant volume stays constant") {
    Volume v({4, 4, 4}, {2.0, 2.0, 2.0}, 0.75);
    for (Resample mode : {Resample::Nearest, Resample::Trilinear}) {
        Volume r = resample(v, {1.0, 1.0, 1.0}, mode);
        CHECK(r.extents == std::array<size_t, 3>{8, 8, 8});
        for (double x : r.data) CHECK(x == doctest::Approx(0.75).epsilon(1e-15));
    }
}

TEST_CASE("resample ramp matches linear interpolation oracle") {
    Volume v({1, 1, 3}, {1.0, 1.0, 1.0});
    v.data = {0.0, 1.0, 2.0};
    Volume r = resample(v, {1.0, 1.0, 0.5}, Resample::Trilinear);
    REQUIRE(r.extents == std::array<size_t, 3>{1, 1, 6});
    // source coordinate for output w is 0.5*w; edge samples clamp
    std::vector<double> expected = {0.0, 0.5, 1.0, 1.5, 2.0, 2.0};
    for (size_t i = 0; i < 6; ++i) CHECK(r.data[i] == doctest::Approx(expected[i]).epsilon(1e-12));
}

TEST_CASE("resample random volume matches independent trilinear oracle") {
    Volume v = random_volume({5, 6, 7}, 13);
    v.spacing = {1.5, 0.8, 1.1};
    std::array<double, 3> ns{1.0, 1.0, 1.0};
    Volume r = resample(v, ns, Resample::Trilinear);
    for (int a = 0; a < 3; ++a)
        CHECK(r.extents[a] ==
              static_cast<size_t>(std::llround(v.extents[a] * v.spacing[a] / ns[a])));

    auto clampi = [](long i, size_t n) {
        if (i < 0) return size_t{0};
        if (i >= static_cast<long>(n)) return n - 1;
        return static_cast<size_t>(i);
    };
    for (size_t d = 0; d < r.extents[0]; ++d)
        for (size_t h = 0; h < r.extents[1]; ++h)
            for (size_t w = 0; w < r.extents[2]; ++w) {
                double sd = d * ns[0] / v.spacing[0];
                double sh = h * ns[1] / v.spacing[1];
                double sw = w * ns[2] / v.spacing[2];
                long d0 = static_cast<long>(std::floor(sd));
                long h0 = static_cast<long>(std::floor(sh));
                long w0 = static_cast<long>(std::floor(sw));
                double fd = sd - d0, fh = sh - h0, fw = sw - w0;
                double acc = 0.0;
                for (int dz = 0; dz < 2; ++dz)
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx)
                            acc += (dz ? fd : 1 - fd) * (dy ? fh : 1 - fh) * (dx ? fw : 1 - fw) *
                                   v.at(clampi(d0 + dz, v.extents[0]),
                                        clampi(h0 + dy, v.extents[1]),
                                        clampi(w0 + dx, v.extents[2]));
                CHECK(std::abs(r.at(d, h, w) - acc) < 1e-12);
            }
}

TEST_CASE("resample rejects non-positive spacing") {
    Volume v({2, 2, 2}, {1, 1, 1});
    CHECK(code_of([&] { resample(v, {1.0, 0.0, 1.0}, Resample::Nearest); }) ==
          Err::InvalidSpacing);
}

TEST_CASE("tumor_bbox construction, clipping, and errors") {
    SegMask m;
    m.extents = {64, 64, 64};
    m.labels.assign(m.numel(), 0);
    m.at(10, 10, 10) = 1;
    BoundingBox b = tumor_bbox(m, 5);
    CHECK(b.min == std::array<size_t, 3>{5, 5, 5});
    CHECK(b.max == std::array<size_t, 3>{15, 15, 15});
    CHECK(b.extents() == std::array<size_t, 3>{11, 11, 11});

    SegMask corner;
    corner.extents = {8, 8, 8};
    corner.labels.assign(corner.numel(), 0);
    corner.at(0, 0, 0) = 2;
    BoundingBox bc = tumor_bbox(corner, 5);
    CHECK(bc.min == std::array<size_t, 3>{0, 0, 0});
    CHECK(bc.max == std::array<size_t, 3>{5, 5, 5});

    SegMask empty;
    empty.extents = {4, 4, 4};
    empty.labels.assign(empty.numel(), 0);
    CHECK(code_of([&] { tumor_bbox(empty, 5); }) == Err::NoForeground);
}

TEST_CASE("tumor_bbox contains every foreground voxel") {
    SegMask m;
    m.extents = {12, 9, 10};
    m.labels.assign(m.numel(), 0);
    Rng rng(77);
    std::vector<std::array<size_t, 3>> fg;
    for (int i = 0; i < 15; ++i) {
        std::array<size_t, 3> p{static_cast<size_t>(rng.uniform_int(0, 11)),
                                static_cast<size_t>(rng.uniform_int(0, 8)),
                                static_cast<size_t>(rng.uniform_int(0, 9))};
        m.at(p[0], p[1], p[2]) = 1;
        fg.push_back(p);
    }
    BoundingBox b = tumor_bbox(m, 2);
    for (const auto& p : fg)
        for (int a = 0; a < 3; ++a) {
            CHECK(p[a] >= b.min[a]);
            CHECK(p[a] <= b.max[a]);
        }
}

TEST_CASE("crop inclusive bounds") {
    Volume v = random_volume({20, 20, 20}, 3);
    BoundingBox full{{0, 0, 0}, {19, 19, 19}};
    Volume c = crop(v, full);
    CHECK(c.data == v.data);

    BoundingBox box{{5, 5, 5}, {15, 15, 15}};
    Volume cb = crop(v, box);
    CHECK(cb.extents == std::array<size_t, 3>{11, 11, 11});
    CHECK(cb.at(0, 0, 0) == v.at(5, 5, 5));
    CHECK(cb.at(10, 10, 10) == v.at(15, 15, 15));

    BoundingBox one{{7, 8, 9}, {7, 8, 9}};
    Volume c1 = crop(v, one);
    CHECK(c1.extents == std::array<size_t, 3>{1, 1, 1});
    CHECK(c1.data[0] == v.at(7, 8, 9));

    BoundingBox oob{{0, 0, 0}, {20, 19, 19}};
    CHECK(code_of([&] { crop(v, oob); }) == Err::OutOfBounds);
}

TEST_CASE("vvol round-trip for volumes and masks") {
    Volume v = random_volume({4, 3, 5}, 99);
    v.spacing = {0.5, 2.0, 1.25};
    v.intensity_range = {-0.25, 0.75};
    std::string path = temp_path("vol.vvol");
    write_vvol(v, path);
    Volume r = read_vvol(path);
    CHECK(r.extents == v.extents);
    CHECK(r.spacing == v.spacing);
    CHECK(r.intensity_range == v.intensity_range);
    CHECK(r.data == v.data);

    SegMask m;
    m.extents = {3, 3, 3};
    m.labels.assign(m.numel(), 0);
    m.at(1, 2, 0) = 4;
    std::string mpath = temp_path("mask.vvol");
    write_vvol_mask(m, mpath);
    SegMask rm = read_vvol_mask(mpath);
    CHECK(rm.extents == m.extents);
    CHECK(rm.labels == m.labels);

    CHECK(code_of([&] { read_vvol(mpath); }) == Err::BadMagic);
    CHECK(code_of([] { read_vvol(temp_path("missing.vvol")); }) == Err::DataMissing);
}
