#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "rflow/synthdata.hpp"

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

size_t nonzero_count(const SegMask& m) {
    size_t n = 0;
    for (int32_t v : m.labels)
        if (v != 0) ++n;
    return n;
}

}  // namespace

TEST_CASE("make_case is bit-reproducible and well-ranged") {
    PhantomSpec spec;
    SynthCase a = make_case(spec, 5);
    SynthCase b = make_case(spec, 5);
    CHECK(a.id == "case_0005");
    CHECK(a.t1w.data == b.t1w.data);
    CHECK(a.flair.data == b.flair.data);
    CHECK(a.t1c.data == b.t1c.data);
    CHECK(a.mask.labels == b.mask.labels);

    SynthCase c = make_case(spec, 6);
    CHECK(a.t1w.data != c.t1w.data);

    for (uint64_t i = 0; i < 10; ++i) {
        SynthCase s = make_case(spec, i);
        for (const Volume* v : {&s.t1w, &s.flair, &s.t1c})
            for (double x : v->data) {
                REQUIRE(std::isfinite(x));
                REQUIRE(x >= -1.0);
                REQUIRE(x <= 1.0);
            }
        CHECK(nonzero_count(s.mask) > 0);
    }
}

TEST_CASE("lesion_rim marks exactly the face-exposed shell") {
    SegMask m;
    m.extents = {7, 7, 7};
    m.labels.assign(m.numel(), 0);
    for (size_t d = 2; d <= 4; ++d)
        for (size_t h = 2; h <= 4; ++h)
            for (size_t w = 2; w <= 4; ++w) m.at(d, h, w) = 1;

    std::vector<uint8_t> rim = lesion_rim(m);
    size_t rim_count = 0;
    for (uint8_t r : rim) rim_count += r;
    CHECK(rim_count == 26);  // 3x3x3 block minus its center
    CHECK(rim[m.index(3, 3, 3)] == 0);
    CHECK(rim[m.index(2, 3, 3)] == 1);
    CHECK(rim[m.index(4, 4, 4)] == 1);
    for (size_t i = 0; i < rim.size(); ++i)
        if (rim[i]) CHECK(m.labels[i] != 0);

    SegMask lone;
    lone.extents = {3, 3, 3};
    lone.labels.assign(lone.numel(), 0);
    lone.at(1, 1, 1) = 2;
    std::vector<uint8_t> lr = lesion_rim(lone);
    CHECK(lr[lone.index(1, 1, 1)] == 1);
    size_t lone_count = 0;
    for (uint8_t r : lr) lone_count += r;
    CHECK(lone_count == 1);
}

TEST_CASE("t1c equals the enhancement rule applied to t1w") {
    PhantomSpec spec;
    SynthCase s = make_case(spec, 3);
    Volume expected = enhancement_target(s.t1w, s.mask, spec.enhancement_gain);
    CHECK(s.t1c.data == expected.data);

    // Removing the rim boost leaves a shading field shared by every case.
    std::vector<uint8_t> rim = lesion_rim(s.mask);
    std::vector<double> shade(s.t1c.data.size());
    for (size_t i = 0; i < shade.size(); ++i) {
        shade[i] = s.t1c.data[i] - s.t1w.data[i] - spec.enhancement_gain * rim[i];
        CHECK(std::abs(shade[i]) <= 0.05 + 1e-12);
    }

    SynthCase other = make_case(spec, 9);
    std::vector<uint8_t> rim2 = lesion_rim(other.mask);
    for (size_t i = 0; i < shade.size(); ++i) {
        double shade2 = other.t1c.data[i] - other.t1w.data[i] -
                        spec.enhancement_gain * rim2[i];
        CHECK(shade2 == doctest::Approx(shade[i]).epsilon(1e-12));
    }

    SegMask wrong;
    wrong.extents = {4, 4, 4};
    wrong.labels.assign(wrong.numel(), 0);
    CHECK(code_of([&] { enhancement_target(s.t1w, wrong, 0.4); }) == Err::ShapeMismatch);
}

TEST_CASE("make_split partitions the index range deterministically") {
    PhantomSpec spec;
    Split s = make_split(spec, 20, 5, 5);
    CHECK(s.train.size() == 20);
    CHECK(s.val.size() == 5);
    CHECK(s.test.size() == 5);

    std::set<uint64_t> seen;
    for (const auto* part : {&s.train, &s.val, &s.test})
        for (uint64_t id : *part) CHECK(seen.insert(id).second);
    CHECK(seen.size() == 30);
    CHECK(*seen.begin() == 0);
    CHECK(*seen.rbegin() == 29);

    Split again = make_split(spec, 20, 5, 5);
    CHECK(again.train == s.train);
    CHECK(again.val == s.val);
    CHECK(again.test == s.test);

    PhantomSpec reseeded = spec;
    reseeded.seed = spec.seed + 1;
    Split other = make_split(reseeded, 20, 5, 5);
    CHECK(other.train != s.train);

    CHECK(code_of([&] { make_split(spec, 0, 5, 5); }) == Err::ConfigInvalid);
    CHECK(code_of([&] { make_split(spec, 5, 5, 0); }) == Err::ConfigInvalid);
}

TEST_CASE("phantom spec validation") {
    PhantomSpec s;
    s.extents = {4, 16, 16};
    CHECK(code_of([&] { s.validate(); }) == Err::ConfigInvalid);
    s.extents = {16, 18, 16};
    CHECK(code_of([&] { s.validate(); }) == Err::ConfigInvalid);
    s = PhantomSpec{};
    s.n_lesions_max = 0;
    s.n_lesions_min = 1;
    CHECK(code_of([&] { s.validate(); }) == Err::ConfigInvalid);
    s = PhantomSpec{};
    s.lesion_radius_min = 0.5;
    CHECK(code_of([&] { s.validate(); }) == Err::ConfigInvalid);
    s = PhantomSpec{};
    s.tissue_noise = 0.2;
    CHECK(code_of([&] { s.validate(); }) == Err::ConfigInvalid);
    s = PhantomSpec{};
    s.enhancement_gain = 0.6;
    CHECK(code_of([&] { s.validate(); }) == Err::ConfigInvalid);
    PhantomSpec{}.validate();
}

TEST_CASE("generate_dataset writes a loadable, relative-path manifest") {
    namespace fs = std::filesystem;
    std::string dir = "/tmp/rflow_synth_test";
    fs::remove_all(dir);

    PhantomSpec spec;
    Manifest m = generate_dataset(spec, 4, 2, 2, dir);
    CHECK(m.cases.size() == 8);
    CHECK(m.in_split("train").size() == 4);
    CHECK(m.in_split("val").size() == 2);
    CHECK(m.in_split("test").size() == 2);
    CHECK(fs::exists(dir + "/manifest.json"));

    for (const auto& c : m.cases) {
        for (const std::string* p : {&c.t1w, &c.flair, &c.t1c, &c.mask}) {
            CHECK(!p->empty());
            CHECK(p->front() != '/');
            CHECK(fs::exists(dir + "/" + *p));
        }
    }

    // Case ids map straight back onto the generator stream.
    const ManifestCase& first = m.cases.front();
    uint64_t index = std::stoull(first.id.substr(5));
    SynthCase regen = make_case(spec, index);
    Volume t1c = read_vvol(dir + "/" + first.t1c);
    CHECK(t1c.data == regen.t1c.data);
    SegMask mask = read_vvol_mask(dir + "/" + first.mask);
    CHECK(mask.labels == regen.mask.labels);

    Manifest back = read_manifest(dir + "/manifest.json");
    CHECK(back.cases.size() == m.cases.size());
    CHECK(back.spec.seed == spec.seed);
    CHECK(back.spec.extents == spec.extents);
    CHECK(back.spec.enhancement_gain == spec.enhancement_gain);
    for (size_t i = 0; i < m.cases.size(); ++i) {
        CHECK(back.cases[i].id == m.cases[i].id);
        CHECK(back.cases[i].split == m.cases[i].split);
        CHECK(back.cases[i].t1c == m.cases[i].t1c);
    }

    CHECK(code_of([&] { read_manifest(dir + "/absent.json"); }) == Err::DataMissing);
    fs::remove_all(dir);
}
