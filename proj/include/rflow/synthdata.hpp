#pragma once

#include <string>
#include <vector>

#include "rflow/rng.hpp"
#include "rflow/volume.hpp"

namespace rflow {

struct PhantomSpec {
    std::array<size_t, 3> extents{16, 16, 16};
    uint64_t seed = 7;
    int n_lesions_min = 1;
    int n_lesions_max = 2;
    double lesion_radius_min = 2.0;
    double lesion_radius_max = 3.0;
    double tissue_noise = 0.005;
    double enhancement_gain = 0.4;

    void validate() const;
};

struct SynthCase {
    std::string id;
    Volume t1w;
    Volume flair;
    Volume t1c;
    SegMask mask;
};

// Voxels inside the mask that touch background through a face (the
// contrast-enhancing shell).
std::vector<uint8_t> lesion_rim(const SegMask& mask);

// The exact rule the generator applies: t1w + gain * rim + shading field.
Volume enhancement_target(const Volume& t1w, const SegMask& mask, double gain);

SynthCase make_case(const PhantomSpec& spec, uint64_t case_index);

struct Split {
    std::vector<uint64_t> train, val, test;
};

Split make_split(const PhantomSpec& spec, size_t n_train, size_t n_val, size_t n_test);

struct ManifestCase {
    std::string id;
    std::string split;  // train | val | test
    std::string t1w, flair, t1c, mask;
};

struct Manifest {
    PhantomSpec spec;
    std::vector<ManifestCase> cases;

    std::vector<const ManifestCase*> in_split(const std::string& split) const;
};

// Generates all volumes under out_dir (.vvol; .nii copies optional) and
// writes out_dir/manifest.json.
Manifest generate_dataset(const PhantomSpec& spec, size_t n_train, size_t n_val, size_t n_test,
                          const std::string& out_dir, bool also_nifti = false);

void write_manifest(const Manifest& m, const std::string& path);
Manifest read_manifest(const std::string& path);

}  // namespace rflow
