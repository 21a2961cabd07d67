#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "rflow/error.hpp"

namespace rflow {

// 3D scalar grid, row-major with W fastest. Extents are (D,H,W) voxels.
struct Volume {
    std::array<size_t, 3> extents{0, 0, 0};
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::vector<double> data;
    std::array<double, 2> intensity_range{-1.0, 1.0};

    Volume() = default;
    Volume(std::array<size_t, 3> ext, std::array<double, 3> sp, double fill = 0.0);

    size_t numel() const { return extents[0] * extents[1] * extents[2]; }
    size_t index(size_t d, size_t h, size_t w) const {
        return (d * extents[1] + h) * extents[2] + w;
    }
    double& at(size_t d, size_t h, size_t w) { return data[index(d, h, w)]; }
    double at(size_t d, size_t h, size_t w) const { return data[index(d, h, w)]; }
};

struct SegMask {
    std::array<size_t, 3> extents{0, 0, 0};
    std::vector<int32_t> labels;  // 0 = background

    size_t numel() const { return extents[0] * extents[1] * extents[2]; }
    size_t index(size_t d, size_t h, size_t w) const {
        return (d * extents[1] + h) * extents[2] + w;
    }
    int32_t at(size_t d, size_t h, size_t w) const { return labels[index(d, h, w)]; }
    int32_t& at(size_t d, size_t h, size_t w) { return labels[index(d, h, w)]; }
};

// Inclusive voxel-index box.
struct BoundingBox {
    std::array<size_t, 3> min{0, 0, 0};
    std::array<size_t, 3> max{0, 0, 0};

    std::array<size_t, 3> extents() const {
        return {max[0] - min[0] + 1, max[1] - min[1] + 1, max[2] - min[2] + 1};
    }
};

enum class Resample { Nearest, Trilinear };

// Affine map of [min, max] onto [-1, 1]; constant volumes map to all zeros.
Volume normalize_unit(const Volume& v);

Volume resample(const Volume& v, std::array<double, 3> new_spacing, Resample mode);

// Tight box over nonzero labels, padded per side, clipped per axis.
BoundingBox tumor_bbox(const SegMask& m, int pad);

Volume crop(const Volume& v, const BoundingBox& b);

// Internal volume container: one JSON header line, then raw little-endian
// f64 payload.
void write_vvol(const Volume& v, const std::string& path);
Volume read_vvol(const std::string& path);

void write_vvol_mask(const SegMask& m, const std::string& path);
SegMask read_vvol_mask(const std::string& path);

}  // namespace rflow
