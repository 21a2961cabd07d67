#pragma once

#include <string>

#include "rflow/volume.hpp"

namespace rflow {

enum class NiftiDtype { F32, F64 };

// Single-file little-endian NIfTI-1 (.nii), magic "n+1\0". Values are scaled
// by scl_slope/scl_inter on read when scl_slope != 0. Orientation fields are
// ignored. Axis order: dim[1..3] = (W,H,D) so the payload matches Volume's
// W-fastest layout byte for byte.
Volume read_nifti(const std::string& path);
void write_nifti(const Volume& v, const std::string& path, NiftiDtype dtype = NiftiDtype::F64);

}  // namespace rflow
