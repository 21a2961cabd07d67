#pragma once

#include <map>
#include <string>

#include "rflow/tensor.hpp"

namespace rflow {

// Flat named-tensor container: magic "RFLW", version u32, count u32, then
// per tensor {name_len u32, name, rank u32, extents u64[rank], f64 payload},
// all little-endian. Round-trips bit-exactly.
inline constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const std::map<std::string, Tensor>& tensors);
std::map<std::string, Tensor> load_checkpoint(const std::string& path);

void save_parameters(const std::string& path, const Parameters& params);

// Copies checkpoint values into an already-constructed parameter set;
// name or shape disagreement raises CheckpointMismatch.
void load_parameters(const std::string& path, Parameters& params);

}  // namespace rflow
