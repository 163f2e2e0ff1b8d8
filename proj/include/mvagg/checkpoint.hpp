#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "mvagg/tensor.hpp"

namespace mvagg {

// Binary checkpoint: "MVCK" magic, u32 version, then (name, shape, float32
// data) entries sorted by name. Byte layout documented in
// docs/checkpoint_format.md. All integers and floats are little-endian.
void save_checkpoint(const std::filesystem::path& path,
                     const std::map<std::string, Tensor>& tensors);
std::map<std::string, Tensor> load_checkpoint(const std::filesystem::path& path);

}  // namespace mvagg
