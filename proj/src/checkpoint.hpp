#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace bkn {

struct NamedTensor {
  std::string name;
  Tensor value;
};

/// Versioned binary listing of named tensors.
///
///   "BKNCKPT\n"  8-byte magic
///   u32          format version (kCheckpointVersion)
///   u32          entry count
///   per entry:   u32 name length, name bytes, u32 rank, u64 extents[rank],
///                f64 values[product(extents)]
///
/// All integers and doubles are little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path,
                     const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

}  // namespace bkn
