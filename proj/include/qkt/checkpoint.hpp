#pragma once

// Portable model checkpoint.
//
// Layout, all integers little-endian:
//
//   offset  size  field
//   0       4     magic "QKTM"
//   4       4     u32 format version (currently 1)
//   8       4     u32 layer count N
//   12      4     u32 split_index
//   16      8*N   per layer: u32 out_dim, u32 in_dim
//   ...           per layer: out_dim*in_dim f64 weights (row-major), then out_dim f64 bias
//
// Doubles are written as their IEEE-754 bit patterns, so a round trip is
// bit-exact. Trailing bytes are rejected.

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "qkt/nn.hpp"

namespace qkt {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::uint8_t> save_checkpoint(const ModelParams& model);
ModelParams load_checkpoint(std::span<const std::uint8_t> bytes);

void write_checkpoint_file(const std::filesystem::path& path, const ModelParams& model);
ModelParams read_checkpoint_file(const std::filesystem::path& path);

/// 64-bit FNV-1a as 16 hex digits.
std::string fnv1a_hex(std::span<const std::uint8_t> bytes);

/// 64-bit FNV-1a of the checkpoint bytes, as 16 hex digits.
std::string checkpoint_digest(const ModelParams& model);

}  // namespace qkt
