#pragma once

// Binary checkpoint: a metadata string followed by named float64 arrays.
// Layout (all integers little-endian):
//
//   magic        8 bytes   "A41CKPT\0"
//   version      u32       1
//   meta_len     u64       followed by meta_len bytes of UTF-8 (JSON config)
//   array_count  u32
//   per array:   name_len u32, name bytes, rank u32, rank × u64 extents,
//                numel × f64 values in row-major order
//
// See docs/checkpoint.md.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "all4one/nn.hpp"

namespace all4one {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  std::string metadata;
  std::vector<NamedArray> arrays;

  const NamedArray& find(const std::string& name) const;
  bool contains(const std::string& name) const;
  void add(const std::string& name, const Tensor& t);
  void add(const ParameterList& params);
  // Copies stored values into `params` (names and shapes must match).
  void restore(const ParameterList& params) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// FNV-1a over names, extents and value bytes of every array.
std::uint64_t checkpoint_hash(const Checkpoint& ckpt);

}  // namespace all4one
