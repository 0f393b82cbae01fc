#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "cosod/tensor.hpp"

namespace cosod {

struct NamedTensor {
  std::string name;
  Tensor<float> tensor;
};

// Container layout (all integers little-endian):
//   "COSF1\n"
//   u64 tensor count
//   per tensor: u16 name length, UTF-8 name, u8 rank, u32 dims[rank],
//               IEEE-754 binary32 data
std::string encode_checkpoint(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

}  // namespace cosod
