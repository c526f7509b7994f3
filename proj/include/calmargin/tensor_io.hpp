#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <variant>
#include <vector>

#include "calmargin/tensor.hpp"

namespace calmargin {

// CALT file layout (all integers little-endian):
//   "CALT" | u8 version | u8 dtype | u8 rank | rank x u32 dims | payload
// dtype 0 = float64, 1 = int32.
inline constexpr std::uint8_t kCaltVersion = 1;

enum class DType : std::uint8_t { kFloat64 = 0, kInt32 = 1 };

struct Float64Tensor {
  std::vector<std::uint32_t> dims;
  std::vector<double> data;
};

struct Int32Tensor {
  std::vector<std::uint32_t> dims;
  std::vector<std::int32_t> data;
};

using Tensor = std::variant<Float64Tensor, Int32Tensor>;

std::vector<std::uint8_t> encode_tensor(const Tensor& tensor);
Tensor decode_tensor(std::span<const std::uint8_t> bytes);

void save_tensor(const Tensor& tensor, const std::filesystem::path& path);
Tensor load_tensor(const std::filesystem::path& path);

// Field <-> tensor. Logits are rank 3 (H, W, K); labels rank 2 (H, W).
Tensor to_tensor(const LogitField& field);
Tensor to_tensor(const LabelField& field);
LogitField to_logit_field(const Tensor& tensor);
// Label files do not carry K; the caller supplies it.
LabelField to_label_field(const Tensor& tensor, std::size_t num_classes,
                          std::size_t background_class = 0);

void save_tensor(const LogitField& field, const std::filesystem::path& path);
void save_tensor(const LabelField& field, const std::filesystem::path& path);

}  // namespace calmargin
