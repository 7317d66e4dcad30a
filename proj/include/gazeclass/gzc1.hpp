#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "gazeclass/network.hpp"
#include "gazeclass/tensor.hpp"

namespace gazeclass {

// GZC1 weight container:
//   "GZC1" | version u32 | entry count u32 |
//   per entry: name length u32 | UTF-8 name | dtype u32 | rank u32 | dims u32[rank] | payload
// All integers and payloads little-endian.
inline constexpr std::uint32_t kGzcVersion = 1;

enum class DType : std::uint32_t { f32 = 1, f64 = 2 };

struct NamedTensor {
  std::string name;
  std::variant<Tensor<float>, Tensor<double>> value;

  DType dtype() const { return value.index() == 0 ? DType::f32 : DType::f64; }
  const Shape& shape() const;
};

using WeightSet = std::vector<NamedTensor>;

std::vector<std::uint8_t> encode_gzc1(const WeightSet& weights);
WeightSet decode_gzc1(const std::vector<std::uint8_t>& bytes);

void write_gzc1(const std::filesystem::path& path, const WeightSet& weights);
WeightSet read_gzc1(const std::filesystem::path& path);

const NamedTensor* find_tensor(const WeightSet& weights, const std::string& name);

// Parameter tensors named "<layer>.weight" / "<layer>.bias" in layer order.
template <typename T>
WeightSet export_params(const Network<T>& net);

// Copies matching tensors into net; every parameter must be present with the
// right shape. Precision is converted when the stored dtype differs.
template <typename T>
void import_params(Network<T>& net, const WeightSet& weights);

}  // namespace gazeclass
