#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string_view>
#include <vector>

#include "sgm/tensor.hpp"

namespace sgm {

// Named-tensor archive:
//   "SGMN" | version u16 | count u32 |
//   per tensor: name_len u16, UTF-8 name, rank u8, extents u32 x rank,
//               payload float32 x numel
// All integers and floats are little-endian.
class Checkpoint {
 public:
  static constexpr std::uint16_t kVersion = 1;

  Checkpoint() = default;
  explicit Checkpoint(TensorList tensors) : tensors_(std::move(tensors)) {}

  void add(std::string name, const Tensor& t);
  const TensorList& tensors() const { return tensors_; }
  std::optional<Tensor> find(std::string_view name) const;
  // Throws DataError when absent or shaped differently than `shape`.
  Tensor get(std::string_view name, const Shape& shape) const;
  bool contains(std::string_view name) const { return find(name).has_value(); }

  std::vector<std::uint8_t> serialize() const;
  static Checkpoint deserialize(const std::vector<std::uint8_t>& bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

  // Copies values into `params` by name and shape.
  void assign_to(TensorList& params) const;

 private:
  TensorList tensors_;
};

// FNV-1a over the raw float bytes of every tensor, in order.
std::uint64_t checksum(const TensorList& tensors);

}  // namespace sgm
