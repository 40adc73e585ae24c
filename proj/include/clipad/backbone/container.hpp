#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <utility>
#include <variant>
#include <vector>

#include "clipad/numerics/tensor.hpp"

namespace clipad::backbone {

using numerics::Shape;
using numerics::Tensor;
using numerics::TensorD;

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

/// Ordered set of uniquely named tensors, serialized as an "NTC1" file:
///
///   "NTC1"
///   u32 count
///   count x { u32 name_len, name bytes (UTF-8), u32 rank, u64 extents[rank], u8 dtype }
///   payloads, contiguous, in header order
///
/// All integers and floats are little-endian. dtype 0 = f32, 1 = f64.
class TensorContainer {
 public:
  using Entry = std::variant<Tensor, TensorD>;

  /// Inserts or replaces `name`. Replacing keeps the original position.
  void put(const std::string& name, Tensor tensor);
  void put(const std::string& name, TensorD tensor);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t size() const { return entries_.size(); }
  std::vector<std::string> names() const;

  DType dtype(const std::string& name) const;
  Shape shape(const std::string& name) const;

  /// f32 tensor by name. Throws MissingTensorError, or FormatError when the
  /// stored dtype is f64.
  const Tensor& f32(const std::string& name) const;
  /// f64 tensor by name. Throws MissingTensorError, or FormatError when the
  /// stored dtype is f32.
  const TensorD& f64(const std::string& name) const;
  /// Either dtype, widened to double.
  TensorD as_f64(const std::string& name) const;

  /// Checks presence and exact shape, throwing MissingTensorError / ShapeMismatchError.
  void require(const std::string& name, const Shape& shape) const;

  const std::vector<std::pair<std::string, Entry>>& entries() const { return entries_; }

 private:
  const Entry& entry(const std::string& name) const;
  void insert(const std::string& name, Entry value);

  std::vector<std::pair<std::string, Entry>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

std::vector<std::uint8_t> serialize(const TensorContainer& container);
TensorContainer deserialize(const std::vector<std::uint8_t>& bytes);

void save_container(const TensorContainer& container, const std::filesystem::path& path);
TensorContainer load_container(const std::filesystem::path& path);

}  // namespace clipad::backbone
