#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "infinisim/error.hpp"
#include "infinisim/half.hpp"

namespace infinisim {

/// Element type of a stored 1-D array. Values are the on-disk dtype codes.
enum class DType : std::uint8_t { F32 = 0, F16 = 1, F64 = 2 };

constexpr std::size_t dtype_size(DType d) noexcept {
  switch (d) {
    case DType::F32: return 4;
    case DType::F16: return 2;
    case DType::F64: return 8;
  }
  return 0;
}

constexpr std::string_view dtype_name(DType d) noexcept {
  switch (d) {
    case DType::F32: return "f32";
    case DType::F16: return "f16";
    case DType::F64: return "f64";
  }
  return "?";
}

template <typename T>
struct dtype_of;
template <>
struct dtype_of<float> : std::integral_constant<DType, DType::F32> {};
template <>
struct dtype_of<Half> : std::integral_constant<DType, DType::F16> {};
template <>
struct dtype_of<double> : std::integral_constant<DType, DType::F64> {};

template <typename T>
inline constexpr DType dtype_of_v = dtype_of<T>::value;

template <typename T>
concept Element = std::is_same_v<T, float> || std::is_same_v<T, double> || std::is_same_v<T, Half>;

/// Typed, owning, one-dimensional array. Storage is raw bytes in host order
/// (little-endian on every supported target).
class Tensor {
 public:
  Tensor() = default;
  Tensor(DType dtype, std::size_t count) : dtype_(dtype), bytes_(count * dtype_size(dtype)) {}

  template <Element T>
  static Tensor from(std::span<const T> values) {
    Tensor t(dtype_of_v<T>, values.size());
    if (!values.empty()) std::memcpy(t.bytes_.data(), values.data(), values.size_bytes());
    return t;
  }

  template <Element T>
  static Tensor from(const std::vector<T>& values) {
    return from(std::span<const T>(values));
  }

  static Tensor from_bytes(DType dtype, std::vector<std::byte> bytes) {
    if (bytes.size() % dtype_size(dtype) != 0) throw ShapeError("byte length is not a multiple of the element size");
    Tensor t;
    t.dtype_ = dtype;
    t.bytes_ = std::move(bytes);
    return t;
  }

  DType dtype() const noexcept { return dtype_; }
  std::size_t size() const noexcept { return bytes_.size() / dtype_size(dtype_); }
  std::size_t nbytes() const noexcept { return bytes_.size(); }
  bool empty() const noexcept { return bytes_.empty(); }

  std::span<const std::byte> bytes() const noexcept { return bytes_; }
  std::span<std::byte> bytes() noexcept { return bytes_; }

  template <Element T>
  std::span<T> as() {
    check<T>();
    return {reinterpret_cast<T*>(bytes_.data()), size()};
  }

  template <Element T>
  std::span<const T> as() const {
    check<T>();
    return {reinterpret_cast<const T*>(bytes_.data()), size()};
  }

  template <Element T>
  std::vector<T> to_vector() const {
    auto s = as<T>();
    return {s.begin(), s.end()};
  }

  /// Elements [offset, offset + count) as a new tensor.
  Tensor slice(std::size_t offset, std::size_t count) const {
    if (offset + count > size()) throw ShapeError("slice out of range");
    const std::size_t es = dtype_size(dtype_);
    Tensor t(dtype_, count);
    if (count) std::memcpy(t.bytes_.data(), bytes_.data() + offset * es, count * es);
    return t;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) noexcept {
    return a.dtype_ == b.dtype_ && a.bytes_ == b.bytes_;
  }

 private:
  template <typename T>
  void check() const {
    if (dtype_of_v<T> != dtype_) {
      throw ShapeError(std::string("tensor holds ") + std::string(dtype_name(dtype_)) + ", requested " +
                       std::string(dtype_name(dtype_of_v<T>)));
    }
  }

  DType dtype_ = DType::F32;
  std::vector<std::byte> bytes_;
};

}  // namespace infinisim
