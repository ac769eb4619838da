// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace ccoe {

/// Dimension list of a rank 1-3 tensor.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims);
  explicit Shape(std::span<const std::size_t> dims);

  std::size_t rank() const noexcept { return rank_; }
  std::size_t operator[](std::size_t axis) const { return dims_.at(axis); }
  std::size_t numel() const noexcept;
  std::vector<std::size_t> dims() const { return {dims_.begin(), dims_.begin() + rank_}; }
  std::string to_string() const;

  friend bool operator==(const Shape& a, const Shape& b) noexcept {
    return a.rank_ == b.rank_ && a.dims_ == b.dims_;
  }

 private:
  std::array<std::size_t, 3> dims_{0, 0, 0};
  std::size_t rank_ = 1;
};

/// Dense row-major float32 array. No views, no strides.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.rank(); }
  std::size_t dim(std::size_t axis) const { return shape_[axis]; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float* data() noexcept { return data_.data(); }
  const float* data() const noexcept { return data_.data(); }
  std::span<float> values() noexcept { return data_; }
  std::span<const float> values() const noexcept { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }
  float& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  float at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  float& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  float at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  /// Row i of a rank-2 tensor.
  std::span<float> row(std::size_t i);
  std::span<const float> row(std::size_t i) const;

  void fill(float value);
  bool all_finite() const noexcept;

  /// Reinterprets the data under a new shape with the same element count.
  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;

 private:
  Shape shape_{0};
  std::vector<float> data_;
};

/// Bitwise equality of shape and payload (distinguishes -0.0f and NaN payloads).
bool bit_equal(const Tensor& a, const Tensor& b) noexcept;

/// Largest |a[i] - b[i]|; shapes must match.
float max_abs_diff(const Tensor& a, const Tensor& b);

/// Throws NumericError naming `where` when the tensor holds NaN or Inf.
void require_finite(const Tensor& t, const char* where);

}  // namespace ccoe
