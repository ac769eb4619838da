// SPDX-License-Identifier: Apache-2.0
#include "ccoe/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "ccoe/errors.hpp"

namespace ccoe {

Shape::Shape(std::initializer_list<std::size_t> dims)
    : Shape(std::span<const std::size_t>(dims.begin(), dims.size())) {}

Shape::Shape(std::span<const std::size_t> dims) {
  if (dims.empty() || dims.size() > 3) {
    throw DimensionError("tensor rank must be 1-3, got " + std::to_string(dims.size()));
  }
  rank_ = dims.size();
  std::copy(dims.begin(), dims.end(), dims_.begin());
}

std::size_t Shape::numel() const noexcept {
  std::size_t n = 1;
  for (std::size_t i = 0; i < rank_; ++i) n *= dims_[i];
  return n;
}

std::string Shape::to_string() const {
  std::string s = "[";
  for (std::size_t i = 0; i < rank_; ++i) {
    if (i) s += ",";
    s += std::to_string(dims_[i]);
  }
  return s + "]";
}

Tensor::Tensor(Shape shape, float fill) : shape_(shape), data_(shape.numel(), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> values) : shape_(shape), data_(std::move(values)) {
  if (data_.size() != shape_.numel()) {
    throw DimensionError("tensor shape " + shape_.to_string() + " needs " +
                         std::to_string(shape_.numel()) + " values, got " +
                         std::to_string(data_.size()));
  }
}

std::span<float> Tensor::row(std::size_t i) {
  const std::size_t cols = shape_[1];
  return {data_.data() + i * cols, cols};
}

std::span<const float> Tensor::row(std::size_t i) const {
  const std::size_t cols = shape_[1];
  return {data_.data() + i * cols, cols};
}

void Tensor::fill(float value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

Tensor Tensor::reshaped(Shape shape) const& {
  Tensor copy = *this;
  return std::move(copy).reshaped(shape);
}

Tensor Tensor::reshaped(Shape shape) && {
  if (shape.numel() != data_.size()) {
    throw DimensionError("cannot reshape " + shape_.to_string() + " to " + shape.to_string());
  }
  shape_ = shape;
  return std::move(*this);
}

bool bit_equal(const Tensor& a, const Tensor& b) noexcept {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape())) {
    throw DimensionError("max_abs_diff: shape " + a.shape().to_string() + " vs " +
                         b.shape().to_string());
  }
  float worst = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::fabs(a[i] - b[i]));
  return worst;
}

void require_finite(const Tensor& t, const char* where) {
  if (!t.all_finite()) throw NumericError(std::string(where) + ": non-finite value in output");
}

}  // namespace ccoe
