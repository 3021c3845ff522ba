#include "fedvib/nn/tensor.hpp"

#include <cmath>
#include <cstring>
#include <numeric>

#include "fedvib/errors.hpp"

namespace fedvib {

std::size_t element_count(const Tensor::Shape& shape) noexcept {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, std::size_t b) { return a * b; });
}

std::string shape_string(const Tensor::Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  if (shape_.size() > 3) throw DimensionError("tensor rank above 3: " + shape_string(shape_));
  values_.assign(element_count(shape_), 0.0f);
}

Tensor::Tensor(Shape shape, std::vector<float> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (shape_.size() > 3) throw DimensionError("tensor rank above 3: " + shape_string(shape_));
  if (element_count(shape_) != values_.size()) {
    throw DimensionError("shape " + shape_string(shape_) + " does not hold " +
                         std::to_string(values_.size()) + " values");
  }
}

Tensor Tensor::vector(std::initializer_list<float> values) {
  return Tensor({values.size()}, std::vector<float>(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) throw DimensionError("axis out of range for " + shape_string(shape_));
  return shape_[axis];
}

float& Tensor::at(std::size_t row, std::size_t col) {
  if (rank() != 2 || row >= shape_[0] || col >= shape_[1]) {
    throw DimensionError("index out of range for " + shape_string(shape_));
  }
  return values_[row * shape_[1] + col];
}

float Tensor::at(std::size_t row, std::size_t col) const {
  return const_cast<Tensor*>(this)->at(row, col);
}

bool Tensor::all_finite() const noexcept {
  for (float v : values_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

bool Tensor::identical(const Tensor& other) const noexcept {
  return shape_ == other.shape_ &&
         (values_.empty() ||
          std::memcmp(values_.data(), other.values_.data(), values_.size() * sizeof(float)) == 0);
}

}  // namespace fedvib
