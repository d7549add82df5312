#include "fktlab/tensor.hpp"

#include <algorithm>
#include <cstring>
#include <sstream>

#include "fktlab/errors.hpp"

namespace fktlab {

std::size_t shape_volume(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw ParameterError("tensor shape must have at least one axis");
  for (std::size_t d : shape) {
    if (d == 0) throw ParameterError("tensor shape entries must be positive: " + shape_to_string(shape));
  }
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_volume(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (data_.size() != shape_volume(shape_)) {
    throw ParameterError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_to_string(shape_));
  }
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::initializer_list<double> values) {
  return Tensor({rows, cols}, std::vector<double>(values));
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

bool Tensor::bit_equal(const Tensor& other) const {
  return shape_ == other.shape_ &&
         (data_.empty() ||
          std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0);
}

Tensor gather_rows(const Tensor& t, std::span<const std::size_t> indices) {
  if (indices.empty()) throw EmptyDatasetError("cannot gather zero rows");
  Shape shape = t.shape();
  shape[0] = indices.size();
  Tensor out(shape);
  const std::size_t w = t.row_size();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    auto src = t.row(indices[i]);
    std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * w));
  }
  return out;
}

}  // namespace fktlab
