#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace fktlab {

using Shape = std::vector<std::size_t>;

std::size_t shape_volume(const Shape& shape);
std::string shape_to_string(const Shape& shape);

// Dense row-major array of doubles. Shape entries are strictly positive and
// the element count always equals their product.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::initializer_list<double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  const double& operator[](std::size_t i) const noexcept { return data_[i]; }

  // 2-D accessors; valid for any rank >= 2 by treating trailing axes as
  // flattened columns.
  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t row_size() const { return rows() == 0 ? 0 : data_.size() / rows(); }
  double& at(std::size_t r, std::size_t c) { return data_[r * row_size() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * row_size() + c]; }
  std::span<double> row(std::size_t r) { return data().subspan(r * row_size(), row_size()); }
  std::span<const double> row(std::size_t r) const {
    return data().subspan(r * row_size(), row_size());
  }

  void fill(double value);
  Tensor reshaped(Shape shape) const;

  // Bitwise equality of shape and every element (distinguishes +0/-0).
  bool bit_equal(const Tensor& other) const;
  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Rows [indices] of a tensor, in the given order.
Tensor gather_rows(const Tensor& t, std::span<const std::size_t> indices);

}  // namespace fktlab
