#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

namespace faith {

// Dense row-major tensor of 64-bit floats. All elements must be finite on
// construction; product(shape) must equal the data length. Scalar values are
// modeled as rank-0 tensors with one element.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor zeros(std::vector<std::size_t> shape);
  static Tensor full(std::vector<std::size_t> shape, double value);
  static Tensor scalar(double value) { return Tensor({}, {value}); }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](std::size_t flat) { return data_[flat]; }
  double operator[](std::size_t flat) const { return data_[flat]; }

  double& at(std::initializer_list<std::size_t> idx) { return data_[flat_index(idx)]; }
  double at(std::initializer_list<std::size_t> idx) const { return data_[flat_index(idx)]; }

  // Extent product of the trailing axes starting at `axis`.
  std::size_t trailing(std::size_t axis) const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  std::string shape_str() const;

  // Re-checks the finiteness invariant (used after in-place fills).
  void check_finite(const std::string& context) const;

 private:
  std::size_t flat_index(std::initializer_list<std::size_t> idx) const;

  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::size_t shape_numel(const std::vector<std::size_t>& shape);
std::string shape_to_string(const std::vector<std::size_t>& shape);

}  // namespace faith
