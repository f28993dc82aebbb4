#include "faith/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace faith {

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_to_string(const std::vector<std::size_t>& shape) {
  std::ostringstream oss;
  oss << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) oss << ", ";
    oss << shape[i];
  }
  oss << "]";
  return oss.str();
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw std::invalid_argument("Tensor: shape " + shape_to_string(shape_) + " expects " +
                                std::to_string(shape_numel(shape_)) + " elements, got " +
                                std::to_string(data_.size()));
  }
  check_finite("Tensor");
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
  std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
  std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

std::size_t Tensor::trailing(std::size_t axis) const {
  std::size_t n = 1;
  for (std::size_t a = axis; a < shape_.size(); ++a) n *= shape_[a];
  return n;
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

void Tensor::check_finite(const std::string& context) const {
  for (double v : data_) {
    if (!std::isfinite(v)) {
      throw std::invalid_argument(context + ": non-finite element");
    }
  }
}

std::size_t Tensor::flat_index(std::initializer_list<std::size_t> idx) const {
  if (idx.size() != shape_.size()) {
    throw std::out_of_range("Tensor::at: rank mismatch");
  }
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : idx) {
    if (i >= shape_[axis]) throw std::out_of_range("Tensor::at: index out of range");
    flat = flat * shape_[axis] + i;
    ++axis;
  }
  return flat;
}

}  // namespace faith
