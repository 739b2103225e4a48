// Copyright 2026 The lisa-lab Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef LISA_TENSOR_HPP
#define LISA_TENSOR_HPP

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "lisa/errors.hpp"

namespace lisa {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using MatrixD = Matrix<double>;

inline Index shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array of any rank.
///
/// Storage is a single Eigen matrix whose column count is the last
/// dimension and whose row count is the product of the leading ones, so a
/// score tensor of shape {h, l, l} is an (h*l) x l matrix with head i in
/// rows [i*l, (i+1)*l). Rank-0 and rank-1 tensors are 1 x n.
template <typename Scalar>
class Tensor {
 public:
  using scalar_type = Scalar;
  using matrix_type = Matrix<Scalar>;

  Tensor() : shape_{0, 0}, data_(0, 0) {}

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    data_ = matrix_type::Zero(lead_rows(shape_), last_dim(shape_));
  }

  Tensor(Shape shape, matrix_type data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.rows() != lead_rows(shape_) || data_.cols() != last_dim(shape_)) {
      throw ShapeError("tensor storage " + std::to_string(data_.rows()) + "x" +
                       std::to_string(data_.cols()) + " does not match shape " +
                       shape_str(shape_));
    }
  }

  /// Wraps a matrix as a rank-2 tensor.
  static Tensor from_matrix(matrix_type m) {
    Shape s{m.rows(), m.cols()};
    return Tensor(std::move(s), std::move(m));
  }

  static Tensor scalar(Scalar v) {
    matrix_type m(1, 1);
    m(0, 0) = v;
    return Tensor(Shape{}, std::move(m));
  }

  static Tensor from_values(Shape shape, std::span<const Scalar> values) {
    if (static_cast<Index>(values.size()) != shape_numel(shape)) {
      throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                       shape_str(shape));
    }
    Tensor t(std::move(shape));
    std::copy(values.begin(), values.end(), t.data());
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const { return shape_.at(static_cast<std::size_t>(i)); }
  Index numel() const { return data_.size(); }
  Index rows() const { return data_.rows(); }
  Index cols() const { return data_.cols(); }

  matrix_type& mat() { return data_; }
  const matrix_type& mat() const { return data_; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<const Scalar> values() const {
    return {data_.data(), static_cast<std::size_t>(data_.size())};
  }

  Scalar item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
    return data_(0, 0);
  }

  Scalar& operator()(Index r, Index c) { return data_(r, c); }
  Scalar operator()(Index r, Index c) const { return data_(r, c); }

  /// Element of a rank-3 tensor.
  Scalar at3(Index i, Index j, Index k) const { return data_(i * shape_[1] + j, k); }
  Scalar& at3(Index i, Index j, Index k) { return data_(i * shape_[1] + j, k); }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    matrix_type m = Eigen::Map<const matrix_type>(data_.data(), lead_rows(shape), last_dim(shape));
    return Tensor(std::move(shape), std::move(m));
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  bool all_finite() const { return data_.allFinite(); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static Index last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }
  static Index lead_rows(const Shape& s) {
    if (s.size() <= 1) return 1;
    return std::accumulate(s.begin(), s.end() - 1, Index{1}, std::multiplies<>());
  }

  Shape shape_;
  matrix_type data_;
};

using TensorD = Tensor<double>;
using TensorF = Tensor<float>;

/// FNV-1a over the raw bytes of every element; used for frozen-weight checks.
template <typename Scalar>
std::uint64_t checksum(const Tensor<Scalar>& t, std::uint64_t seed = 1469598103934665603ULL) {
  const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
  const std::size_t n = static_cast<std::size_t>(t.numel()) * sizeof(Scalar);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace lisa

#endif  // LISA_TENSOR_HPP
