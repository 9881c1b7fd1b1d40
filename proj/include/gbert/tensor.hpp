#pragma once

#include <cstddef>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "gbert/error.hpp"

namespace gbert {

/// Dense row-major tensor. The graph operations treat every tensor as a
/// matrix (rows, cols); vectors are stored as (1, n) or (n, 1).
template <typename Scalar>
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<Scalar> values;

  Tensor() = default;

  Tensor(std::vector<std::size_t> shape_in, std::vector<Scalar> values_in)
      : shape(std::move(shape_in)), values(std::move(values_in)) {
    if (numel_of(shape) != values.size()) {
      throw ShapeError("tensor: " + shape_string(shape) + " cannot hold " +
                       std::to_string(values.size()) + " values");
    }
  }

  static Tensor zeros(std::vector<std::size_t> shape_in) {
    std::vector<Scalar> v(numel_of(shape_in), Scalar(0));
    return Tensor(std::move(shape_in), std::move(v));
  }

  static Tensor full(std::vector<std::size_t> shape_in, Scalar fill) {
    std::vector<Scalar> v(numel_of(shape_in), fill);
    return Tensor(std::move(shape_in), std::move(v));
  }

  static Tensor scalar(Scalar v) { return Tensor({1, 1}, {v}); }

  static Tensor row(std::vector<Scalar> v) {
    const std::size_t n = v.size();
    return Tensor({1, n}, std::move(v));
  }

  static Tensor column(std::vector<Scalar> v) {
    const std::size_t n = v.size();
    return Tensor({n, 1}, std::move(v));
  }

  std::size_t numel() const { return values.size(); }

  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }

  std::size_t cols() const { return shape.size() < 2 ? (shape.empty() ? 0 : 1) : shape[1]; }

  Scalar& at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
  Scalar at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  void fill(Scalar v) { values.assign(values.size(), v); }

  static std::size_t numel_of(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (const std::size_t d : shape) {
      n *= d;
    }
    return shape.empty() ? 0 : n;
  }

  static std::string shape_string(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      os << (i ? "," : "") << shape[i];
    }
    os << ")";
    return os.str();
  }
};

}  // namespace gbert
