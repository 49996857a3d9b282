// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace kdfip {

/// Raised when operand shapes do not conform to a primitive's contract.
class ShapeError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when an engine operation produces NaN or Inf.
class NonFiniteError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape &shape);
std::string shape_str(const Shape &shape);

/// Dense row-major tensor of 64-bit floats.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double v) { return Tensor({1, 1}, {v}); }
    static Tensor matrix(std::size_t rows, std::size_t cols,
                         std::initializer_list<double> values);
    static Tensor identity(std::size_t n);

    const Shape &shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return data_.size(); }
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }
    std::vector<double> &storage() { return data_; }
    const std::vector<double> &storage() const { return data_; }

    // Matrix element access; unchecked, callers validate the shape once.
    double &operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double &at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    /// Value of a one-element tensor.
    double item() const;
    bool all_finite() const;

    /// Bitwise equality of shape and data.
    friend bool operator==(const Tensor &a, const Tensor &b);

  private:
    Shape shape_;
    std::vector<double> data_;
};

/// Largest absolute elementwise difference; shapes must match.
double max_abs_diff(const Tensor &a, const Tensor &b);

} // namespace kdfip
