// SPDX-License-Identifier: Apache-2.0
#include "kdfip/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace kdfip {

std::size_t shape_numel(const Shape &shape) {
    std::size_t n = 1;
    for (auto d : shape)
        n *= d;
    return n;
}

std::string shape_str(const Shape &shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i)
        os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_))
        throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_str(shape_));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::initializer_list<double> values) {
    return Tensor({rows, cols}, std::vector<double>(values));
}

Tensor Tensor::identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i)
        t.at(i, i) = 1.0;
    return t;
}

std::size_t Tensor::rows() const {
    if (shape_.size() != 2)
        throw ShapeError("rows() on tensor of shape " + shape_str(shape_));
    return shape_[0];
}

std::size_t Tensor::cols() const {
    if (shape_.size() != 2)
        throw ShapeError("cols() on tensor of shape " + shape_str(shape_));
    return shape_[1];
}

double Tensor::item() const {
    if (data_.size() != 1)
        throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
}

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
}

bool operator==(const Tensor &a, const Tensor &b) {
    if (a.shape_ != b.shape_)
        return false;
    // memcmp, so that -0.0 != 0.0 and NaN payloads compare as bits
    return a.data_.empty() ||
           std::memcmp(a.data_.data(), b.data_.data(), a.data_.size() * sizeof(double)) == 0;
}

double max_abs_diff(const Tensor &a, const Tensor &b) {
    if (a.shape() != b.shape())
        throw ShapeError("max_abs_diff: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

} // namespace kdfip
