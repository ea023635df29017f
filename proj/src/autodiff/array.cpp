#include "sqs/autodiff/array.hpp"

#include "sqs/core/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace sqs::ad {

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << ',';
        out << shape[i];
    }
    out << ']';
    return out.str();
}

Array::Array(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Array::Array(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
    if (shape_size(shape_) != data_.size()) {
        throw ShapeError("array of shape " + shape_string(shape_) + " given " + std::to_string(data_.size()) +
                         " values");
    }
}

Array Array::vector(std::initializer_list<double> values) {
    return Array(Shape{values.size()}, std::vector<double>(values));
}

double Array::item() const {
    if (data_.size() != 1) throw ShapeError("item() on array of shape " + shape_string(shape_));
    return data_[0];
}

void Array::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Array Array::reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size()) {
        throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return Array(std::move(shape), data_);
}

bool Array::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

bool Array::bit_equal(const Array& other) const noexcept {
    return shape_ == other.shape_ && data_.size() == other.data_.size() &&
           (data_.empty() || std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0);
}

double max_abs_difference(const Array& a, const Array& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    }
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

} // namespace sqs::ad
