#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace tsdiff {

#ifdef TSDIFF_DOUBLE
using Scalar = double;
#else
using Scalar = float;
#endif

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t element_count(const Shape& shape);

/// Dense row-major tensor of Scalar (float, or double in the gradient-check build).
/// Image data uses N,C,H,W order.
///
/// A default-constructed tensor is empty (rank 0, no data) and is only used as
/// a "not yet allocated" marker; every constructed tensor has extents >= 1.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, Scalar fill = 0.0f);
    Tensor(Shape shape, std::vector<Scalar> data);

    static Tensor scalar(Scalar value) { return Tensor({1}, value); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    Scalar* data() noexcept { return data_.data(); }
    const Scalar* data() const noexcept { return data_.data(); }
    std::span<Scalar> values() noexcept { return data_; }
    std::span<const Scalar> values() const noexcept { return data_; }

    Scalar& operator[](std::size_t i) noexcept { return data_[i]; }
    Scalar operator[](std::size_t i) const noexcept { return data_[i]; }

    /// Element access for rank-3 (C,H,W) and rank-4 (N,C,H,W) tensors.
    Scalar& at(std::size_t c, std::size_t h, std::size_t w);
    Scalar at(std::size_t c, std::size_t h, std::size_t w) const;
    Scalar& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w);
    Scalar at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const;

    /// Value of a single-element tensor.
    Scalar item() const;

    Tensor reshaped(Shape shape) const;

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    Shape shape_;
    std::vector<Scalar> data_;
};

/// Largest absolute elementwise difference; throws ShapeError on mismatch.
double max_abs_diff(const Tensor& a, const Tensor& b);

/// Byte-level equality of shape and data (distinguishes -0.0 from 0.0 and NaN payloads).
bool bitwise_equal(const Tensor& a, const Tensor& b);

bool all_finite(const Tensor& t);

void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

} // namespace tsdiff
