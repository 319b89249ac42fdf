#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "xmtl/error.hpp"

namespace xmtl {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

// Dense row-major array of doubles. The universal value type of the library:
// layer activations, parameters, embeddings, signals and images all live here.
// Arrays behave as values; operations return fresh arrays.
class Array {
public:
    Array() = default;

    explicit Array(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

    Array(Shape shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_numel(shape_) != data_.size())
            throw ShapeMismatch("data size " + std::to_string(data_.size()) +
                                " does not fill shape " + shape_str(shape_));
    }

    // 1-D convenience constructor: Array{1.0, 2.0, 3.0}.
    Array(std::initializer_list<double> v)
        : shape_{v.size()}, data_(v) {}

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return data_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& at2(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    double at2(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

    bool same_shape(const Array& o) const { return shape_ == o.shape_; }

    // Reinterpret the buffer under a new shape with equal element count.
    Array reshaped(Shape s) const {
        if (shape_numel(s) != data_.size())
            throw ShapeMismatch("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
        Array out;
        out.shape_ = std::move(s);
        out.data_ = data_;
        return out;
    }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    double sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

    double min() const { return *std::min_element(data_.begin(), data_.end()); }
    double max() const { return *std::max_element(data_.begin(), data_.end()); }

    double norm2() const {
        double s = 0.0;
        for (double v : data_) s += v * v;
        return std::sqrt(s);
    }

    Array map(const std::function<double(double)>& f) const {
        Array out = *this;
        for (double& v : out.data_) v = f(v);
        return out;
    }

    // 2-D transpose.
    Array transposed() const {
        if (rank() != 2) throw ShapeMismatch("transpose needs rank 2, got " + shape_str(shape_));
        Array out(Shape{shape_[1], shape_[0]});
        for (std::size_t i = 0; i < shape_[0]; ++i)
            for (std::size_t j = 0; j < shape_[1]; ++j)
                out.at2(j, i) = at2(i, j);
        return out;
    }

private:
    Shape shape_;
    std::vector<double> data_;
};

enum class ElemOp { Add, Sub, Mul, Div };

namespace detail {

inline double apply_op(ElemOp op, double a, double b) {
    switch (op) {
        case ElemOp::Add: return a + b;
        case ElemOp::Sub: return a - b;
        case ElemOp::Mul: return a * b;
        case ElemOp::Div: return a / b;
    }
    return 0.0;
}

}  // namespace detail

// Elementwise op with limited broadcasting: equal shapes, scalar b, or a
// trailing-axis vector b broadcast across the leading axes of a
// (e.g. shape (2,3) with shape (3,)).
inline Array elementwise(ElemOp op, const Array& a, const Array& b) {
    if (a.same_shape(b)) {
        Array out = a;
        for (std::size_t i = 0; i < out.numel(); ++i)
            out[i] = detail::apply_op(op, a[i], b[i]);
        return out;
    }
    if (b.numel() == 1) {
        Array out = a;
        for (std::size_t i = 0; i < out.numel(); ++i)
            out[i] = detail::apply_op(op, a[i], b[0]);
        return out;
    }
    if (b.rank() == 1 && a.rank() >= 2 && a.shape().back() == b.dim(0)) {
        Array out = a;
        const std::size_t inner = b.dim(0);
        for (std::size_t i = 0; i < out.numel(); ++i)
            out[i] = detail::apply_op(op, a[i], b[i % inner]);
        return out;
    }
    throw ShapeMismatch("elementwise " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline Array add(const Array& a, const Array& b) { return elementwise(ElemOp::Add, a, b); }
inline Array sub(const Array& a, const Array& b) { return elementwise(ElemOp::Sub, a, b); }
inline Array mul(const Array& a, const Array& b) { return elementwise(ElemOp::Mul, a, b); }
inline Array div(const Array& a, const Array& b) { return elementwise(ElemOp::Div, a, b); }

inline Array scale(const Array& a, double s) {
    Array out = a;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= s;
    return out;
}

inline double dot(const Array& a, const Array& b) {
    if (a.numel() != b.numel())
        throw ShapeMismatch("dot " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
    return s;
}

// (m,k) x (k,n) -> (m,n)
inline Array matmul(const Array& a, const Array& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeMismatch("matmul " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Array out(Shape{m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a.data() + i * k;
        double* orow = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

}  // namespace xmtl
