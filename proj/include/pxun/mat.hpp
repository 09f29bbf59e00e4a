#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "pxun/errors.hpp"

namespace pxun {

// Row-major dense double matrix. Doubles as the Image type: images are
// H x W grids with values nominally in [0, 1].
class Mat {
public:
    Mat() = default;
    Mat(int rows, int cols, double fill = 0.0)
        : r_(rows), c_(cols), v_(static_cast<std::size_t>(rows) * cols, fill) {
        if (rows < 1 || cols < 1) throw ValueError("Mat: extents must be >= 1");
    }
    Mat(int rows, int cols, std::vector<double> values) : r_(rows), c_(cols), v_(std::move(values)) {
        if (rows < 1 || cols < 1) throw ValueError("Mat: extents must be >= 1");
        if (v_.size() != static_cast<std::size_t>(rows) * cols)
            throw ShapeError("Mat: value count does not match extents");
    }

    int rows() const { return r_; }
    int cols() const { return c_; }
    std::size_t size() const { return v_.size(); }
    bool empty() const { return v_.empty(); }

    double& operator()(int i, int j) { return v_[static_cast<std::size_t>(i) * c_ + j]; }
    double operator()(int i, int j) const { return v_[static_cast<std::size_t>(i) * c_ + j]; }
    double* data() { return v_.data(); }
    const double* data() const { return v_.data(); }
    std::vector<double>& values() { return v_; }
    const std::vector<double>& values() const { return v_; }

    bool same_shape(const Mat& o) const { return r_ == o.r_ && c_ == o.c_; }

private:
    int r_ = 0, c_ = 0;
    std::vector<double> v_;
};

using Image = Mat;

inline Mat matmul(const Mat& a, const Mat& b) {
    if (a.cols() != b.rows()) throw ShapeError("matmul: inner extents differ");
    Mat c(a.rows(), b.cols());
    for (int i = 0; i < a.rows(); ++i) {
        for (int k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            for (int j = 0; j < b.cols(); ++j) c(i, j) += aik * b(k, j);
        }
    }
    return c;
}

inline Mat transpose(const Mat& a) {
    Mat t(a.cols(), a.rows());
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

inline Mat operator+(const Mat& a, const Mat& b) {
    if (!a.same_shape(b)) throw ShapeError("Mat+: shape mismatch");
    Mat c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c.values()[i] += b.values()[i];
    return c;
}

inline Mat operator-(const Mat& a, const Mat& b) {
    if (!a.same_shape(b)) throw ShapeError("Mat-: shape mismatch");
    Mat c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c.values()[i] -= b.values()[i];
    return c;
}

inline Mat operator*(double s, const Mat& a) {
    Mat c = a;
    for (double& x : c.values()) x *= s;
    return c;
}

inline double dot(const Mat& a, const Mat& b) {
    if (!a.same_shape(b)) throw ShapeError("dot: shape mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.values()[i] * b.values()[i];
    return s;
}

inline double frob_norm(const Mat& a) { return std::sqrt(dot(a, a)); }

inline double max_abs_diff(const Mat& a, const Mat& b) {
    if (!a.same_shape(b)) throw ShapeError("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a.values()[i] - b.values()[i]));
    return m;
}

// vec(X): column-stacked vectorization as used with Kronecker identities.
inline std::vector<double> vec(const Mat& x) {
    std::vector<double> v(x.size());
    std::size_t n = 0;
    for (int j = 0; j < x.cols(); ++j)
        for (int i = 0; i < x.rows(); ++i) v[n++] = x(i, j);
    return v;
}

// Kronecker product a (x) b.
inline Mat kron(const Mat& a, const Mat& b) {
    Mat k(a.rows() * b.rows(), a.cols() * b.cols());
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) {
            const double aij = a(i, j);
            for (int p = 0; p < b.rows(); ++p)
                for (int q = 0; q < b.cols(); ++q) k(i * b.rows() + p, j * b.cols() + q) = aij * b(p, q);
        }
    return k;
}

}  // namespace pxun
