#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "dfa/errors.hpp"
#include "dfa/rng.hpp"

namespace dfa {

// Dense row-major matrix of doubles. The single value carrier for weights,
// activations, feedback matrices and gradients.
class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {
        if (rows == 0 || cols == 0)
            throw ParameterError("Matrix dimensions must be positive, got " +
                                 shape_str(rows, cols));
    }

    Matrix(std::initializer_list<std::initializer_list<double>> init) {
        rows_ = init.size();
        cols_ = rows_ ? init.begin()->size() : 0;
        if (rows_ == 0 || cols_ == 0)
            throw ParameterError("Matrix initializer must be non-empty");
        data_.reserve(rows_ * cols_);
        for (const auto& row : init) {
            if (row.size() != cols_)
                throw ParameterError("Matrix initializer rows have unequal lengths");
            data_.insert(data_.end(), row.begin(), row.end());
        }
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    double* row_ptr(std::size_t i) { return data_.data() + i * cols_; }
    const double* row_ptr(std::size_t i) const { return data_.data() + i * cols_; }

    std::span<double> row(std::size_t i) { return {row_ptr(i), cols_}; }
    std::span<const double> row(std::size_t i) const { return {row_ptr(i), cols_}; }

    std::span<double> flat() { return {data_.data(), data_.size()}; }
    std::span<const double> flat() const { return {data_.data(), data_.size()}; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    std::string shape() const { return shape_str(rows_, cols_); }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    void add_inplace(const Matrix& o) {
        require_same_shape(o, "add");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    }

    void sub_inplace(const Matrix& o) {
        require_same_shape(o, "sub");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    }

    void scale_inplace(double s) {
        for (auto& v : data_) v *= s;
    }

    // a += s * b, the one fused update the optimizers lean on.
    void axpy_inplace(double s, const Matrix& o) {
        require_same_shape(o, "axpy");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * o.data_[i];
    }

    bool operator==(const Matrix& o) const {
        return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
    }

private:
    void require_same_shape(const Matrix& o, const char* op) const {
        if (!same_shape(o))
            throw ShapeError(std::string(op) + ": shape mismatch " + shape() +
                             " vs " + o.shape());
    }

    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Core operations
// ---------------------------------------------------------------------------

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dimensions differ, " + a.shape() + " x " +
                         b.shape());
    Matrix c(a.rows(), b.cols());
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    // i-k-j order keeps the inner loop contiguous in both b and c.
    for (std::size_t i = 0; i < n; ++i) {
        double* ci = c.row_ptr(i);
        const double* ai = a.row_ptr(i);
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = ai[p];
            const double* bp = b.row_ptr(p);
            for (std::size_t j = 0; j < m; ++j) ci[j] += aip * bp[j];
        }
    }
    return c;
}

// a * b^T without materializing the transpose.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols())
        throw ShapeError("matmul_nt: inner dimensions differ, " + a.shape() +
                         " x " + b.shape() + "^T");
    Matrix c(a.rows(), b.rows());
    const std::size_t k = a.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* ai = a.row_ptr(i);
        double* ci = c.row_ptr(i);
        for (std::size_t j = 0; j < b.rows(); ++j) {
            const double* bj = b.row_ptr(j);
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] = acc;
        }
    }
    return c;
}

// a^T * b without materializing the transpose.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows())
        throw ShapeError("matmul_tn: inner dimensions differ, " + a.shape() +
                         "^T x " + b.shape());
    Matrix c(a.cols(), b.cols());
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    for (std::size_t p = 0; p < n; ++p) {
        const double* ap = a.row_ptr(p);
        const double* bp = b.row_ptr(p);
        for (std::size_t i = 0; i < k; ++i) {
            const double aip = ap[i];
            double* ci = c.row_ptr(i);
            for (std::size_t j = 0; j < m; ++j) ci[j] += aip * bp[j];
        }
    }
    return c;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b))
        throw ShapeError("hadamard: shape mismatch " + a.shape() + " vs " + b.shape());
    Matrix c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] *= b.data()[i];
    return c;
}

inline Matrix transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

inline Matrix uniform_matrix(SeededRng& rng, std::size_t rows, std::size_t cols,
                             double lo, double hi) {
    if (!(lo < hi))
        throw ParameterError("uniform_matrix: lo must be < hi, got lo=" +
                             std::to_string(lo) + " hi=" + std::to_string(hi));
    Matrix m(rows, cols);
    for (auto& v : m.data()) v = lo + rng.next_double() * (hi - lo);
    return m;
}

// Row-wise softmax with max subtraction.
inline Matrix softmax_rows(const Matrix& a) {
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* in = a.row_ptr(i);
        double* o = out.row_ptr(i);
        double mx = in[0];
        for (std::size_t j = 1; j < a.cols(); ++j) mx = std::max(mx, in[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) {
            o[j] = std::exp(in[j] - mx);
            sum += o[j];
        }
        const double inv = 1.0 / sum;
        for (std::size_t j = 0; j < a.cols(); ++j) o[j] *= inv;
    }
    return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw ShapeError("cosine_similarity: length mismatch " +
                         std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    const double na = norm2(a), nb = norm2(b);
    if (na == 0.0 && nb == 0.0)
        throw ParameterError("cosine_similarity: both vectors are zero");
    if (na == 0.0 || nb == 0.0) return 0.0;
    double c = dot(a, b) / (na * nb);
    if (c > 1.0) c = 1.0;
    if (c < -1.0) c = -1.0;
    return c;
}

// Column sums as a 1 x cols matrix (bias gradients).
inline Matrix col_sum(const Matrix& a) {
    Matrix s(1, a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* r = a.row_ptr(i);
        for (std::size_t j = 0; j < a.cols(); ++j) s(0, j) += r[j];
    }
    return s;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b))
        throw ShapeError("max_abs_diff: shape mismatch " + a.shape() + " vs " + b.shape());
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

inline bool all_finite(const Matrix& a) {
    for (double v : a.flat())
        if (!std::isfinite(v)) return false;
    return true;
}

// FNV-1a over the raw bytes; used for parameter freeze checks.
inline std::uint64_t content_hash(const Matrix& a) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    auto mix = [&h](std::uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            h ^= (v >> (8 * i)) & 0xFF;
            h *= 0x100000001B3ULL;
        }
    };
    mix(a.rows());
    mix(a.cols());
    for (double v : a.flat()) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof bits);
        mix(bits);
    }
    return h;
}

}  // namespace dfa
