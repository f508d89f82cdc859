#pragma once

// Dense row-major double matrices plus the small kernel set the rest of
// the library is built from.  The kernels are free functions so the
// autodiff tape and the plain evaluation paths share the exact same
// floating-point code.

#include <cmath>
#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include "fit/errors.hpp"

namespace fit {

struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    static Matrix row_vector(const std::vector<double>& v) {
        Matrix m(1, v.size());
        m.data = v;
        return m;
    }

    static Matrix scalar(double v) { return Matrix(1, 1, v); }

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    std::size_t size() const { return rows * cols; }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

    std::string shape_str() const {
        std::ostringstream os;
        os << rows << "x" << cols;
        return os.str();
    }
};

inline bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows == b.rows && a.cols == b.cols && a.data == b.data;
}

namespace detail {
[[noreturn]] inline void shape_fail(const char* op, const Matrix& a, const Matrix& b) {
    throw DimensionMismatch(std::string(op) + ": incompatible shapes " + a.shape_str() + " and " +
                            b.shape_str());
}
}  // namespace detail

// ---- binary elementwise ops with row/column broadcasting ------------
//
// Each operand dimension must equal the output dimension or be 1; this
// covers scalars (1x1), row vectors (1xc) and column vectors (rx1).

template <typename F>
inline Matrix ew_binary(const Matrix& a, const Matrix& b, F f, const char* name) {
    std::size_t r = a.rows > b.rows ? a.rows : b.rows;
    std::size_t c = a.cols > b.cols ? a.cols : b.cols;
    if ((a.rows != r && a.rows != 1) || (a.cols != c && a.cols != 1) ||
        (b.rows != r && b.rows != 1) || (b.cols != c && b.cols != 1)) {
        detail::shape_fail(name, a, b);
    }
    Matrix out(r, c);
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            double av = a(a.rows == 1 ? 0 : i, a.cols == 1 ? 0 : j);
            double bv = b(b.rows == 1 ? 0 : i, b.cols == 1 ? 0 : j);
            out(i, j) = f(av, bv);
        }
    }
    return out;
}

inline Matrix ew_add(const Matrix& a, const Matrix& b) {
    return ew_binary(a, b, [](double x, double y) { return x + y; }, "add");
}
inline Matrix ew_sub(const Matrix& a, const Matrix& b) {
    return ew_binary(a, b, [](double x, double y) { return x - y; }, "sub");
}
inline Matrix ew_mul(const Matrix& a, const Matrix& b) {
    return ew_binary(a, b, [](double x, double y) { return x * y; }, "mul");
}
inline Matrix ew_div(const Matrix& a, const Matrix& b) {
    return ew_binary(a, b, [](double x, double y) { return x / y; }, "div");
}

// Sum g down to shape (r, c); inverse of broadcasting for the reverse
// pass.
inline Matrix reduce_to(const Matrix& g, std::size_t r, std::size_t c) {
    if (g.rows == r && g.cols == c) return g;
    if ((r != g.rows && r != 1) || (c != g.cols && c != 1)) {
        throw DimensionMismatch("reduce_to: cannot reduce " + g.shape_str());
    }
    Matrix out(r, c);
    for (std::size_t i = 0; i < g.rows; ++i) {
        for (std::size_t j = 0; j < g.cols; ++j) {
            out(r == 1 ? 0 : i, c == 1 ? 0 : j) += g(i, j);
        }
    }
    return out;
}

// ---- products and maps ----------------------------------------------

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) detail::shape_fail("matmul", a, b);
    Matrix out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t k = 0; k < a.cols; ++k) {
            double av = a(i, k);
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < b.cols; ++j) out(i, j) += av * b(k, j);
        }
    }
    return out;
}

inline Matrix transpose(const Matrix& a) {
    Matrix out(a.cols, a.rows);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < a.cols; ++j) out(j, i) = a(i, j);
    return out;
}

template <typename F>
inline Matrix ew_map(const Matrix& a, F f) {
    Matrix out(a.rows, a.cols);
    for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = f(a.data[i]);
    return out;
}

inline Matrix map_relu(const Matrix& a) {
    return ew_map(a, [](double x) { return x > 0.0 ? x : 0.0; });
}
inline Matrix map_exp(const Matrix& a) {
    return ew_map(a, [](double x) { return std::exp(x); });
}
inline Matrix map_log(const Matrix& a) {
    return ew_map(a, [](double x) { return std::log(x); });
}
inline Matrix map_pow(const Matrix& a, double p) {
    return ew_map(a, [p](double x) { return std::pow(x, p); });
}
inline Matrix scale(const Matrix& a, double s) {
    return ew_map(a, [s](double x) { return x * s; });
}

// ---- reductions -------------------------------------------------------

inline Matrix sum_all(const Matrix& a) {
    double s = 0.0;
    for (double v : a.data) s += v;
    return Matrix::scalar(s);
}

// Column sums: (r, c) -> (1, c).
inline Matrix sum_rows(const Matrix& a) {
    Matrix out(1, a.cols);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < a.cols; ++j) out(0, j) += a(i, j);
    return out;
}

// Row sums: (r, c) -> (r, 1).
inline Matrix sum_cols(const Matrix& a) {
    Matrix out(a.rows, 1);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < a.cols; ++j) out(i, 0) += a(i, j);
    return out;
}

// Stable row-wise log-sum-exp: (r, c) -> (r, 1).
inline Matrix logsumexp_rows(const Matrix& a) {
    if (a.cols == 0) throw DimensionMismatch("logsumexp_rows: zero columns");
    Matrix out(a.rows, 1);
    for (std::size_t i = 0; i < a.rows; ++i) {
        double m = a(i, 0);
        for (std::size_t j = 1; j < a.cols; ++j) m = a(i, j) > m ? a(i, j) : m;
        double s = 0.0;
        for (std::size_t j = 0; j < a.cols; ++j) s += std::exp(a(i, j) - m);
        out(i, 0) = m + std::log(s);
    }
    return out;
}

// Row-wise standardization: (x - mean) / sqrt(var + eps) with mean and
// (biased) variance taken per row.  Composed from the kernels above in
// the same order as the tape version so the two agree bit-for-bit.
inline Matrix standardize_rows(const Matrix& x, double eps) {
    double inv_c = 1.0 / static_cast<double>(x.cols);
    Matrix mean = ew_mul(sum_cols(x), Matrix::scalar(inv_c));
    Matrix cent = ew_sub(x, mean);
    Matrix var = ew_mul(sum_cols(ew_mul(cent, cent)), Matrix::scalar(inv_c));
    Matrix inv = map_pow(ew_add(var, Matrix::scalar(eps)), -0.5);
    return ew_mul(cent, inv);
}

inline Matrix concat_cols(const std::vector<Matrix>& parts) {
    if (parts.empty()) throw DimensionMismatch("concat_cols: no operands");
    std::size_t r = parts.front().rows;
    std::size_t c = 0;
    for (const Matrix& p : parts) {
        if (p.rows != r) detail::shape_fail("concat_cols", parts.front(), p);
        c += p.cols;
    }
    Matrix out(r, c);
    std::size_t off = 0;
    for (const Matrix& p : parts) {
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < p.cols; ++j) out(i, off + j) = p(i, j);
        off += p.cols;
    }
    return out;
}

// ---- norms / comparisons (used by tests and trainers) -----------------

inline double frobenius_norm(const Matrix& a) {
    double s = 0.0;
    for (double v : a.data) s += v * v;
    return std::sqrt(s);
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) detail::shape_fail("max_abs_diff", a, b);
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = std::fabs(a.data[i] - b.data[i]);
        if (d > m) m = d;
    }
    return m;
}

// ---- Cholesky ----------------------------------------------------------

// Lower-triangular factor L with A = L L^T.
struct CholeskyFactor {
    Matrix l;  // lower triangular, upper part zero
    std::size_t dim() const { return l.rows; }
};

// Factor a symmetric positive definite matrix.  `jitter` is added to the
// diagonal before factoring (0 = off).  Throws NotPositiveDefinite with
// the failing pivot index when the matrix is degenerate.
inline CholeskyFactor cholesky(const Matrix& a, double jitter = 0.0) {
    if (a.rows != a.cols) throw DimensionMismatch("cholesky: matrix not square, " + a.shape_str());
    std::size_t n = a.rows;
    Matrix l(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        // iterate over column j: diagonal pivot first, then the column below
        double d = a(j, j) + jitter;
        for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
        if (!(d > 0.0) || !std::isfinite(d)) {
            std::ostringstream os;
            os << "cholesky: pivot " << j << " is " << d << "; matrix is not positive definite";
            throw NotPositiveDefinite(os.str());
        }
        l(j, j) = std::sqrt(d);
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = a(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            l(i, j) = s / l(j, j);
        }
    }
    return CholeskyFactor{std::move(l)};
}

// Solve A X = B given A = L L^T; B is (n, k).
inline Matrix chol_solve(const CholeskyFactor& f, const Matrix& b) {
    const Matrix& l = f.l;
    std::size_t n = l.rows;
    if (b.rows != n) detail::shape_fail("chol_solve", l, b);
    Matrix x = b;
    // forward: L y = b
    for (std::size_t j = 0; j < b.cols; ++j) {
        for (std::size_t i = 0; i < n; ++i) {
            double s = x(i, j);
            for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * x(k, j);
            x(i, j) = s / l(i, i);
        }
        // backward: L^T x = y
        for (std::size_t ii = n; ii-- > 0;) {
            double s = x(ii, j);
            for (std::size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * x(k, j);
            x(ii, j) = s / l(ii, ii);
        }
    }
    return x;
}

inline double chol_logdet(const CholeskyFactor& f) {
    double s = 0.0;
    for (std::size_t i = 0; i < f.dim(); ++i) s += std::log(f.l(i, i));
    return 2.0 * s;
}

inline Matrix chol_inverse(const CholeskyFactor& f) {
    return chol_solve(f, Matrix::identity(f.dim()));
}

}  // namespace fit
