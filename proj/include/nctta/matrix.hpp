#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "nctta/errors.hpp"

namespace nctta {

// Dense row-major float64 matrix. Row vectors are 1xC, column vectors Rx1.
struct Matrix {
    int rows{0};
    int cols{0};
    std::vector<double> data; // rows*cols, row-major

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {}

    static Matrix zeros(int r, int c) { return Matrix(r, c); }
    static Matrix full(int r, int c, double v) {
        Matrix m(r, c);
        std::fill(m.data.begin(), m.data.end(), v);
        return m;
    }
    static Matrix identity(int n) {
        Matrix m(n, n);
        for (int i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }
    static Matrix row_vector(std::vector<double> v) {
        Matrix m;
        m.rows = 1;
        m.cols = static_cast<int>(v.size());
        m.data = std::move(v);
        return m;
    }
    static Matrix col_vector(std::vector<double> v) {
        Matrix m;
        m.rows = static_cast<int>(v.size());
        m.cols = 1;
        m.data = std::move(v);
        return m;
    }

    double& operator()(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    double operator()(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

    size_t size() const { return data.size(); }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
    bool is_scalar() const { return rows == 1 && cols == 1; }

    std::vector<double> row(int r) const {
        return {data.begin() + static_cast<ptrdiff_t>(r) * cols,
                data.begin() + static_cast<ptrdiff_t>(r + 1) * cols};
    }
    void set_row(int r, const std::vector<double>& v) {
        for (int c = 0; c < cols; ++c) (*this)(r, c) = v[static_cast<size_t>(c)];
    }

    std::string shape_str() const {
        return std::to_string(rows) + "x" + std::to_string(cols);
    }
};

inline bool all_finite(const Matrix& m) {
    for (double v : m.data)
        if (!std::isfinite(v)) return false;
    return true;
}

// Standard product; throws ShapeError naming both shapes on inner-dim mismatch.
Matrix matmul(const Matrix& a, const Matrix& b);

Matrix transpose(const Matrix& m);

// Norm floor below which a vector is considered degenerate.
inline constexpr double kDegenerateNorm = 1e-12;

double l2_norm(const std::vector<double>& v);

// Unit-norm copy; throws DegenerateVectorError when the norm is under 1e-12.
// `what` names the offending vector in the error message.
std::vector<double> l2_normalized(const std::vector<double>& v, const std::string& what = "vector");

// Row-wise unit normalization of each matrix row. Error messages name the row.
Matrix l2_normalized_rows(const Matrix& m, const std::string& what = "matrix");

// Max-shifted softmax over a vector.
std::vector<double> softmax(const std::vector<double>& z);

int argmax(const std::vector<double>& v); // ties -> lowest index

} // namespace nctta
