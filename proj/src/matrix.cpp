#include "nctta/matrix.hpp"

#include <algorithm>
#include <cmath>

namespace nctta {

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) {
        throw ShapeError("matmul: inner dimensions disagree, " + a.shape_str() + " x " +
                         b.shape_str());
    }
    Matrix out(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        for (int k = 0; k < a.cols; ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            for (int j = 0; j < b.cols; ++j) out(i, j) += aik * b(k, j);
        }
    }
    return out;
}

Matrix transpose(const Matrix& m) {
    Matrix out(m.cols, m.rows);
    for (int i = 0; i < m.rows; ++i)
        for (int j = 0; j < m.cols; ++j) out(j, i) = m(i, j);
    return out;
}

double l2_norm(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

std::vector<double> l2_normalized(const std::vector<double>& v, const std::string& what) {
    const double n = l2_norm(v);
    if (n < kDegenerateNorm) {
        throw DegenerateVectorError("l2_normalize: " + what + " has norm " + std::to_string(n) +
                                    " below 1e-12");
    }
    std::vector<double> out(v.size());
    for (size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
    return out;
}

Matrix l2_normalized_rows(const Matrix& m, const std::string& what) {
    Matrix out(m.rows, m.cols);
    for (int i = 0; i < m.rows; ++i) {
        double s = 0.0;
        for (int j = 0; j < m.cols; ++j) s += m(i, j) * m(i, j);
        const double n = std::sqrt(s);
        if (n < kDegenerateNorm) {
            throw DegenerateVectorError("l2_normalize: row " + std::to_string(i) + " of " + what +
                                        " has norm below 1e-12");
        }
        for (int j = 0; j < m.cols; ++j) out(i, j) = m(i, j) / n;
    }
    return out;
}

std::vector<double> softmax(const std::vector<double>& z) {
    // The max shift is mandatory: large logits are the common case here.
    const double m = *std::max_element(z.begin(), z.end());
    std::vector<double> out(z.size());
    double sum = 0.0;
    for (size_t i = 0; i < z.size(); ++i) {
        out[i] = std::exp(z[i] - m);
        sum += out[i];
    }
    for (double& p : out) p /= sum;
    return out;
}

int argmax(const std::vector<double>& v) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(v.size()); ++i)
        if (v[static_cast<size_t>(i)] > v[static_cast<size_t>(best)]) best = i;
    return best;
}

} // namespace nctta
