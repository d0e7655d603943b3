#include "nctta/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

namespace nctta {

namespace {

void check_finite(const Matrix& m, const char* opname) {
    if (!all_finite(m)) throw NonFiniteError(std::string(opname) + ": non-finite output");
}

// Reads b(i, j) under the broadcast mode validated by check_broadcast.
inline double broadcast_at(const Matrix& a, const Matrix& b, int i, int j) {
    if (b.same_shape(a)) return b(i, j);
    if (b.rows == 1 && b.cols == a.cols) return b(0, j);
    return b(i, 0);
}

} // namespace

Var Tape::push(Node n) {
    check_finite(n.val, "tape op");
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

const Tape::Node& Tape::node(Var v) const { return nodes_[static_cast<size_t>(v.id)]; }

Var Tape::input(Matrix v) {
    Node n;
    n.op = Op::Leaf;
    n.val = std::move(v);
    return push(std::move(n));
}

Var Tape::param(Matrix v) {
    Node n;
    n.op = Op::Leaf;
    n.val = std::move(v);
    n.is_param = true;
    return push(std::move(n));
}

void Tape::check_broadcast(const Matrix& a, const Matrix& b, const char* opname) {
    const bool same = a.same_shape(b);
    const bool row = b.rows == 1 && b.cols == a.cols;
    const bool col = b.cols == 1 && b.rows == a.rows;
    if (!(same || row || col)) {
        throw ShapeError(std::string(opname) + ": shapes " + a.shape_str() + " and " +
                         b.shape_str() + " are not broadcastable");
    }
}

Var Tape::add(Var a, Var b) {
    const Matrix& A = node(a).val;
    const Matrix& B = node(b).val;
    check_broadcast(A, B, "add");
    Node n;
    n.op = Op::Add;
    n.a = a.id;
    n.b = b.id;
    n.val = Matrix(A.rows, A.cols);
    for (int i = 0; i < A.rows; ++i)
        for (int j = 0; j < A.cols; ++j) {
            const double bv = broadcast_at(A, B, i, j);
            n.val(i, j) = A(i, j) + bv;
        }
    return push(std::move(n));
}

Var Tape::sub(Var a, Var b) {
    const Matrix& A = node(a).val;
    const Matrix& B = node(b).val;
    check_broadcast(A, B, "sub");
    Node n;
    n.op = Op::Sub;
    n.a = a.id;
    n.b = b.id;
    n.val = Matrix(A.rows, A.cols);
    for (int i = 0; i < A.rows; ++i)
        for (int j = 0; j < A.cols; ++j) {
            const double bv = broadcast_at(A, B, i, j);
            n.val(i, j) = A(i, j) - bv;
        }
    return push(std::move(n));
}

Var Tape::mul(Var a, Var b) {
    const Matrix& A = node(a).val;
    const Matrix& B = node(b).val;
    check_broadcast(A, B, "mul");
    Node n;
    n.op = Op::Mul;
    n.a = a.id;
    n.b = b.id;
    n.val = Matrix(A.rows, A.cols);
    for (int i = 0; i < A.rows; ++i)
        for (int j = 0; j < A.cols; ++j) {
            const double bv = broadcast_at(A, B, i, j);
            n.val(i, j) = A(i, j) * bv;
        }
    return push(std::move(n));
}

Var Tape::matmul(Var a, Var b) {
    Node n;
    n.op = Op::MatMul;
    n.a = a.id;
    n.b = b.id;
    n.val = nctta::matmul(node(a).val, node(b).val);
    return push(std::move(n));
}

Var Tape::scale(Var a, double c) {
    const Matrix& A = node(a).val;
    Node n;
    n.op = Op::Scale;
    n.a = a.id;
    n.c = c;
    n.val = A;
    for (double& x : n.val.data) x *= c;
    return push(std::move(n));
}

Var Tape::relu(Var a) {
    Node n;
    n.op = Op::Relu;
    n.a = a.id;
    n.val = node(a).val;
    for (double& x : n.val.data) x = x > 0.0 ? x : 0.0;
    return push(std::move(n));
}

Var Tape::tanh(Var a) {
    Node n;
    n.op = Op::Tanh;
    n.a = a.id;
    n.val = node(a).val;
    for (double& x : n.val.data) x = std::tanh(x);
    return push(std::move(n));
}

Var Tape::exp(Var a) {
    Node n;
    n.op = Op::Exp;
    n.a = a.id;
    n.val = node(a).val;
    for (double& x : n.val.data) x = std::exp(x);
    return push(std::move(n));
}

Var Tape::log(Var a) {
    Node n;
    n.op = Op::Log;
    n.a = a.id;
    n.val = node(a).val;
    for (double& x : n.val.data) x = std::log(x);
    return push(std::move(n));
}

Var Tape::sqrt(Var a) {
    Node n;
    n.op = Op::Sqrt;
    n.a = a.id;
    n.val = node(a).val;
    for (double& x : n.val.data) x = std::sqrt(x);
    return push(std::move(n));
}

Var Tape::sum(Var a) {
    Node n;
    n.op = Op::Sum;
    n.a = a.id;
    n.val = Matrix(1, 1);
    double s = 0.0;
    for (double x : node(a).val.data) s += x;
    n.val(0, 0) = s;
    return push(std::move(n));
}

Var Tape::mean(Var a) {
    Node n;
    n.op = Op::Mean;
    n.a = a.id;
    n.val = Matrix(1, 1);
    double s = 0.0;
    for (double x : node(a).val.data) s += x;
    n.val(0, 0) = s / static_cast<double>(node(a).val.size());
    return push(std::move(n));
}

Var Tape::row_sum(Var a) {
    const Matrix& A = node(a).val;
    Node n;
    n.op = Op::RowSum;
    n.a = a.id;
    n.val = Matrix(A.rows, 1);
    for (int i = 0; i < A.rows; ++i) {
        double s = 0.0;
        for (int j = 0; j < A.cols; ++j) s += A(i, j);
        n.val(i, 0) = s;
    }
    return push(std::move(n));
}

Var Tape::row_max(Var a) {
    const Matrix& A = node(a).val;
    Node n;
    n.op = Op::RowMax;
    n.a = a.id;
    n.val = Matrix(A.rows, 1);
    n.idx.resize(static_cast<size_t>(A.rows));
    for (int i = 0; i < A.rows; ++i) {
        int best = 0;
        for (int j = 1; j < A.cols; ++j)
            if (A(i, j) > A(i, best)) best = j;
        n.idx[static_cast<size_t>(i)] = best;
        n.val(i, 0) = A(i, best);
    }
    return push(std::move(n));
}

Var Tape::index_select(Var a, const std::vector<int>& col_index) {
    const Matrix& A = node(a).val;
    if (static_cast<int>(col_index.size()) != A.rows)
        throw ShapeError("index_select: need one column index per row");
    Node n;
    n.op = Op::IndexSelect;
    n.a = a.id;
    n.idx = col_index;
    n.val = Matrix(A.rows, 1);
    for (int i = 0; i < A.rows; ++i) {
        const int j = col_index[static_cast<size_t>(i)];
        if (j < 0 || j >= A.cols)
            throw InvalidArgument("index_select: column " + std::to_string(j) +
                                  " out of range for " + A.shape_str());
        n.val(i, 0) = A(i, j);
    }
    return push(std::move(n));
}

Var Tape::l2_normalize_rows(Var a, const std::vector<int>& skip_rows) {
    const Matrix& A = node(a).val;
    Node n;
    n.op = Op::L2NormalizeRows;
    n.a = a.id;
    n.idx = skip_rows;
    n.val = Matrix(A.rows, A.cols);
    n.aux.resize(static_cast<size_t>(A.rows));
    for (int i = 0; i < A.rows; ++i) {
        if (std::find(skip_rows.begin(), skip_rows.end(), i) != skip_rows.end()) {
            n.aux[static_cast<size_t>(i)] = 0.0; // row emitted as zeros, no gradient
            continue;
        }
        double s = 0.0;
        for (int j = 0; j < A.cols; ++j) s += A(i, j) * A(i, j);
        const double norm = std::sqrt(s);
        if (norm < kDegenerateNorm)
            throw DegenerateVectorError("l2_normalize: row " + std::to_string(i) +
                                        " has norm below 1e-12");
        n.aux[static_cast<size_t>(i)] = norm;
        for (int j = 0; j < A.cols; ++j) n.val(i, j) = A(i, j) / norm;
    }
    return push(std::move(n));
}

Var Tape::softmax_rows(Var a) {
    const Matrix& A = node(a).val;
    Node n;
    n.op = Op::SoftmaxRows;
    n.a = a.id;
    n.val = Matrix(A.rows, A.cols);
    for (int i = 0; i < A.rows; ++i) {
        double m = A(i, 0);
        for (int j = 1; j < A.cols; ++j) m = std::max(m, A(i, j));
        double sum = 0.0;
        for (int j = 0; j < A.cols; ++j) {
            n.val(i, j) = std::exp(A(i, j) - m);
            sum += n.val(i, j);
        }
        for (int j = 0; j < A.cols; ++j) n.val(i, j) /= sum;
    }
    return push(std::move(n));
}

Var Tape::batch_standardize(Var a, double eps) {
    const Matrix& A = node(a).val;
    if (A.rows < 2)
        throw InvalidArgument("batch_standardize: needs at least 2 rows, got " + A.shape_str());
    Node n;
    n.op = Op::BatchStandardize;
    n.a = a.id;
    n.c = eps;
    n.val = Matrix(A.rows, A.cols);
    auto& [mean, var] = n.stats;
    mean.assign(static_cast<size_t>(A.cols), 0.0);
    var.assign(static_cast<size_t>(A.cols), 0.0);
    const double inv_b = 1.0 / A.rows;
    for (int j = 0; j < A.cols; ++j) {
        double m = 0.0;
        for (int i = 0; i < A.rows; ++i) m += A(i, j);
        m *= inv_b;
        double v = 0.0;
        for (int i = 0; i < A.rows; ++i) {
            const double d = A(i, j) - m;
            v += d * d;
        }
        v *= inv_b;
        mean[static_cast<size_t>(j)] = m;
        var[static_cast<size_t>(j)] = v;
        const double inv_std = 1.0 / std::sqrt(v + eps);
        for (int i = 0; i < A.rows; ++i) n.val(i, j) = (A(i, j) - m) * inv_std;
    }
    return push(std::move(n));
}

const Matrix& Tape::value(Var v) const { return node(v).val; }

double Tape::scalar_value(Var v) const {
    const Matrix& m = node(v).val;
    if (!m.is_scalar()) throw ShapeError("scalar_value: node is " + m.shape_str() + ", not 1x1");
    return m(0, 0);
}

const std::pair<std::vector<double>, std::vector<double>>& Tape::batch_stats(Var v) const {
    const Node& n = node(v);
    if (n.op != Op::BatchStandardize)
        throw InvalidArgument("batch_stats: node is not a batch_standardize node");
    return n.stats;
}

namespace {

// Accumulates g into adj[id], reducing over broadcast dimensions of the
// original operand shape when needed.
void accumulate(std::vector<std::optional<Matrix>>& adj, int id, const Matrix& shape_of,
                const Matrix& g) {
    Matrix reduced;
    if (g.same_shape(shape_of)) {
        reduced = g;
    } else if (shape_of.rows == 1 && shape_of.cols == g.cols) {
        reduced = Matrix(1, g.cols);
        for (int i = 0; i < g.rows; ++i)
            for (int j = 0; j < g.cols; ++j) reduced(0, j) += g(i, j);
    } else if (shape_of.cols == 1 && shape_of.rows == g.rows) {
        reduced = Matrix(g.rows, 1);
        for (int i = 0; i < g.rows; ++i)
            for (int j = 0; j < g.cols; ++j) reduced(i, 0) += g(i, j);
    } else {
        throw ShapeError("backward: cannot reduce adjoint " + g.shape_str() + " to " +
                         shape_of.shape_str());
    }
    auto& slot = adj[static_cast<size_t>(id)];
    if (!slot) {
        slot = std::move(reduced);
    } else {
        for (size_t i = 0; i < slot->data.size(); ++i) slot->data[i] += reduced.data[i];
    }
}

} // namespace

GradMap Tape::backward(Var loss) const {
    const Matrix& lv = node(loss).val;
    if (!lv.is_scalar())
        throw ShapeError("backward: loss must be a 1x1 scalar, got " + lv.shape_str());

    std::vector<std::optional<Matrix>> adj(nodes_.size());
    adj[static_cast<size_t>(loss.id)] = Matrix::full(1, 1, 1.0);

    for (int id = loss.id; id >= 0; --id) {
        const auto& slot = adj[static_cast<size_t>(id)];
        if (!slot) continue;
        const Matrix& g = *slot;
        const Node& n = nodes_[static_cast<size_t>(id)];
        const Matrix* A = n.a >= 0 ? &nodes_[static_cast<size_t>(n.a)].val : nullptr;
        const Matrix* B = n.b >= 0 ? &nodes_[static_cast<size_t>(n.b)].val : nullptr;

        switch (n.op) {
        case Op::Leaf:
            break;
        case Op::Add:
            accumulate(adj, n.a, *A, g);
            accumulate(adj, n.b, *B, g);
            break;
        case Op::Sub: {
            accumulate(adj, n.a, *A, g);
            Matrix neg = g;
            for (double& x : neg.data) x = -x;
            accumulate(adj, n.b, *B, neg);
            break;
        }
        case Op::Mul: {
            // d(a*b)/da = b (broadcast), d/db = a reduced over broadcast dims.
            Matrix ga(A->rows, A->cols);
            Matrix gb_full(A->rows, A->cols);
            for (int i = 0; i < A->rows; ++i)
                for (int j = 0; j < A->cols; ++j) {
                    const double bv = broadcast_at(*A, *B, i, j);
                    ga(i, j) = g(i, j) * bv;
                    gb_full(i, j) = g(i, j) * (*A)(i, j);
                }
            accumulate(adj, n.a, *A, ga);
            accumulate(adj, n.b, *B, gb_full);
            break;
        }
        case Op::MatMul: {
            accumulate(adj, n.a, *A, nctta::matmul(g, transpose(*B)));
            accumulate(adj, n.b, *B, nctta::matmul(transpose(*A), g));
            break;
        }
        case Op::Scale: {
            Matrix ga = g;
            for (double& x : ga.data) x *= n.c;
            accumulate(adj, n.a, *A, ga);
            break;
        }
        case Op::Relu: {
            Matrix ga = g;
            for (size_t i = 0; i < ga.data.size(); ++i)
                if (A->data[i] <= 0.0) ga.data[i] = 0.0;
            accumulate(adj, n.a, *A, ga);
            break;
        }
        case Op::Tanh: {
            Matrix ga = g;
            for (size_t i = 0; i < ga.data.size(); ++i)
                ga.data[i] *= 1.0 - n.val.data[i] * n.val.data[i];
            accumulate(adj, n.a, *A, ga);
            break;
        }
        case Op::Exp: {
            Matrix ga = g;
            for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] *= n.val.data[i];
            accumulate(adj, n.a, *A, ga);
            break;
        }
        case Op::Log: {
            Matrix ga = g;
            for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] /= A->data[i];
            accumulate(adj, n.a, *A, ga);
            break;
        }
        case Op::Sqrt: {
            // Divisor clamp keeps relu(0) -> sqrt chains at 0 instead of NaN.
            Matrix ga = g;
            for (size_t i = 0; i < ga.data.size(); ++i)
                ga.data[i] *= 0.5 / std::max(n.val.data[i], 1e-150);
            accumulate(adj, n.a, *A, ga);
            break;
        }
        case Op::Sum: {
            accumulate(adj, n.a, *A, Matrix::full(A->rows, A->cols, g(0, 0)));
            break;
        }
        case Op::Mean: {
            accumulate(adj, n.a, *A,
                       Matrix::full(A->rows, A->cols, g(0, 0) / static_cast<double>(A->size())));
            break;
        }
        case Op::RowSum: {
            Matrix ga(A->rows, A->cols);
            for (int i = 0; i < A->rows; ++i)
                for (int j = 0; j < A->cols; ++j) ga(i, j) = g(i, 0);
            accumulate(adj, n.a, *A, ga);
            break;
        }
        case Op::RowMax: {
            Matrix ga(A->rows, A->cols);
            for (int i = 0; i < A->rows; ++i) ga(i, n.idx[static_cast<size_t>(i)]) = g(i, 0);
            accumulate(adj, n.a, *A, ga);
            break;
        }
        case Op::IndexSelect: {
            Matrix ga(A->rows, A->cols);
            for (int i = 0; i < A->rows; ++i) ga(i, n.idx[static_cast<size_t>(i)]) += g(i, 0);
            accumulate(adj, n.a, *A, ga);
            break;
        }
        case Op::L2NormalizeRows: {
            // y = x / |x|; dy/dx = (I - y y^T) / |x| per row. Skipped rows carry none.
            Matrix ga(A->rows, A->cols);
            for (int i = 0; i < A->rows; ++i) {
                const double norm = n.aux[static_cast<size_t>(i)];
                if (norm == 0.0) continue;
                double dot = 0.0;
                for (int j = 0; j < A->cols; ++j) dot += g(i, j) * n.val(i, j);
                for (int j = 0; j < A->cols; ++j)
                    ga(i, j) = (g(i, j) - dot * n.val(i, j)) / norm;
            }
            accumulate(adj, n.a, *A, ga);
            break;
        }
        case Op::SoftmaxRows: {
            Matrix ga(A->rows, A->cols);
            for (int i = 0; i < A->rows; ++i) {
                double dot = 0.0;
                for (int j = 0; j < A->cols; ++j) dot += g(i, j) * n.val(i, j);
                for (int j = 0; j < A->cols; ++j)
                    ga(i, j) = n.val(i, j) * (g(i, j) - dot);
            }
            accumulate(adj, n.a, *A, ga);
            break;
        }
        case Op::BatchStandardize: {
            // Standard batch-norm backward (no affine), biased variance.
            const auto& var = n.stats.second;
            const int rows = A->rows;
            Matrix ga(A->rows, A->cols);
            for (int j = 0; j < A->cols; ++j) {
                const double inv_std = 1.0 / std::sqrt(var[static_cast<size_t>(j)] + n.c);
                double sum_g = 0.0, sum_gx = 0.0;
                for (int i = 0; i < rows; ++i) {
                    sum_g += g(i, j);
                    sum_gx += g(i, j) * n.val(i, j);
                }
                for (int i = 0; i < rows; ++i) {
                    ga(i, j) = inv_std / rows *
                               (rows * g(i, j) - sum_g - n.val(i, j) * sum_gx);
                }
            }
            accumulate(adj, n.a, *A, ga);
            break;
        }
        }
    }

    GradMap grads;
    for (size_t i = 0; i < nodes_.size(); ++i) {
        if (!nodes_[i].is_param) continue;
        if (adj[i]) {
            grads.emplace(static_cast<int>(i), std::move(*adj[i]));
        } else {
            grads.emplace(static_cast<int>(i), Matrix(nodes_[i].val.rows, nodes_[i].val.cols));
        }
    }
    return grads;
}

std::vector<Matrix> finite_diff_grad(const std::function<double(const std::vector<Matrix>&)>& f,
                                     const std::vector<Matrix>& params, double step) {
    if (step <= 0.0) throw InvalidArgument("finite_diff_grad: step must be positive");
    std::vector<Matrix> grads;
    grads.reserve(params.size());
    std::vector<Matrix> work = params;
    for (size_t p = 0; p < params.size(); ++p) {
        Matrix g(params[p].rows, params[p].cols);
        for (size_t i = 0; i < params[p].data.size(); ++i) {
            const double orig = work[p].data[i];
            work[p].data[i] = orig + step;
            const double fp = f(work);
            work[p].data[i] = orig - step;
            const double fm = f(work);
            work[p].data[i] = orig;
            g.data[i] = (fp - fm) / (2.0 * step);
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

} // namespace nctta
