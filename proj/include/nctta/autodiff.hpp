#pragma once

#include <cstdint>
#include <functional>
#include <unordered_map>
#include <vector>

#include "nctta/matrix.hpp"

namespace nctta {

// Handle to a node on a Tape. Only valid for the tape that produced it.
struct Var {
    int id{-1};
    bool valid() const { return id >= 0; }
};

using GradMap = std::unordered_map<int, Matrix>; // param node id -> gradient

// Reverse-mode tape over a small closed primitive set. Nodes are appended
// in evaluation order, which is already topological; backward walks the
// list once in reverse. One tape per forward/backward pass; tapes are not
// shared between threads.
//
// Conventions: relu'(0) = 0; row_max routes the adjoint to the first
// maximal column; sqrt backward clamps its divisor away from zero so that
// relu(0) upstream yields 0 rather than NaN.
class Tape {
  public:
    // Leaves. Parameters receive gradients from backward(); inputs do not.
    Var input(Matrix v);
    Var param(Matrix v);
    Var constant(Matrix v) { return input(std::move(v)); }

    // Binary ops accept equal shapes, a 1xC row broadcast against the rows
    // of a, or an Rx1 column broadcast against the columns of a.
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var matmul(Var a, Var b);
    Var scale(Var a, double c);

    Var relu(Var a);
    Var tanh(Var a);
    Var exp(Var a);
    Var log(Var a);
    Var sqrt(Var a);

    Var sum(Var a);     // 1x1
    Var mean(Var a);    // 1x1
    Var row_sum(Var a); // Rx1
    Var row_max(Var a); // Rx1, subgradient at first argmax

    // out(i, 0) = a(i, col_index[i]); adjoint scatters back.
    Var index_select(Var a, const std::vector<int>& col_index);

    // Unit-normalizes each row; throws DegenerateVectorError on rows with
    // norm < 1e-12. Rows listed in skip_rows are emitted as zeros and carry
    // no gradient (callers exclude those samples from the loss and log them).
    Var l2_normalize_rows(Var a, const std::vector<int>& skip_rows = {});

    // Row-wise max-shifted softmax.
    Var softmax_rows(Var a);

    // Column-wise standardization with batch statistics (biased variance).
    // Requires at least 2 rows. Batch mean/var are retrievable afterwards
    // via batch_stats() for running-statistics bookkeeping.
    Var batch_standardize(Var a, double eps);

    const Matrix& value(Var v) const;
    double scalar_value(Var v) const; // throws ShapeError if not 1x1

    // Batch mean and biased variance recorded by a batch_standardize node.
    const std::pair<std::vector<double>, std::vector<double>>& batch_stats(Var v) const;

    // Gradients of a scalar loss with respect to every parameter leaf.
    // Throws ShapeError if loss is not 1x1. Non-parameter leaves are skipped.
    GradMap backward(Var loss) const;

    size_t node_count() const { return nodes_.size(); }

  private:
    enum class Op : uint8_t {
        Leaf,
        Add,
        Sub,
        Mul,
        MatMul,
        Scale,
        Relu,
        Tanh,
        Exp,
        Log,
        Sqrt,
        Sum,
        Mean,
        RowSum,
        RowMax,
        IndexSelect,
        L2NormalizeRows,
        SoftmaxRows,
        BatchStandardize,
    };

    struct Node {
        Op op{Op::Leaf};
        int a{-1};
        int b{-1};
        Matrix val;
        bool is_param{false};
        double c{0.0};                 // Scale factor / BatchStandardize eps
        std::vector<int> idx;          // IndexSelect targets, RowMax argmax, skip rows
        std::vector<double> aux;       // L2NormalizeRows row norms
        std::pair<std::vector<double>, std::vector<double>> stats; // BatchStandardize
    };

    Var push(Node n);
    const Node& node(Var v) const;
    static void check_broadcast(const Matrix& a, const Matrix& b, const char* opname);

    std::vector<Node> nodes_;
};

// Central-difference gradient oracle: perturbs every coordinate of every
// parameter matrix by +-step and re-evaluates f. Independent of the tape.
std::vector<Matrix> finite_diff_grad(const std::function<double(const std::vector<Matrix>&)>& f,
                                     const std::vector<Matrix>& params, double step);

} // namespace nctta
