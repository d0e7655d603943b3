#include <doctest.h>

#include <cmath>
#include <cstring>

#include "nctta/autodiff.hpp"
#include "nctta/matrix.hpp"
#include "nctta/rng.hpp"

using namespace nctta;

namespace {

// Relative error with a unit floor so near-zero gradients are judged on an
// absolute 1e-5 scale.
double grad_err(double analytic, double fd) {
    return std::abs(analytic - fd) / std::max({1.0, std::abs(analytic), std::abs(fd)});
}

Matrix random_matrix(Rng& rng, int r, int c, double lo = -1.0, double hi = 1.0) {
    Matrix m(r, c);
    for (double& x : m.data) x = rng.uniform(lo, hi);
    return m;
}

// Draws with |x| >= margin so kinked ops (relu) stay FD-checkable.
Matrix random_matrix_away_from_zero(Rng& rng, int r, int c, double margin) {
    Matrix m(r, c);
    for (double& x : m.data) {
        x = rng.uniform(-1.0, 1.0);
        if (std::abs(x) < margin) x = x < 0 ? x - margin : x + margin;
    }
    return m;
}

// Checks tape gradients of a scalar-valued builder against central
// differences for every parameter.
void gradcheck(const std::function<Var(Tape&, const std::vector<Var>&)>& build,
               const std::vector<Matrix>& params, double tol = 1e-5) {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& p : params) leaves.push_back(tape.param(p));
    Var loss = build(tape, leaves);
    GradMap grads = tape.backward(loss);

    auto value_of = [&](const std::vector<Matrix>& ps) {
        Tape t;
        std::vector<Var> ls;
        for (const auto& p : ps) ls.push_back(t.input(p));
        return t.scalar_value(build(t, ls));
    };
    const auto fd = finite_diff_grad(value_of, params, 1e-5);
    for (size_t p = 0; p < params.size(); ++p) {
        const Matrix& g = grads.at(leaves[p].id);
        for (size_t i = 0; i < g.data.size(); ++i) {
            CAPTURE(p);
            CAPTURE(i);
            CHECK(grad_err(g.data[i], fd[p].data[i]) <= tol);
        }
    }
}

} // namespace

TEST_CASE("matmul identity and scalar cases") {
    Matrix m(2, 3);
    Rng rng(3);
    for (double& x : m.data) x = rng.uniform(-2, 2);
    const Matrix out = matmul(Matrix::identity(2), m);
    for (size_t i = 0; i < m.data.size(); ++i) CHECK(out.data[i] == doctest::Approx(m.data[i]));

    Matrix a = Matrix::full(1, 1, 2.0);
    Matrix b = Matrix::full(1, 1, 3.0);
    CHECK(matmul(a, b)(0, 0) == 6.0);
}

TEST_CASE("matmul matches a naive triple-loop oracle") {
    Rng rng(11);
    const Matrix a = random_matrix(rng, 3, 4);
    const Matrix b = random_matrix(rng, 4, 2);
    const Matrix got = matmul(a, b);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 2; ++j) {
            double acc = 0.0;
            for (int k = 0; k < 4; ++k) acc += a(i, k) * b(k, j);
            CHECK(std::abs(got(i, j) - acc) <= 1e-12);
        }
}

TEST_CASE("matmul dimension mismatch names both shapes") {
    Matrix a(2, 3), b(4, 2);
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("2x3"), ShapeError);
}

TEST_CASE("l2_normalize on the 3-4-5 triangle") {
    const auto out = l2_normalized({3.0, 4.0});
    CHECK(out[0] == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(out[1] == doctest::Approx(0.8).epsilon(1e-12));
}

TEST_CASE("l2_normalize is idempotent on unit vectors") {
    const auto u = l2_normalized({1.0, 2.0, -2.0});
    const auto again = l2_normalized(u);
    for (size_t i = 0; i < u.size(); ++i) CHECK(std::abs(u[i] - again[i]) <= 1e-15);
}

TEST_CASE("l2_normalize round-trips through the norm") {
    Rng rng(5);
    const auto v = rng.normal_vector(16);
    const auto out = l2_normalized(v);
    CHECK(std::abs(l2_norm(out) - 1.0) <= 1e-12);
    const double n = l2_norm(v);
    for (size_t i = 0; i < v.size(); ++i) CHECK(std::abs(out[i] * n - v[i]) <= 1e-10);
}

TEST_CASE("l2_normalize rejects degenerate vectors") {
    CHECK_THROWS_AS((void)l2_normalized({0.0, 0.0}), DegenerateVectorError);
    CHECK_THROWS_AS((void)l2_normalized({1e-13, 0.0}), DegenerateVectorError);
}

TEST_CASE("l2_normalize is scale invariant for positive scales") {
    Rng rng(17);
    const auto v = rng.normal_vector(8);
    const auto base = l2_normalized(v);
    for (double c : {1e-6, 1.0, 1e6}) {
        std::vector<double> scaled(v.size());
        for (size_t i = 0; i < v.size(); ++i) scaled[i] = c * v[i];
        const auto out = l2_normalized(scaled);
        for (size_t i = 0; i < v.size(); ++i) CHECK(std::abs(out[i] - base[i]) <= 1e-12);
    }
}

TEST_CASE("softmax symmetry, stability, and the naive oracle") {
    const auto uniform = softmax({0.0, 0.0, 0.0});
    for (double p : uniform) CHECK(p == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

    const auto stable = softmax({1000.0, 0.0});
    CHECK(stable[0] == doctest::Approx(1.0));
    CHECK(stable[1] == doctest::Approx(0.0));
    CHECK(std::isfinite(stable[0]));

    const std::vector<double> z{1.0, 2.0, 3.0};
    const auto got = softmax(z);
    double denom = 0.0;
    for (double x : z) denom += std::exp(x);
    for (size_t i = 0; i < z.size(); ++i)
        CHECK(std::abs(got[i] - std::exp(z[i]) / denom) <= 1e-12);
}

TEST_CASE("softmax sums to one and is shift invariant") {
    Rng rng(23);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> z(6);
        for (double& x : z) x = rng.uniform(-30, 30);
        const auto p = softmax(z);
        double sum = 0.0;
        for (double x : p) sum += x;
        CHECK(std::abs(sum - 1.0) <= 1e-12);

        std::vector<double> shifted = z;
        const double c = rng.uniform(-100, 100);
        for (double& x : shifted) x += c;
        const auto q = softmax(shifted);
        for (size_t i = 0; i < p.size(); ++i) CHECK(std::abs(p[i] - q[i]) <= 1e-12);
    }
}

TEST_CASE("backward of sum gives all-ones, of half squared norm gives the vector") {
    Rng rng(7);
    const Matrix p = random_matrix(rng, 1, 5);
    {
        Tape t;
        Var leaf = t.param(p);
        GradMap g = t.backward(t.sum(leaf));
        for (double x : g.at(leaf.id).data) CHECK(x == 1.0);
    }
    {
        Tape t;
        Var leaf = t.param(p);
        Var loss = t.scale(t.sum(t.mul(leaf, leaf)), 0.5);
        GradMap g = t.backward(loss);
        for (size_t i = 0; i < p.data.size(); ++i)
            CHECK(g.at(leaf.id).data[i] == doctest::Approx(p.data[i]).epsilon(1e-12));
    }
}

TEST_CASE("backward rejects non-scalar losses and skips non-parameter leaves") {
    Tape t;
    Var a = t.param(Matrix::full(2, 2, 1.0));
    Var b = t.input(Matrix::full(2, 2, 2.0));
    Var prod = t.mul(a, b);
    CHECK_THROWS_AS(t.backward(prod), ShapeError);
    GradMap g = t.backward(t.sum(prod));
    CHECK(g.size() == 1);
    CHECK(g.count(a.id) == 1);
}

TEST_CASE("finite_diff_grad on p^2 and on a constant") {
    auto f = [](const std::vector<Matrix>& ps) { return ps[0](0, 0) * ps[0](0, 0); };
    const auto g = finite_diff_grad(f, {Matrix::full(1, 1, 3.0)}, 1e-5);
    CHECK(std::abs(g[0](0, 0) - 6.0) <= 1e-6);

    auto c = [](const std::vector<Matrix>&) { return 42.0; };
    const auto gz = finite_diff_grad(c, {Matrix::full(2, 3, 1.0)}, 1e-5);
    for (double x : gz[0].data) CHECK(x == 0.0);
}

TEST_CASE("entropy-of-softmax gradients agree between tape and finite differences") {
    Rng rng(29);
    for (int trial = 0; trial < 20; ++trial) {
        const Matrix z = random_matrix(rng, 1, 5, -3.0, 3.0);
        gradcheck(
            [](Tape& t, const std::vector<Var>& ls) {
                Var logits = ls[0];
                Var p = t.softmax_rows(logits);
                Var shift = t.row_max(logits);
                Var lse = t.add(t.log(t.row_sum(t.exp(t.sub(logits, shift)))), shift);
                return t.sum(t.sub(lse, t.row_sum(t.mul(p, logits))));
            },
            {z});
    }
}

TEST_CASE("every differentiable primitive passes the finite-difference oracle") {
    for (uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed);
        const Matrix a = random_matrix(rng, 3, 4, -1.5, 1.5);
        const Matrix b = random_matrix(rng, 4, 2, -1.5, 1.5);
        const Matrix w34 = random_matrix(rng, 3, 4);
        const Matrix w32 = random_matrix(rng, 3, 2);
        const Matrix row = random_matrix(rng, 1, 4);
        const Matrix col = random_matrix(rng, 3, 1);

        // matmul with both sides as parameters
        gradcheck(
            [&](Tape& t, const std::vector<Var>& ls) {
                return t.sum(t.mul(t.matmul(ls[0], ls[1]), t.constant(w32)));
            },
            {a, b});
        // add / sub / mul with same-shape, row, and column broadcasts
        gradcheck(
            [&](Tape& t, const std::vector<Var>& ls) {
                Var x = t.add(ls[0], ls[1]);
                x = t.sub(x, ls[2]);
                x = t.mul(x, ls[3]);
                return t.sum(t.mul(x, t.constant(w34)));
            },
            {a, random_matrix(rng, 3, 4), row, col});
        // scale, tanh, exp, log, sqrt chains on safe domains
        gradcheck(
            [&](Tape& t, const std::vector<Var>& ls) {
                Var pos = t.add(t.mul(ls[0], ls[0]), t.constant(Matrix::full(3, 4, 0.5)));
                Var x = t.log(pos);
                x = t.add(x, t.sqrt(pos));
                x = t.add(x, t.tanh(ls[0]));
                x = t.add(x, t.exp(t.scale(ls[0], 0.3)));
                return t.sum(t.mul(x, t.constant(w34)));
            },
            {a});
        // relu away from its kink
        gradcheck(
            [&](Tape& t, const std::vector<Var>& ls) {
                return t.sum(t.mul(t.relu(ls[0]), t.constant(w34)));
            },
            {random_matrix_away_from_zero(rng, 3, 4, 0.05)});
        // reductions: sum, mean, row_sum
        gradcheck(
            [&](Tape& t, const std::vector<Var>& ls) {
                Var combo = t.add(t.scale(t.sum(ls[0]), 0.25), t.mean(ls[0]));
                return t.add(combo, t.sum(t.mul(t.row_sum(ls[0]), t.constant(col))));
            },
            {a});
        // row_max with a forced argmax gap
        {
            Matrix gapped = a;
            for (int i = 0; i < gapped.rows; ++i) gapped(i, i % gapped.cols) += 3.0;
            gradcheck(
                [&](Tape& t, const std::vector<Var>& ls) {
                    return t.sum(t.mul(t.row_max(ls[0]), t.constant(col)));
                },
                {gapped});
        }
        // index_select
        gradcheck(
            [&](Tape& t, const std::vector<Var>& ls) {
                return t.sum(t.mul(t.index_select(ls[0], {2, 0, 3}), t.constant(col)));
            },
            {a});
        // l2_normalize_rows and softmax_rows under random readouts
        gradcheck(
            [&](Tape& t, const std::vector<Var>& ls) {
                Var x = t.add(ls[0], t.constant(Matrix::full(3, 4, 0.7))); // keep norms healthy
                return t.sum(t.mul(t.l2_normalize_rows(x), t.constant(w34)));
            },
            {a});
        gradcheck(
            [&](Tape& t, const std::vector<Var>& ls) {
                return t.sum(t.mul(t.softmax_rows(ls[0]), t.constant(w34)));
            },
            {a});
        // batch_standardize
        gradcheck(
            [&](Tape& t, const std::vector<Var>& ls) {
                return t.sum(t.mul(t.batch_standardize(ls[0], 1e-5), t.constant(w34)));
            },
            {a});
    }
}

TEST_CASE("tape utility errors") {
    Tape t;
    Var a = t.input(Matrix::full(1, 3, 0.0));
    CHECK_THROWS_AS(t.batch_standardize(a, 1e-5), InvalidArgument);
    Var z = t.input(Matrix::full(2, 3, 0.0));
    CHECK_THROWS_AS(t.l2_normalize_rows(z), DegenerateVectorError);
    CHECK_THROWS_AS(t.index_select(z, {0}), ShapeError);
    CHECK_THROWS_AS((void)t.scalar_value(z), ShapeError);
}

TEST_CASE("l2_normalize_rows skip list zeroes rows without gradients") {
    Tape t;
    Matrix m(2, 2);
    m(0, 0) = 3.0;
    m(0, 1) = 4.0; // row 1 stays all-zero
    Var leaf = t.param(m);
    Var norm = t.l2_normalize_rows(leaf, {1});
    CHECK(t.value(norm)(0, 0) == doctest::Approx(0.6));
    CHECK(t.value(norm)(1, 0) == 0.0);
    CHECK(t.value(norm)(1, 1) == 0.0);
    GradMap g = t.backward(t.sum(norm));
    CHECK(std::isfinite(g.at(leaf.id)(0, 0)));
    CHECK(g.at(leaf.id)(1, 0) == 0.0);
    CHECK(g.at(leaf.id)(1, 1) == 0.0);
}

TEST_CASE("rng streams are reproducible and forks diverge") {
    Rng a(42), b(42);
    for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng c(42), d(43);
    bool differs = false;
    for (int i = 0; i < 10 && !differs; ++i) differs = c.next_u64() != d.next_u64();
    CHECK(differs);

    Rng base(7);
    Rng f1 = base.fork(1), f2 = base.fork(2);
    CHECK(f1.next_u64() != f2.next_u64());

    Rng u(3);
    for (int i = 0; i < 1000; ++i) {
        const double x = u.uniform();
        CHECK(x >= 0.0);
        CHECK(x < 1.0);
    }
    Rng n(9);
    double mean = 0.0;
    const int trials = 20000;
    for (int i = 0; i < trials; ++i) mean += n.normal();
    mean /= trials;
    CHECK(std::abs(mean) < 0.05);
}

TEST_CASE("operations are bit-deterministic on identical inputs") {
    Rng rng(31);
    const Matrix a = random_matrix(rng, 4, 4);
    const Matrix b = random_matrix(rng, 4, 4);
    const Matrix c1 = matmul(a, b);
    const Matrix c2 = matmul(a, b);
    CHECK(std::memcmp(c1.data.data(), c2.data.data(), c1.data.size() * sizeof(double)) == 0);
}
