#include "doctest.h"

#include <cmath>

#include "diffcap/rng.hpp"
#include "diffcap/tape.hpp"
#include "oracles.hpp"

using namespace diffcap;

namespace {

Matrix random_matrix(Rng& rng, int r, int c, double scale = 1.0) {
    Matrix m(r, c);
    for (double& v : m.data) v = scale * rng.normal();
    return m;
}

// Scalarizes an arbitrary output by a fixed random weighting so every entry
// contributes to the gradient.
double weighted_sum(const Matrix& m, const Matrix& w) {
    double s = 0.0;
    for (size_t i = 0; i < m.data.size(); ++i) s += m.data[i] * w.data[i];
    return s;
}

}  // namespace

TEST_CASE("gradients of elementary ops match finite differences") {
    Rng rng(42);
    Matrix a0 = random_matrix(rng, 3, 4);
    Matrix b0 = random_matrix(rng, 4, 5);
    Matrix c0 = random_matrix(rng, 3, 5);
    Matrix v0 = random_matrix(rng, 1, 5);
    Matrix g0 = random_matrix(rng, 1, 4);
    g0.fill(1.0);
    Matrix be0 = random_matrix(rng, 1, 4, 0.1);
    Matrix wsum = random_matrix(rng, 3, 5);

    auto forward = [&](Tape& t, Binder*) {
        Var a = t.leaf(a0);
        Var b = t.leaf(b0);
        Var c = t.leaf(c0);
        Var v = t.leaf(v0);
        Var g = t.leaf(g0);
        Var be = t.leaf(be0);
        Var ab = matmul(t, a, b);                       // 3x5
        Var s = sigmoid(t, ab);
        Var h = mul(t, s, c);
        Var sm = softmax_rows(t, h);
        Var ln = layer_norm(t, a, g, be);               // 3x4
        Var cat = concat_cols(t, {sm, ln});             // 3x9
        Var sl = slice_cols(t, cat, 2, 7);              // 3x5
        Var rv = add_rowvec(t, sl, v);
        Var gl = gelu(t, rv);
        Var mr = mean_rows(t, gl);                      // 1x5
        Var up = mul_rowvec(t, gl, mr);
        return std::pair{up, std::vector<Var>{a, b, c, v, g, be}};
    };

    Tape t;
    auto [out, leaves] = forward(t, nullptr);
    t.backward(out, wsum);

    Matrix* sources[] = {&a0, &b0, &c0, &v0, &g0, &be0};
    auto eval = [&]() {
        Tape tt;
        auto [o, _] = forward(tt, nullptr);
        return weighted_sum(tt.val(o), wsum);
    };
    for (int i = 0; i < 6; ++i) {
        const Matrix analytic = t.grad(leaves[i]);
        REQUIRE(!analytic.empty());
        const double err = oracle::fd_max_rel_error(*sources[i], analytic, eval);
        CHECK(err < 1e-6);
    }
}

TEST_CASE("matmul_nt, sub, scale, concat_rows, slice_rows, gather gradients") {
    Rng rng(43);
    Matrix a0 = random_matrix(rng, 4, 3);
    Matrix w0 = random_matrix(rng, 6, 3);
    Matrix t0 = random_matrix(rng, 5, 3);
    Matrix wsum = random_matrix(rng, 4, 6);
    std::vector<int> ids = {1, 4, 0, 2};

    auto run = [&](Tape& t, std::vector<Var>& leaves) {
        Var a = t.leaf(a0);
        Var w = t.leaf(w0);
        Var tab = t.leaf(t0);
        leaves = {a, w, tab};
        Var gathered = gather_rows(t, tab, ids);         // 4x3
        Var d = sub(t, a, gathered);
        Var sc = scale(t, d, 1.7);
        Var stacked = concat_rows(t, {sc, a});           // 8x3
        Var cut = slice_rows(t, stacked, 1, 5);          // 4x3
        return matmul_nt(t, cut, w);                     // 4x6
    };

    Tape t;
    std::vector<Var> leaves;
    Var out = run(t, leaves);
    t.backward(out, wsum);

    Matrix* sources[] = {&a0, &w0, &t0};
    auto eval = [&]() {
        Tape tt;
        std::vector<Var> lv;
        Var o = run(tt, lv);
        return weighted_sum(tt.val(o), wsum);
    };
    for (int i = 0; i < 3; ++i) {
        const double err = oracle::fd_max_rel_error(*sources[i], t.grad(leaves[i]), eval);
        CHECK(err < 1e-6);
    }
}

TEST_CASE("masked cross entropy ignores masked rows and matches finite differences") {
    Rng rng(44);
    Matrix logits0 = random_matrix(rng, 5, 7);
    std::vector<int> targets = {2, 5, 1, 0, 6};
    std::vector<double> mask = {0.0, 1.0, 1.0, 0.0, 1.0};

    auto eval = [&]() {
        Tape tt;
        Var l = tt.leaf(logits0);
        Var loss = cross_entropy_masked(tt, l, targets, mask);
        return tt.val(loss)(0, 0);
    };

    Tape t;
    Var l = t.leaf(logits0);
    Var loss = cross_entropy_masked(t, l, targets, mask);
    t.backward(loss);
    const double err = oracle::fd_max_rel_error(logits0, t.grad(l), eval);
    CHECK(err < 1e-6);

    // Perturbing a masked target leaves the loss untouched.
    const double before = eval();
    targets[0] = 3;
    targets[3] = 1;
    CHECK(eval() == before);

    // Gradient rows under mask stay exactly zero.
    const Matrix& g = t.grad(l);
    for (int j = 0; j < g.cols; ++j) {
        CHECK(g(0, j) == 0.0);
        CHECK(g(3, j) == 0.0);
    }
}

TEST_CASE("softmax rows sum to one and masked entries get zero probability") {
    Rng rng(45);
    Matrix x0 = random_matrix(rng, 6, 6);
    Tape t;
    Var x = t.leaf(x0);
    Var sm = softmax_rows_masked(t, x, causal_mask(6));
    const Matrix& y = t.val(sm);
    for (int i = 0; i < 6; ++i) {
        double sum = 0.0;
        for (int j = 0; j < 6; ++j) {
            sum += y(i, j);
            if (j > i) CHECK(y(i, j) == doctest::Approx(0.0).epsilon(1e-30));
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
}
