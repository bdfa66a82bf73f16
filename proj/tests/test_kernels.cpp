#include "doctest.h"

#include <cstring>

#include "diffcap/kernels.hpp"
#include "diffcap/matrix.hpp"
#include "diffcap/rng.hpp"
#include "oracles.hpp"

using namespace diffcap;

namespace {

Matrix random_matrix(Rng& rng, int r, int c) {
    Matrix m(r, c);
    for (double& v : m.data) v = rng.normal();
    return m;
}

}  // namespace

TEST_CASE("matmul_nn matches the naive oracle") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const int m = 1 + rng.below(40), k = 1 + rng.below(40), n = 1 + rng.below(40);
        Matrix a = random_matrix(rng, m, k);
        Matrix b = random_matrix(rng, k, n);
        Matrix c(m, n);
        kernels::matmul_nn(a.data.data(), b.data.data(), c.data.data(), m, k, n);
        CHECK(oracle::max_abs_diff(c, oracle::mat_nn(oracle::to_vv(a), oracle::to_vv(b))) < 1e-12);
    }
}

TEST_CASE("parallel kernels are bit-identical to the serial reference") {
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        const int m = 1 + rng.below(96), k = 1 + rng.below(96), n = 1 + rng.below(96);
        Matrix a = random_matrix(rng, m, k);
        Matrix bn(k, n), bt(n, k), btm(m, n);
        for (double& v : bn.data) v = rng.normal();
        for (double& v : bt.data) v = rng.normal();
        for (double& v : btm.data) v = rng.normal();

        Matrix cs(m, n), cp(m, n);
        kernels::matmul_nn_serial(a.data.data(), bn.data.data(), cs.data.data(), m, k, n);
        kernels::matmul_nn_parallel(a.data.data(), bn.data.data(), cp.data.data(), m, k, n);
        CHECK(std::memcmp(cs.data.data(), cp.data.data(), cs.size() * sizeof(double)) == 0);

        kernels::matmul_nt_serial(a.data.data(), bt.data.data(), cs.data.data(), m, k, n);
        kernels::matmul_nt_parallel(a.data.data(), bt.data.data(), cp.data.data(), m, k, n);
        CHECK(std::memcmp(cs.data.data(), cp.data.data(), cs.size() * sizeof(double)) == 0);

        Matrix ds(k, n), dp(k, n);
        kernels::matmul_tn_serial(a.data.data(), btm.data.data(), ds.data.data(), m, k, n);
        kernels::matmul_tn_parallel(a.data.data(), btm.data.data(), dp.data.data(), m, k, n);
        CHECK(std::memcmp(ds.data.data(), dp.data.data(), ds.size() * sizeof(double)) == 0);
    }
}

TEST_CASE("nt and tn variants match transposed oracle products") {
    Rng rng(13);
    const int m = 9, k = 7, n = 5;
    Matrix a = random_matrix(rng, m, k);
    Matrix b = random_matrix(rng, n, k);
    Matrix c(m, n);
    kernels::matmul_nt(a.data.data(), b.data.data(), c.data.data(), m, k, n);
    auto bt = oracle::zeros(k, n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < k; ++j) bt[j][i] = b(i, j);
    }
    CHECK(oracle::max_abs_diff(c, oracle::mat_nn(oracle::to_vv(a), bt)) < 1e-12);

    Matrix b2 = random_matrix(rng, m, n);
    Matrix c2(k, n);
    kernels::matmul_tn(a.data.data(), b2.data.data(), c2.data.data(), m, k, n);
    auto at = oracle::zeros(k, m);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < k; ++j) at[j][i] = a(i, j);
    }
    CHECK(oracle::max_abs_diff(c2, oracle::mat_nn(at, oracle::to_vv(b2))) < 1e-12);
}
