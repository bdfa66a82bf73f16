#include "diffcap/kernels.hpp"

#include <atomic>
#include <cstddef>

namespace diffcap::kernels {

namespace {

std::atomic<bool> g_parallel{true};

// Below this many multiply-adds the omp fork/join overhead dominates.
constexpr long kParallelThreshold = 16384;

}  // namespace

bool parallel_enabled() { return g_parallel.load(std::memory_order_relaxed); }

void set_parallel(bool enabled) { g_parallel.store(enabled, std::memory_order_relaxed); }

void matmul_nn_serial(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        double* ci = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) ci[j] = 0.0;
        const double* ai = a + static_cast<size_t>(i) * k;
        for (int l = 0; l < k; ++l) {
            const double ail = ai[l];
            const double* bl = b + static_cast<size_t>(l) * n;
            for (int j = 0; j < n; ++j) ci[j] += ail * bl[j];
        }
    }
}

void matmul_nn_parallel(const double* a, const double* b, double* c, int m, int k, int n) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        double* ci = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) ci[j] = 0.0;
        const double* ai = a + static_cast<size_t>(i) * k;
        for (int l = 0; l < k; ++l) {
            const double ail = ai[l];
            const double* bl = b + static_cast<size_t>(l) * n;
            for (int j = 0; j < n; ++j) ci[j] += ail * bl[j];
        }
    }
}

void matmul_nn(const double* a, const double* b, double* c, int m, int k, int n) {
    const long work = static_cast<long>(m) * k * n;
    if (parallel_enabled() && work >= kParallelThreshold) {
        matmul_nn_parallel(a, b, c, m, k, n);
    } else {
        matmul_nn_serial(a, b, c, m, k, n);
    }
}

void matmul_nt_serial(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<size_t>(i) * k;
        double* ci = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* bj = b + static_cast<size_t>(j) * k;
            double acc = 0.0;
            for (int l = 0; l < k; ++l) acc += ai[l] * bj[l];
            ci[j] = acc;
        }
    }
}

void matmul_nt_parallel(const double* a, const double* b, double* c, int m, int k, int n) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<size_t>(i) * k;
        double* ci = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* bj = b + static_cast<size_t>(j) * k;
            double acc = 0.0;
            for (int l = 0; l < k; ++l) acc += ai[l] * bj[l];
            ci[j] = acc;
        }
    }
}

void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n) {
    const long work = static_cast<long>(m) * k * n;
    if (parallel_enabled() && work >= kParallelThreshold) {
        matmul_nt_parallel(a, b, c, m, k, n);
    } else {
        matmul_nt_serial(a, b, c, m, k, n);
    }
}

void matmul_tn_serial(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int l = 0; l < k; ++l) {
        double* cl = c + static_cast<size_t>(l) * n;
        for (int j = 0; j < n; ++j) cl[j] = 0.0;
        for (int i = 0; i < m; ++i) {
            const double ail = a[static_cast<size_t>(i) * k + l];
            const double* bi = b + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) cl[j] += ail * bi[j];
        }
    }
}

void matmul_tn_parallel(const double* a, const double* b, double* c, int m, int k, int n) {
#pragma omp parallel for schedule(static)
    for (int l = 0; l < k; ++l) {
        double* cl = c + static_cast<size_t>(l) * n;
        for (int j = 0; j < n; ++j) cl[j] = 0.0;
        for (int i = 0; i < m; ++i) {
            const double ail = a[static_cast<size_t>(i) * k + l];
            const double* bi = b + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) cl[j] += ail * bi[j];
        }
    }
}

void matmul_tn(const double* a, const double* b, double* c, int m, int k, int n) {
    const long work = static_cast<long>(m) * k * n;
    if (parallel_enabled() && work >= kParallelThreshold) {
        matmul_tn_parallel(a, b, c, m, k, n);
    } else {
        matmul_tn_serial(a, b, c, m, k, n);
    }
}

}  // namespace diffcap::kernels
