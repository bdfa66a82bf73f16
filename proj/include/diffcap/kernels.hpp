#pragma once

// Matrix-multiply kernels, the hot loops of the whole stack. Each kernel has
// a serial reference and an OpenMP variant that distributes output rows;
// per-element accumulation order is identical in both, so results are
// bit-identical and runs stay deterministic regardless of thread count.

namespace diffcap::kernels {

bool parallel_enabled();
void set_parallel(bool enabled);

// c = a * b              a: m x k, b: k x n, c: m x n
void matmul_nn_serial(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_nn_parallel(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_nn(const double* a, const double* b, double* c, int m, int k, int n);

// c = a * b^T            a: m x k, b: n x k, c: m x n
void matmul_nt_serial(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_nt_parallel(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n);

// c = a^T * b            a: m x k, b: m x n, c: k x n
void matmul_tn_serial(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_tn_parallel(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_tn(const double* a, const double* b, double* c, int m, int k, int n);

}  // namespace diffcap::kernels
