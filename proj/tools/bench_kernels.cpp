// Timing comparison of the serial reference kernels against the OpenMP
// variants, plus one end-to-end differential-fusion forward in each mode.

#include <chrono>
#include <cstdio>
#include <functional>
#include <vector>

#include "diffcap/kernels.hpp"
#include "diffcap/matrix.hpp"
#include "diffcap/mdp.hpp"
#include "diffcap/rng.hpp"

using namespace diffcap;
using clock_type = std::chrono::steady_clock;

namespace {

double time_ms(const std::function<void()>& fn, int reps) {
    fn();  // warm up
    const auto t0 = clock_type::now();
    for (int i = 0; i < reps; ++i) fn();
    const auto t1 = clock_type::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

}  // namespace

int main() {
    Rng rng(7);
    std::printf("%-10s %-8s %12s %12s %8s\n", "kernel", "size", "serial ms", "openmp ms",
                "speedup");
    for (int n : {64, 128, 256, 384}) {
        Matrix a(n, n), b(n, n), c(n, n);
        for (double& v : a.data) v = rng.normal();
        for (double& v : b.data) v = rng.normal();
        const double serial = time_ms(
            [&] { kernels::matmul_nn_serial(a.data.data(), b.data.data(), c.data.data(), n, n, n); },
            3);
        const double parallel = time_ms(
            [&] {
                kernels::matmul_nn_parallel(a.data.data(), b.data.data(), c.data.data(), n, n, n);
            },
            3);
        std::printf("%-10s %-8d %12.3f %12.3f %8.2fx\n", "matmul_nn", n, serial, parallel,
                    serial / parallel);
        const double serial_nt = time_ms(
            [&] { kernels::matmul_nt_serial(a.data.data(), b.data.data(), c.data.data(), n, n, n); },
            3);
        const double parallel_nt = time_ms(
            [&] {
                kernels::matmul_nt_parallel(a.data.data(), b.data.data(), c.data.data(), n, n, n);
            },
            3);
        std::printf("%-10s %-8d %12.3f %12.3f %8.2fx\n", "matmul_nt", n, serial_nt, parallel_nt,
                    serial_nt / parallel_nt);
    }

    // Whole fusion forward+backward, serial vs parallel dispatch.
    ParamStore ps;
    Rng init(11);
    MdpConfig cfg;
    cfg.channels = 64;
    cfg.attention_heads = 4;
    cfg.mlp_hidden = 128;
    cfg.tapped_layers = {1, 2, 3, 4};
    MdpP mdp = make_mdp(ps, init, cfg);
    const int T = 64;
    std::vector<Matrix> maps;
    for (int i = 0; i < 8; ++i) {
        Matrix m(T, cfg.channels);
        for (double& v : m.data) v = rng.normal();
        maps.push_back(std::move(m));
    }
    Matrix seed_grad(T, cfg.channels);
    seed_grad.fill(1.0);
    auto run_fusion = [&] {
        Tape t;
        Binder bind(t);
        std::vector<Var> p1, p2;
        for (int i = 0; i < 4; ++i) {
            p1.push_back(t.leaf(maps[i]));
            p2.push_back(t.leaf(maps[4 + i]));
        }
        MdpResult r = mdp_forward(t, bind, mdp, p1, p2);
        t.backward(r.fused1, seed_grad);
    };
    kernels::set_parallel(false);
    const double fusion_serial = time_ms(run_fusion, 5);
    kernels::set_parallel(true);
    const double fusion_parallel = time_ms(run_fusion, 5);
    std::printf("%-10s %-8s %12.3f %12.3f %8.2fx\n", "fusion", "T=64x4", fusion_serial,
                fusion_parallel, fusion_serial / fusion_parallel);
    return 0;
}
