// Serial vs OpenMP dense kernels at detector-sized shapes. Reports the
// median wall time of each kernel and checks that both backends produce
// identical bytes.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <random>
#include <vector>

#include <CLI11.hpp>

#include "haloprobe/kernels.hpp"

namespace k = haloprobe::kernels;

namespace {

double median_ms(int reps, const std::function<void()>& fn) {
    std::vector<double> t;
    for (int r = 0; r < reps; ++r) {
        const auto a = std::chrono::steady_clock::now();
        fn();
        t.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - a).count());
    }
    std::ranges::sort(t);
    return t[t.size() / 2];
}

bool same_bytes(const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng) {
    std::normal_distribution<double> d(0.0, 1.0);
    std::vector<double> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"haloprobe_bench: serial vs OpenMP dense kernels"};
    app.option_defaults()->always_capture_default();
    std::size_t n = 128, in = 4102, out = 256;
    int reps = 15;
    app.add_option("--rows", n, "Batch rows");
    app.add_option("--in", in, "Input width (4LH+6; 4102 for 32x32)");
    app.add_option("--out", out, "Output width");
    app.add_option("--reps", reps, "Repetitions per kernel");
    CLI11_PARSE(app, argc, argv);

    std::mt19937_64 rng(42);
    const auto x = random_vector(n * in, rng);
    const auto w = random_vector(out * in, rng);
    const auto b = random_vector(out, rng);
    auto dz = random_vector(n * out, rng);
    for (std::size_t i = 0; i < dz.size(); i += 3) dz[i] = 0.0;  // exercise the zero skip

    std::printf("threads=%d openmp=%s rows=%zu in=%zu out=%zu reps=%d\n", k::max_threads(),
                k::openmp_available() ? "yes" : "no", n, in, out, reps);
    std::printf("%-24s %12s %12s %8s %s\n", "kernel", "serial_ms", "openmp_ms", "speedup", "identical");

    bool all_same = true;
    auto report = [&](const char* name, double s, double p, bool same) {
        all_same = all_same && same;
        std::printf("%-24s %12.3f %12.3f %8.2f %s\n", name, s, p, s / p, same ? "yes" : "NO");
    };

    {
        std::vector<double> zs(n * out), zp(n * out);
        const double s = median_ms(reps, [&] { k::serial::dense_forward(x, n, in, w, b, out, zs); });
        const double p = median_ms(reps, [&] { k::omp::dense_forward(x, n, in, w, b, out, zp); });
        report("dense_forward", s, p, same_bytes(zs, zp));
    }
    {
        std::vector<double> dws(out * in), dbs(out), dwp(out * in), dbp(out);
        const double s = median_ms(reps, [&] {
            std::ranges::fill(dws, 0.0);
            std::ranges::fill(dbs, 0.0);
            k::serial::dense_backward_params(x, dz, n, in, out, dws, dbs);
        });
        const double p = median_ms(reps, [&] {
            std::ranges::fill(dwp, 0.0);
            std::ranges::fill(dbp, 0.0);
            k::omp::dense_backward_params(x, dz, n, in, out, dwp, dbp);
        });
        report("dense_backward_params", s, p, same_bytes(dws, dwp) && same_bytes(dbs, dbp));
    }
    {
        std::vector<double> dxs(n * in), dxp(n * in);
        const double s = median_ms(reps, [&] { k::serial::dense_backward_input(dz, w, n, in, out, dxs); });
        const double p = median_ms(reps, [&] { k::omp::dense_backward_input(dz, w, n, in, out, dxp); });
        report("dense_backward_input", s, p, same_bytes(dxs, dxp));
    }
    return all_same ? 0 : 1;
}
