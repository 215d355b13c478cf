#include "haloprobe/kernels.hpp"

#include <algorithm>
#include <cstdint>

#ifdef HALOPROBE_HAVE_OPENMP
#include <omp.h>
#endif

namespace haloprobe::kernels {

const char* to_string(Backend backend) noexcept {
    return backend == Backend::serial ? "serial" : "openmp";
}

bool openmp_available() noexcept {
#ifdef HALOPROBE_HAVE_OPENMP
    return true;
#else
    return false;
#endif
}

Backend default_backend() noexcept {
    return openmp_available() ? Backend::openmp : Backend::serial;
}

int max_threads() noexcept {
#ifdef HALOPROBE_HAVE_OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

namespace serial {

void dense_forward(std::span<const double> x, std::size_t n, std::size_t in,
                   std::span<const double> w, std::span<const double> b, std::size_t out,
                   std::span<double> z) {
    for (std::size_t r = 0; r < n; ++r) {
        const double* xr = x.data() + r * in;
        for (std::size_t o = 0; o < out; ++o) {
            const double* wo = w.data() + o * in;
            double acc = b[o];
            for (std::size_t i = 0; i < in; ++i) {
                acc += wo[i] * xr[i];
            }
            z[r * out + o] = acc;
        }
    }
}

void relu_inplace(std::span<double> z) {
    for (double& v : z) {
        v = v > 0.0 ? v : 0.0;
    }
}

void relu_backward(std::span<const double> activation, std::span<double> grad) {
    for (std::size_t k = 0; k < grad.size(); ++k) {
        if (activation[k] <= 0.0) grad[k] = 0.0;
    }
}

void dense_backward_params(std::span<const double> x, std::span<const double> dz, std::size_t n,
                           std::size_t in, std::size_t out, std::span<double> dw,
                           std::span<double> db) {
    for (std::size_t o = 0; o < out; ++o) {
        double* dwo = dw.data() + o * in;
        double bias = db[o];
        for (std::size_t r = 0; r < n; ++r) {
            const double d = dz[r * out + o];
            bias += d;
            if (d == 0.0) continue;
            const double* xr = x.data() + r * in;
            for (std::size_t i = 0; i < in; ++i) {
                dwo[i] += d * xr[i];
            }
        }
        db[o] = bias;
    }
}

void dense_backward_input(std::span<const double> dz, std::span<const double> w, std::size_t n,
                          std::size_t in, std::size_t out, std::span<double> dx) {
    for (std::size_t r = 0; r < n; ++r) {
        double* dxr = dx.data() + r * in;
        std::fill(dxr, dxr + in, 0.0);
        for (std::size_t o = 0; o < out; ++o) {
            const double d = dz[r * out + o];
            if (d == 0.0) continue;
            const double* wo = w.data() + o * in;
            for (std::size_t i = 0; i < in; ++i) {
                dxr[i] += d * wo[i];
            }
        }
    }
}

}  // namespace serial

namespace omp {

void dense_forward(std::span<const double> x, std::size_t n, std::size_t in,
                   std::span<const double> w, std::span<const double> b, std::size_t out,
                   std::span<double> z) {
    const auto rows = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static)
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * in;
        for (std::size_t o = 0; o < out; ++o) {
            const double* wo = w.data() + o * in;
            double acc = b[o];
            for (std::size_t i = 0; i < in; ++i) {
                acc += wo[i] * xr[i];
            }
            z[r * out + o] = acc;
        }
    }
}

void relu_inplace(std::span<double> z) {
    const auto size = static_cast<std::int64_t>(z.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t k = 0; k < size; ++k) {
        z[k] = z[k] > 0.0 ? z[k] : 0.0;
    }
}

void relu_backward(std::span<const double> activation, std::span<double> grad) {
    const auto size = static_cast<std::int64_t>(grad.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t k = 0; k < size; ++k) {
        if (activation[k] <= 0.0) grad[k] = 0.0;
    }
}

void dense_backward_params(std::span<const double> x, std::span<const double> dz, std::size_t n,
                           std::size_t in, std::size_t out, std::span<double> dw,
                           std::span<double> db) {
    const auto units = static_cast<std::int64_t>(out);
#pragma omp parallel for schedule(static)
    for (std::int64_t o = 0; o < units; ++o) {
        double* dwo = dw.data() + o * in;
        double bias = db[o];
        for (std::size_t r = 0; r < n; ++r) {
            const double d = dz[r * out + o];
            bias += d;
            if (d == 0.0) continue;
            const double* xr = x.data() + r * in;
            for (std::size_t i = 0; i < in; ++i) {
                dwo[i] += d * xr[i];
            }
        }
        db[o] = bias;
    }
}

void dense_backward_input(std::span<const double> dz, std::span<const double> w, std::size_t n,
                          std::size_t in, std::size_t out, std::span<double> dx) {
    const auto rows = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static)
    for (std::int64_t r = 0; r < rows; ++r) {
        double* dxr = dx.data() + r * in;
        std::fill(dxr, dxr + in, 0.0);
        for (std::size_t o = 0; o < out; ++o) {
            const double d = dz[r * out + o];
            if (d == 0.0) continue;
            const double* wo = w.data() + o * in;
            for (std::size_t i = 0; i < in; ++i) {
                dxr[i] += d * wo[i];
            }
        }
    }
}

}  // namespace omp

void dense_forward(Backend backend, std::span<const double> x, std::size_t n, std::size_t in,
                   std::span<const double> w, std::span<const double> b, std::size_t out,
                   std::span<double> z) {
    if (backend == Backend::openmp) {
        omp::dense_forward(x, n, in, w, b, out, z);
    } else {
        serial::dense_forward(x, n, in, w, b, out, z);
    }
}

void relu_inplace(Backend backend, std::span<double> z) {
    if (backend == Backend::openmp) {
        omp::relu_inplace(z);
    } else {
        serial::relu_inplace(z);
    }
}

void relu_backward(Backend backend, std::span<const double> activation, std::span<double> grad) {
    if (backend == Backend::openmp) {
        omp::relu_backward(activation, grad);
    } else {
        serial::relu_backward(activation, grad);
    }
}

void dense_backward_params(Backend backend, std::span<const double> x,
                           std::span<const double> dz, std::size_t n, std::size_t in,
                           std::size_t out, std::span<double> dw, std::span<double> db) {
    if (backend == Backend::openmp) {
        omp::dense_backward_params(x, dz, n, in, out, dw, db);
    } else {
        serial::dense_backward_params(x, dz, n, in, out, dw, db);
    }
}

void dense_backward_input(Backend backend, std::span<const double> dz,
                          std::span<const double> w, std::size_t n, std::size_t in,
                          std::size_t out, std::span<double> dx) {
    if (backend == Backend::openmp) {
        omp::dense_backward_input(dz, w, n, in, out, dx);
    } else {
        serial::dense_backward_input(dz, w, n, in, out, dx);
    }
}

}  // namespace haloprobe::kernels
