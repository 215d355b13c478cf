#pragma once

#include <cstddef>
#include <span>

// Dense-layer kernels over row-major batches.
//   X:  n x in       W:  out x in       b: out
//   Z:  n x out      dZ: n x out        dX: n x in
//
// The OpenMP versions split work so that every output element is produced
// by one thread with the same accumulation order as the serial loop, which
// keeps the two bit-identical.

namespace haloprobe::kernels {

enum class Backend { serial, openmp };

const char* to_string(Backend backend) noexcept;
Backend default_backend() noexcept;
bool openmp_available() noexcept;
int max_threads() noexcept;

namespace serial {

void dense_forward(std::span<const double> x, std::size_t n, std::size_t in,
                   std::span<const double> w, std::span<const double> b, std::size_t out,
                   std::span<double> z);
void relu_inplace(std::span<double> z);
void relu_backward(std::span<const double> activation, std::span<double> grad);
// dW += dZ^T X, db += column sums of dZ.
void dense_backward_params(std::span<const double> x, std::span<const double> dz, std::size_t n,
                           std::size_t in, std::size_t out, std::span<double> dw,
                           std::span<double> db);
// dX = dZ W.
void dense_backward_input(std::span<const double> dz, std::span<const double> w, std::size_t n,
                          std::size_t in, std::size_t out, std::span<double> dx);

}  // namespace serial

namespace omp {

void dense_forward(std::span<const double> x, std::size_t n, std::size_t in,
                   std::span<const double> w, std::span<const double> b, std::size_t out,
                   std::span<double> z);
void relu_inplace(std::span<double> z);
void relu_backward(std::span<const double> activation, std::span<double> grad);
void dense_backward_params(std::span<const double> x, std::span<const double> dz, std::size_t n,
                           std::size_t in, std::size_t out, std::span<double> dw,
                           std::span<double> db);
void dense_backward_input(std::span<const double> dz, std::span<const double> w, std::size_t n,
                          std::size_t in, std::size_t out, std::span<double> dx);

}  // namespace omp

void dense_forward(Backend backend, std::span<const double> x, std::size_t n, std::size_t in,
                   std::span<const double> w, std::span<const double> b, std::size_t out,
                   std::span<double> z);
void relu_inplace(Backend backend, std::span<double> z);
void relu_backward(Backend backend, std::span<const double> activation, std::span<double> grad);
void dense_backward_params(Backend backend, std::span<const double> x,
                           std::span<const double> dz, std::size_t n, std::size_t in,
                           std::size_t out, std::span<double> dw, std::span<double> db);
void dense_backward_input(Backend backend, std::span<const double> dz,
                          std::span<const double> w, std::size_t n, std::size_t in,
                          std::size_t out, std::span<double> dx);

}  // namespace haloprobe::kernels
