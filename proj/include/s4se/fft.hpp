#pragma once

#include <complex>
#include <cstddef>
#include <vector>

namespace s4se {

using cdouble = std::complex<double>;

// In-place radix-2 Cooley-Tukey. a.size() must be a power of two.
// inverse=true applies the 1/n scaling.
void fft_pow2(std::vector<cdouble>& a, bool inverse);

// DFT of arbitrary length (Bluestein for non-powers of two).
// Forward convention: X_k = sum_n x_n exp(-2*pi*i*k*n/N); inverse includes 1/N.
std::vector<cdouble> dft(const std::vector<cdouble>& x, bool inverse);

// sum_f c_f exp(+2*pi*i*f*n/N), no scaling (adjoint of the forward DFT).
std::vector<cdouble> idft_unscaled(const std::vector<cdouble>& c);

std::size_t next_pow2(std::size_t n);

// Causal linear convolution truncated to the input length:
// y_t = sum_{s<=t} k_s * u_{t-s}. Direct path below a size cutoff, FFT above.
void causal_conv(const double* k, const double* u, double* y, std::size_t n);
std::vector<cdouble> causal_conv(const std::vector<cdouble>& k, const std::vector<cdouble>& u);

// Truncated cross-correlation: c_m = sum_{t>=m} g_t * x_{t-m}. Adjoint of
// causal_conv in both arguments.
void corr_trunc(const double* g, const double* x, double* c, std::size_t n);

// Same convolution, O(n^2) nested loop. Serial reference used by tests and
// the bench target.
void causal_conv_direct(const double* k, const double* u, double* y, std::size_t n);
std::vector<cdouble> causal_conv_direct(const std::vector<cdouble>& k, const std::vector<cdouble>& u);

// Force the FFT path regardless of size (bench target).
std::vector<cdouble> causal_conv_fft(const std::vector<cdouble>& k, const std::vector<cdouble>& u);

}  // namespace s4se
