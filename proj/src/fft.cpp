#include "s4se/fft.hpp"

#include <cassert>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>

#include "s4se/common.hpp"

namespace s4se {

namespace {

// Twiddle tables are shared across calls; the cache lock is only taken on
// lookup, tables themselves are immutable.
std::shared_ptr<const std::vector<cdouble>> twiddles(std::size_t n) {
    static std::mutex mu;
    static std::map<std::size_t, std::shared_ptr<const std::vector<cdouble>>> cache;
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find(n);
    if (it != cache.end()) return it->second;
    auto tw = std::make_shared<std::vector<cdouble>>(n / 2);
    for (std::size_t j = 0; j < n / 2; ++j) {
        double a = -2.0 * kPi * static_cast<double>(j) / static_cast<double>(n);
        (*tw)[j] = cdouble(std::cos(a), std::sin(a));
    }
    cache[n] = tw;
    return tw;
}

constexpr std::size_t kDirectCutoff = 96;

}  // namespace

std::size_t next_pow2(std::size_t n) {
    std::size_t p = 1;
    while (p < n) p <<= 1;
    return p;
}

void fft_pow2(std::vector<cdouble>& a, bool inverse) {
    const std::size_t n = a.size();
    assert((n & (n - 1)) == 0);
    if (n <= 1) return;
    // Bit-reversal permutation.
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    auto tw = twiddles(n);
    const cdouble* w = tw->data();
    // Butterflies in explicit real arithmetic: std::complex operator* routes
    // through __muldc3 and its NaN bookkeeping, which dominates at this size.
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const std::size_t stride = n / len;
        for (std::size_t i = 0; i < n; i += len) {
            for (std::size_t j = 0; j < len / 2; ++j) {
                const cdouble wj = w[j * stride];
                const double wr = wj.real();
                const double wi = inverse ? -wj.imag() : wj.imag();
                const cdouble b = a[i + j + len / 2];
                const double vr = b.real() * wr - b.imag() * wi;
                const double vi = b.real() * wi + b.imag() * wr;
                const cdouble u = a[i + j];
                a[i + j] = cdouble(u.real() + vr, u.imag() + vi);
                a[i + j + len / 2] = cdouble(u.real() - vr, u.imag() - vi);
            }
        }
    }
    if (inverse) {
        const double s = 1.0 / static_cast<double>(n);
        for (auto& x : a) x *= s;
    }
}

namespace {

// Bluestein chirp-z for arbitrary n. e^{-i pi m^2 / n} is periodic in m^2
// with period 2n; reduce before the trig call to keep the phase accurate.
std::vector<cdouble> bluestein(const std::vector<cdouble>& x) {
    const std::size_t n = x.size();
    const std::size_t m = next_pow2(2 * n - 1);
    std::vector<cdouble> chirp(n);
    for (std::size_t k = 0; k < n; ++k) {
        long long q = (static_cast<long long>(k) * static_cast<long long>(k)) %
                      (2 * static_cast<long long>(n));
        double a = -kPi * static_cast<double>(q) / static_cast<double>(n);
        chirp[k] = cdouble(std::cos(a), std::sin(a));
    }
    std::vector<cdouble> av(m, cdouble(0, 0)), bv(m, cdouble(0, 0));
    for (std::size_t k = 0; k < n; ++k) av[k] = x[k] * chirp[k];
    bv[0] = std::conj(chirp[0]);
    for (std::size_t k = 1; k < n; ++k) {
        bv[k] = std::conj(chirp[k]);
        bv[m - k] = std::conj(chirp[k]);
    }
    fft_pow2(av, false);
    fft_pow2(bv, false);
    for (std::size_t k = 0; k < m; ++k) av[k] *= bv[k];
    fft_pow2(av, true);
    std::vector<cdouble> out(n);
    for (std::size_t k = 0; k < n; ++k) out[k] = av[k] * chirp[k];
    return out;
}

}  // namespace

std::vector<cdouble> dft(const std::vector<cdouble>& x, bool inverse) {
    const std::size_t n = x.size();
    if (n == 0) return {};
    if ((n & (n - 1)) == 0) {
        std::vector<cdouble> a = x;
        fft_pow2(a, inverse);
        return a;
    }
    if (!inverse) return bluestein(x);
    std::vector<cdouble> c(n);
    for (std::size_t k = 0; k < n; ++k) c[k] = std::conj(x[k]);
    std::vector<cdouble> y = bluestein(c);
    const double s = 1.0 / static_cast<double>(n);
    for (auto& v : y) v = std::conj(v) * s;
    return y;
}

std::vector<cdouble> idft_unscaled(const std::vector<cdouble>& c) {
    std::vector<cdouble> y = dft(c, true);
    const double n = static_cast<double>(c.size());
    for (auto& v : y) v *= n;
    return y;
}

std::vector<cdouble> causal_conv_direct(const std::vector<cdouble>& k, const std::vector<cdouble>& u) {
    const std::size_t n = u.size();
    std::vector<cdouble> y(n, cdouble(0, 0));
    const std::size_t kn = std::min(k.size(), n);
    for (std::size_t t = 0; t < n; ++t) {
        cdouble acc(0, 0);
        const std::size_t smax = std::min(t + 1, kn);
        for (std::size_t s = 0; s < smax; ++s) acc += k[s] * u[t - s];
        y[t] = acc;
    }
    return y;
}

std::vector<cdouble> causal_conv_fft(const std::vector<cdouble>& k, const std::vector<cdouble>& u) {
    const std::size_t n = u.size();
    const std::size_t m = next_pow2(2 * n);
    std::vector<cdouble> a(m, cdouble(0, 0)), b(m, cdouble(0, 0));
    for (std::size_t i = 0; i < std::min(k.size(), n); ++i) a[i] = k[i];
    for (std::size_t i = 0; i < n; ++i) b[i] = u[i];
    fft_pow2(a, false);
    fft_pow2(b, false);
    for (std::size_t i = 0; i < m; ++i) a[i] *= b[i];
    fft_pow2(a, true);
    a.resize(n);
    return a;
}

std::vector<cdouble> causal_conv(const std::vector<cdouble>& k, const std::vector<cdouble>& u) {
    if (u.size() <= kDirectCutoff) return causal_conv_direct(k, u);
    return causal_conv_fft(k, u);
}

void causal_conv_direct(const double* k, const double* u, double* y, std::size_t n) {
    for (std::size_t t = 0; t < n; ++t) {
        double acc = 0.0;
        for (std::size_t s = 0; s <= t; ++s) acc += k[s] * u[t - s];
        y[t] = acc;
    }
}

void causal_conv(const double* k, const double* u, double* y, std::size_t n) {
    if (n <= kDirectCutoff) {
        causal_conv_direct(k, u, y, n);
        return;
    }
    const std::size_t m = next_pow2(2 * n);
    std::vector<cdouble> a(m, cdouble(0, 0)), b(m, cdouble(0, 0));
    for (std::size_t i = 0; i < n; ++i) {
        a[i] = k[i];
        b[i] = u[i];
    }
    fft_pow2(a, false);
    fft_pow2(b, false);
    for (std::size_t i = 0; i < m; ++i) a[i] *= b[i];
    fft_pow2(a, true);
    for (std::size_t i = 0; i < n; ++i) y[i] = a[i].real();
}

void corr_trunc(const double* g, const double* x, double* c, std::size_t n) {
    if (n <= kDirectCutoff) {
        for (std::size_t m = 0; m < n; ++m) {
            double acc = 0.0;
            for (std::size_t t = m; t < n; ++t) acc += g[t] * x[t - m];
            c[m] = acc;
        }
        return;
    }
    const std::size_t m2 = next_pow2(2 * n);
    std::vector<cdouble> a(m2, cdouble(0, 0)), b(m2, cdouble(0, 0));
    for (std::size_t i = 0; i < n; ++i) {
        a[i] = g[i];
        b[i] = x[i];
    }
    fft_pow2(a, false);
    fft_pow2(b, false);
    for (std::size_t i = 0; i < m2; ++i) a[i] *= std::conj(b[i]);
    fft_pow2(a, true);
    for (std::size_t i = 0; i < n; ++i) c[i] = a[i].real();
}

}  // namespace s4se
