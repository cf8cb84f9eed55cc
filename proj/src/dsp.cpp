#include "s4se/dsp.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <fstream>

namespace s4se {

void StftConfig::validate() const {
    if (n_fft < 2 || win_length < 1 || hop_length < 1)
        throw ConfigError("StftConfig: sizes must be positive");
    if (!(hop_length <= win_length && win_length <= n_fft))
        throw ConfigError("StftConfig: need hop <= win <= n_fft");
}

std::vector<double> StftConfig::window() const {
    std::vector<double> w(static_cast<std::size_t>(win_length));
    for (int n = 0; n < win_length; ++n)
        w[static_cast<std::size_t>(n)] =
            0.5 * (1.0 - std::cos(2.0 * kPi * (n + 0.5) / static_cast<double>(win_length)));
    return w;
}

bool StftConfig::cola_valid() const {
    // Steady-state window-squared overlap-add, periodic in the hop.
    const std::vector<double> w = window();
    std::vector<double> c(static_cast<std::size_t>(hop_length), 0.0);
    for (int n = 0; n < win_length; ++n)
        c[static_cast<std::size_t>(n % hop_length)] += w[static_cast<std::size_t>(n)] * w[static_cast<std::size_t>(n)];
    const double mx = *std::max_element(c.begin(), c.end());
    const double mn = *std::min_element(c.begin(), c.end());
    return mn > 1e-10 * mx;
}

std::vector<double> reflect_pad(const std::vector<double>& x, int pad) {
    const long n = static_cast<long>(x.size());
    if (n < 2) throw SignalTooShort("reflect_pad: signal too short");
    std::vector<double> y(static_cast<std::size_t>(n + 2L * pad));
    for (long i = 0; i < n + 2L * pad; ++i) {
        long j = i - pad;
        // reflect without repeating the edge sample
        while (j < 0 || j >= n) {
            if (j < 0) j = -j;
            if (j >= n) j = 2 * (n - 1) - j;
        }
        y[static_cast<std::size_t>(i)] = x[static_cast<std::size_t>(j)];
    }
    return y;
}

int stft_frames(long padded_len, const StftConfig& cfg) {
    if (padded_len < cfg.n_fft) return 0;
    return static_cast<int>(1 + (padded_len - cfg.n_fft) / cfg.hop_length);
}

ComplexSpectrogram stft(const std::vector<double>& signal, const StftConfig& cfg,
                        double sample_rate) {
    cfg.validate();
    if (static_cast<int>(signal.size()) < cfg.win_length)
        throw SignalTooShort("stft: signal shorter than the analysis window");
    const int pad = cfg.center ? cfg.n_fft / 2 : 0;
    std::vector<double> x = cfg.center ? reflect_pad(signal, pad) : signal;
    int T = stft_frames(static_cast<long>(x.size()), cfg);
    if (cfg.center) {
        // ceil-style frame count so the analysis grid covers every sample
        const long rem = (static_cast<long>(x.size()) - cfg.n_fft) % cfg.hop_length;
        if (rem != 0) {
            ++T;
            x.resize(x.size() + static_cast<std::size_t>(cfg.hop_length - rem), 0.0);
        }
    }
    if (T < 1) throw SignalTooShort("stft: no complete frame");
    const int F = cfg.num_bins();
    const std::vector<double> w = cfg.window();
    const int woff = (cfg.n_fft - cfg.win_length) / 2;

    ComplexSpectrogram spec;
    spec.config = cfg;
    spec.sample_rate = sample_rate;
    spec.num_samples = static_cast<long>(signal.size());
    spec.data.resize(F, T);
    std::vector<cdouble> frame(static_cast<std::size_t>(cfg.n_fft));
    for (int t = 0; t < T; ++t) {
        std::fill(frame.begin(), frame.end(), cdouble(0, 0));
        const long base = static_cast<long>(t) * cfg.hop_length;
        for (int n = 0; n < cfg.win_length; ++n)
            frame[static_cast<std::size_t>(woff + n)] =
                x[static_cast<std::size_t>(base + woff + n)] * w[static_cast<std::size_t>(n)];
        const std::vector<cdouble> spec_full = dft(frame, false);
        for (int f = 0; f < F; ++f) spec.data(f, t) = spec_full[static_cast<std::size_t>(f)];
    }
    return spec;
}

std::vector<double> istft(const ComplexSpectrogram& spec) {
    const StftConfig& cfg = spec.config;
    cfg.validate();
    if (!cfg.cola_valid())
        throw ColaViolation("istft: window/hop pair cannot reconstruct (OLA minimum ~ 0)");
    const int F = cfg.num_bins();
    if (spec.bins() != F) throw DimensionMismatch("istft: bin count does not match config");
    const int T = spec.frames();
    const std::vector<double> w = cfg.window();
    const int woff = (cfg.n_fft - cfg.win_length) / 2;
    const long padded_len = static_cast<long>(cfg.n_fft) + static_cast<long>(T - 1) * cfg.hop_length;
    std::vector<double> acc(static_cast<std::size_t>(padded_len), 0.0);
    std::vector<double> wsum(static_cast<std::size_t>(padded_len), 0.0);

    std::vector<cdouble> full(static_cast<std::size_t>(cfg.n_fft));
    for (int t = 0; t < T; ++t) {
        std::fill(full.begin(), full.end(), cdouble(0, 0));
        for (int f = 0; f < F; ++f) full[static_cast<std::size_t>(f)] = spec.data(f, t);
        for (int f = 1; f < cfg.n_fft - F + 1; ++f)
            full[static_cast<std::size_t>(cfg.n_fft - f)] = std::conj(spec.data(f, t));
        const std::vector<cdouble> frame = dft(full, true);
        const long base = static_cast<long>(t) * cfg.hop_length;
        for (int n = 0; n < cfg.win_length; ++n) {
            const double wn = w[static_cast<std::size_t>(n)];
            acc[static_cast<std::size_t>(base + woff + n)] +=
                wn * frame[static_cast<std::size_t>(woff + n)].real();
            wsum[static_cast<std::size_t>(base + woff + n)] += wn * wn;
        }
    }
    for (std::size_t i = 0; i < acc.size(); ++i) {
        if (wsum[i] > 0.0) acc[i] /= wsum[i];
    }
    const int pad = cfg.center ? cfg.n_fft / 2 : 0;
    long out_len = padded_len - 2L * pad;
    if (spec.num_samples > 0) out_len = spec.num_samples;
    std::vector<double> out(static_cast<std::size_t>(std::max(0L, out_len)), 0.0);
    for (long i = 0; i < out_len && i + pad < padded_len; ++i)
        out[static_cast<std::size_t>(i)] = acc[static_cast<std::size_t>(i + pad)];
    return out;
}

ComplexSpectrogram amplitude_transform(const ComplexSpectrogram& spec, double alpha, double beta,
                                       bool inverse) {
    if (!(alpha > 0.0) || alpha > 1.0 || !(beta > 0.0))
        throw ConfigError("amplitude_transform: need alpha in (0,1], beta > 0");
    ComplexSpectrogram out = spec;
    for (int t = 0; t < spec.frames(); ++t) {
        for (int f = 0; f < spec.bins(); ++f) {
            const cdouble c = spec.data(f, t);
            const double m = std::abs(c);
            if (m == 0.0) continue;
            const double m2 = inverse ? std::pow(m / beta, 1.0 / alpha) : beta * std::pow(m, alpha);
            out.data(f, t) = c * (m2 / m);
        }
    }
    return out;
}

Eigen::MatrixXd whiten_mag(const Eigen::MatrixXd& mags, const WhiteningStats& stats, bool inverse) {
    if (mags.rows() != stats.dim()) throw DimensionMismatch("whiten: F does not match stats");
    if (inverse) return (stats.inverse * mags).colwise() + stats.mean;
    return stats.transform * (mags.colwise() - stats.mean);
}

WhiteningStats fit_whitening(const std::vector<ComplexSpectrogram>& specs, double eps) {
    if (specs.empty()) throw InsufficientData("fit_whitening: no spectrograms");
    const int F = specs.front().bins();
    long total = 0;
    for (const auto& s : specs) {
        if (s.bins() != F) throw DimensionMismatch("fit_whitening: mixed bin counts");
        total += s.frames();
    }
    if (total <= F) throw InsufficientData("fit_whitening: need more frames than bins");

    Eigen::VectorXd mean = Eigen::VectorXd::Zero(F);
    Eigen::MatrixXd second = Eigen::MatrixXd::Zero(F, F);
    for (const auto& s : specs) {
        for (int t = 0; t < s.frames(); ++t) {
            const Eigen::VectorXd x = s.data.col(t).cwiseAbs();
            mean += x;
            second.noalias() += x * x.transpose();
        }
    }
    const double n = static_cast<double>(total);
    mean /= n;
    Eigen::MatrixXd cov = second / n - mean * mean.transpose();

    const double eps_eff = eps * cov.diagonal().mean();
    cov.diagonal().array() += eps_eff;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    if (es.info() != Eigen::Success) throw NumericError("fit_whitening: eigendecomposition failed");
    const double lmax = es.eigenvalues().maxCoeff();
    Eigen::VectorXd inv_sqrt(F), sqrt_l(F);
    for (int i = 0; i < F; ++i) {
        const double l = std::max(es.eigenvalues()[i], 1e-14 * std::max(lmax, 1e-300));
        inv_sqrt[i] = 1.0 / std::sqrt(l);
        sqrt_l[i] = std::sqrt(l);
    }
    WhiteningStats st;
    st.eps = eps;
    st.mean = mean;
    st.transform = es.eigenvectors() * inv_sqrt.asDiagonal() * es.eigenvectors().transpose();
    st.inverse = es.eigenvectors() * sqrt_l.asDiagonal() * es.eigenvectors().transpose();
    return st;
}

ComplexSpectrogram whiten(const ComplexSpectrogram& spec, const WhiteningStats& stats, bool inverse) {
    if (spec.bins() != stats.dim()) throw DimensionMismatch("whiten: F does not match stats");
    // Complex-affine so that inverse(forward(.)) is exact; stats are fitted on
    // magnitudes, magnitude features go through whiten_mag instead.
    ComplexSpectrogram out = spec;
    const Eigen::VectorXcd mean = stats.mean.cast<cdouble>();
    if (inverse)
        out.data = (stats.inverse.cast<cdouble>() * spec.data).colwise() + mean;
    else
        out.data = stats.transform.cast<cdouble>() * (spec.data.colwise() - mean);
    return out;
}

double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

void write_whitening(const std::string& path, const WhiteningStats& stats) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("write_whitening: cannot open " + path);
    os.write("ZCAW", 4);
    const uint32_t version = 1, F = static_cast<uint32_t>(stats.dim());
    os.write(reinterpret_cast<const char*>(&version), 4);
    os.write(reinterpret_cast<const char*>(&F), 4);
    os.write(reinterpret_cast<const char*>(&stats.eps), 8);
    const double zero = 0.0;
    for (uint32_t f = 0; f < F; ++f) {
        os.write(reinterpret_cast<const char*>(&stats.mean[static_cast<int>(f)]), 8);
        os.write(reinterpret_cast<const char*>(&zero), 8);  // magnitude-domain mean is real
    }
    for (uint32_t i = 0; i < F; ++i)
        for (uint32_t j = 0; j < F; ++j)
            os.write(reinterpret_cast<const char*>(&stats.transform(static_cast<int>(i), static_cast<int>(j))), 8);
}

WhiteningStats read_whitening(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("read_whitening: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "ZCAW") throw CorruptHeader("read_whitening: bad magic");
    uint32_t version = 0, F = 0;
    is.read(reinterpret_cast<char*>(&version), 4);
    is.read(reinterpret_cast<char*>(&F), 4);
    if (version != 1) throw UnsupportedFormat("read_whitening: unsupported version");
    WhiteningStats st;
    is.read(reinterpret_cast<char*>(&st.eps), 8);
    st.mean.resize(F);
    for (uint32_t f = 0; f < F; ++f) {
        double re = 0, im = 0;
        is.read(reinterpret_cast<char*>(&re), 8);
        is.read(reinterpret_cast<char*>(&im), 8);
        st.mean[static_cast<int>(f)] = re;
    }
    st.transform.resize(F, F);
    for (uint32_t i = 0; i < F; ++i)
        for (uint32_t j = 0; j < F; ++j)
            is.read(reinterpret_cast<char*>(&st.transform(static_cast<int>(i), static_cast<int>(j))), 8);
    if (!is) throw CorruptHeader("read_whitening: truncated file");
    // transform is SPD; rebuild the inverse through its eigensystem.
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(st.transform);
    Eigen::VectorXd inv = es.eigenvalues();
    for (int i = 0; i < inv.size(); ++i) inv[i] = 1.0 / std::max(inv[i], 1e-300);
    st.inverse = es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
    return st;
}

}  // namespace s4se
