#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "s4se/common.hpp"
#include "s4se/fft.hpp"

namespace s4se {

// STFT analysis/synthesis settings. The window is a half-sample-offset Hann
// of win_length samples, zero-padded and centered inside n_fft. The offset
// keeps the window strictly positive so hop == win_length settings (e.g.
// 510/255/255) still reconstruct exactly under window-squared overlap-add.
struct StftConfig {
    int n_fft = 510;
    int win_length = 400;
    int hop_length = 100;
    bool center = true;  // reflect padding by n_fft/2 on both sides

    StftConfig() = default;
    StftConfig(int nfft, int win, int hop, bool c = true)
        : n_fft(nfft), win_length(win), hop_length(hop), center(c) {
        validate();
    }

    void validate() const;
    int num_bins() const { return n_fft / 2 + 1; }
    std::vector<double> window() const;  // length win_length
    // Min/max of the window-squared overlap-add; reconstruction is exact iff
    // the minimum is bounded away from zero.
    bool cola_valid() const;
};

struct ComplexSpectrogram {
    Eigen::MatrixXcd data;  // F x T
    StftConfig config;
    double sample_rate = 16000.0;
    long num_samples = 0;  // original signal length, for exact resynthesis

    int bins() const { return static_cast<int>(data.rows()); }
    int frames() const { return static_cast<int>(data.cols()); }
};

// ZCA whitening statistics over per-frame magnitude vectors.
struct WhiteningStats {
    Eigen::VectorXd mean;       // F
    Eigen::MatrixXd transform;  // F x F, (Cov + eps I)^{-1/2}, symmetric
    Eigen::MatrixXd inverse;    // (Cov + eps I)^{+1/2}
    double eps = 0.0;

    int dim() const { return static_cast<int>(mean.size()); }
};

ComplexSpectrogram stft(const std::vector<double>& signal, const StftConfig& cfg,
                        double sample_rate = 16000.0);
std::vector<double> istft(const ComplexSpectrogram& spec);

// Frame layout shared with the differentiable STFT primitive.
std::vector<double> reflect_pad(const std::vector<double>& x, int pad);
int stft_frames(long padded_len, const StftConfig& cfg);

// Forward: c -> beta * |c|^alpha * exp(i arg c). inverse=true undoes it.
ComplexSpectrogram amplitude_transform(const ComplexSpectrogram& spec, double alpha, double beta,
                                       bool inverse);

WhiteningStats fit_whitening(const std::vector<ComplexSpectrogram>& specs, double eps);
// Magnitude-domain whitening; phase is carried through unchanged.
ComplexSpectrogram whiten(const ComplexSpectrogram& spec, const WhiteningStats& stats, bool inverse);
// Matrix-domain helpers used by the model pipeline (operate on real F x T data).
Eigen::MatrixXd whiten_mag(const Eigen::MatrixXd& mags, const WhiteningStats& stats, bool inverse);

double hz_to_mel(double f);
double mel_to_hz(double m);

// "ZCAW" binary stats file.
void write_whitening(const std::string& path, const WhiteningStats& stats);
WhiteningStats read_whitening(const std::string& path);

}  // namespace s4se
