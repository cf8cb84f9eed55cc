#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "s4se/autodiff.hpp"
#include "s4se/dsp.hpp"

namespace s4se {

struct MultiResStftConfig {
    std::vector<StftConfig> settings;
    static MultiResStftConfig defaults();  // DEMUCS triple: 512/240/50, 1024/600/120, 2048/1200/240
};

inline constexpr double kLogFloor = 1e-7;

// Eq. (6): spectral convergence + (1/T) L1 of log magnitudes.
double stft_loss(const std::vector<double>& y, const std::vector<double>& y_hat,
                 const StftConfig& cfg);
// Eq. (7): waveform L1 + mean stft_loss over the resolutions.
double time_domain_loss(const std::vector<double>& y, const std::vector<double>& y_hat,
                        const MultiResStftConfig& mrcfg);
// Eq. (8): mean |S - S_hat| over all bins (magnitude inputs).
double mag_loss(const Eigen::MatrixXd& S, const Eigen::MatrixXd& S_hat);
// Eq. (9): jointly normalized real+imag L1 plus the magnitude term.
double complex_loss(const Eigen::MatrixXcd& S, const Eigen::MatrixXcd& S_hat);

double si_sdr(const std::vector<double>& ref, const std::vector<double>& est);  // dB, capped +-100
double log_spectral_distance(const std::vector<double>& ref, const std::vector<double>& est,
                             const StftConfig& cfg);

struct MetricRecord {
    std::string id;
    double si_sdr_db = 0;
    double lsd_db = 0;
    double loss = 0;
    std::string to_json_line() const;
};

// Differentiable counterparts (reference target is constant).
Var ad_stft_loss(Var y_hat, const std::vector<double>& y, const StftConfig& cfg);
Var ad_time_domain_loss(Var y_hat, const std::vector<double>& y, const MultiResStftConfig& mrcfg);
Var ad_mag_loss(Var S_hat, const Eigen::MatrixXd& S);
// S_hat given as separate re/im planes [F, T]
Var ad_complex_loss(Var S_hat_re, Var S_hat_im, const Eigen::MatrixXcd& S);

}  // namespace s4se
