#include "s4se/objectives.hpp"

#include <cmath>
#include <sstream>

#include <json.hpp>

namespace s4se {

MultiResStftConfig MultiResStftConfig::defaults() {
    MultiResStftConfig c;
    c.settings = {StftConfig(512, 240, 50), StftConfig(1024, 600, 120), StftConfig(2048, 1200, 240)};
    return c;
}

namespace {

Eigen::MatrixXd mag_of(const std::vector<double>& y, const StftConfig& cfg) {
    return stft(y, cfg).data.cwiseAbs();
}

}  // namespace

double stft_loss(const std::vector<double>& y, const std::vector<double>& y_hat,
                 const StftConfig& cfg) {
    if (y.size() != y_hat.size()) throw ShapeMismatch("stft_loss: length mismatch");
    const Eigen::MatrixXd M = mag_of(y, cfg);
    const Eigen::MatrixXd Mh = mag_of(y_hat, cfg);
    const double ref_norm = M.norm();
    if (ref_norm == 0.0) throw ZeroReference("stft_loss: reference spectrogram is zero");
    const double sc = (M - Mh).norm() / ref_norm;
    const double T = static_cast<double>(M.cols());
    double log_l1 = 0;
    for (int t = 0; t < M.cols(); ++t)
        for (int f = 0; f < M.rows(); ++f)
            log_l1 += std::abs(std::log(std::max(M(f, t), kLogFloor)) -
                               std::log(std::max(Mh(f, t), kLogFloor)));
    return sc + log_l1 / T;
}

double time_domain_loss(const std::vector<double>& y, const std::vector<double>& y_hat,
                        const MultiResStftConfig& mrcfg) {
    if (y.size() != y_hat.size()) throw ShapeMismatch("time_domain_loss: length mismatch");
    if (mrcfg.settings.empty()) throw ConfigError("time_domain_loss: no STFT settings");
    double l1 = 0;
    for (std::size_t i = 0; i < y.size(); ++i) l1 += std::abs(y[i] - y_hat[i]);
    l1 /= static_cast<double>(y.size());
    double spec = 0;
    for (const auto& cfg : mrcfg.settings) spec += stft_loss(y, y_hat, cfg);
    return l1 + spec / static_cast<double>(mrcfg.settings.size());
}

double mag_loss(const Eigen::MatrixXd& S, const Eigen::MatrixXd& S_hat) {
    if (S.rows() != S_hat.rows() || S.cols() != S_hat.cols())
        throw ShapeMismatch("mag_loss: shape mismatch");
    return (S - S_hat).cwiseAbs().sum() / static_cast<double>(S.size());
}

double complex_loss(const Eigen::MatrixXcd& S, const Eigen::MatrixXcd& S_hat) {
    if (S.rows() != S_hat.rows() || S.cols() != S_hat.cols())
        throw ShapeMismatch("complex_loss: shape mismatch");
    const double n = static_cast<double>(S.size());
    double ri = 0;
    for (int t = 0; t < S.cols(); ++t)
        for (int f = 0; f < S.rows(); ++f) {
            ri += std::abs(S(f, t).real() - S_hat(f, t).real());
            ri += std::abs(S(f, t).imag() - S_hat(f, t).imag());
        }
    return ri / n + mag_loss(S.cwiseAbs(), S_hat.cwiseAbs());
}

double si_sdr(const std::vector<double>& ref, const std::vector<double>& est) {
    if (ref.size() != est.size()) throw ShapeMismatch("si_sdr: length mismatch");
    double rr = 0, re = 0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        rr += ref[i] * ref[i];
        re += ref[i] * est[i];
    }
    if (rr == 0.0) throw ZeroReference("si_sdr: zero reference");
    const double alpha = re / rr;
    double target = 0, resid = 0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        const double tgt = alpha * ref[i];
        target += tgt * tgt;
        const double r = est[i] - tgt;
        resid += r * r;
    }
    if (target == 0.0) return -100.0;
    if (resid == 0.0) return 100.0;
    const double db = 10.0 * std::log10(target / resid);
    return std::min(100.0, std::max(-100.0, db));
}

double log_spectral_distance(const std::vector<double>& ref, const std::vector<double>& est,
                             const StftConfig& cfg) {
    if (ref.size() != est.size()) throw ShapeMismatch("lsd: length mismatch");
    const Eigen::MatrixXd M = mag_of(ref, cfg);
    const Eigen::MatrixXd Mh = mag_of(est, cfg);
    double acc = 0;
    for (int t = 0; t < M.cols(); ++t) {
        double frame = 0;
        for (int f = 0; f < M.rows(); ++f) {
            const double d = 20.0 * (std::log10(std::max(M(f, t), kLogFloor)) -
                                     std::log10(std::max(Mh(f, t), kLogFloor)));
            frame += d * d;
        }
        acc += frame / static_cast<double>(M.rows());
    }
    return std::sqrt(acc / static_cast<double>(M.cols()));
}

std::string MetricRecord::to_json_line() const {
    nlohmann::json j;
    j["id"] = id;
    j["si_sdr_db"] = si_sdr_db;
    j["lsd_db"] = lsd_db;
    j["loss"] = loss;
    return j.dump();
}

Var ad_stft_loss(Var y_hat, const std::vector<double>& y, const StftConfig& cfg) {
    using namespace ad;
    Tape& tape = *y_hat.tape;
    const Eigen::MatrixXd M = mag_of(y, cfg);
    const double ref_norm = M.norm();
    if (ref_norm == 0.0) throw ZeroReference("ad_stft_loss: reference spectrogram is zero");
    const int F = static_cast<int>(M.rows()), T = static_cast<int>(M.cols());
    Tensor mref({F, T}), logref({F, T});
    for (int f = 0; f < F; ++f)
        for (int t = 0; t < T; ++t) {
            mref[static_cast<long>(f) * T + t] = M(f, t);
            logref[static_cast<long>(f) * T + t] = std::log(std::max(M(f, t), kLogFloor));
        }
    Var mh = stft_mag(y_hat, cfg);
    if (mh.val().dim(0) != F || mh.val().dim(1) != T)
        throw ShapeMismatch("ad_stft_loss: frame mismatch between target and estimate");
    Var d = sub(mh, constant(tape, mref));
    Var sc = scale(vsqrt(sum(mul(d, d))), 1.0 / ref_norm);
    Var logterm = scale(sum(vabs(sub(vlog(clamp_min(mh, kLogFloor)), constant(tape, logref)))),
                        1.0 / static_cast<double>(T));
    return add(sc, logterm);
}

Var ad_time_domain_loss(Var y_hat, const std::vector<double>& y, const MultiResStftConfig& mrcfg) {
    using namespace ad;
    Tape& tape = *y_hat.tape;
    if (mrcfg.settings.empty()) throw ConfigError("ad_time_domain_loss: no STFT settings");
    if (y_hat.val().size() != static_cast<long>(y.size()))
        throw ShapeMismatch("ad_time_domain_loss: length mismatch");
    Tensor yt({static_cast<int>(y.size())});
    std::copy(y.begin(), y.end(), yt.data.begin());
    Var loss = mean(vabs(sub(y_hat, constant(tape, yt))));
    for (const auto& cfg : mrcfg.settings)
        loss = add(loss, scale(ad_stft_loss(y_hat, y, cfg),
                               1.0 / static_cast<double>(mrcfg.settings.size())));
    return loss;
}

Var ad_mag_loss(Var S_hat, const Eigen::MatrixXd& S) {
    using namespace ad;
    const int F = static_cast<int>(S.rows()), T = static_cast<int>(S.cols());
    if (S_hat.val().ndim() != 2 || S_hat.val().dim(0) != F || S_hat.val().dim(1) != T)
        throw ShapeMismatch("ad_mag_loss: shape mismatch");
    Tensor ref({F, T});
    for (int f = 0; f < F; ++f)
        for (int t = 0; t < T; ++t) ref[static_cast<long>(f) * T + t] = S(f, t);
    return mean(vabs(sub(S_hat, constant(*S_hat.tape, ref))));
}

Var ad_complex_loss(Var S_hat_re, Var S_hat_im, const Eigen::MatrixXcd& S) {
    using namespace ad;
    Tape& tape = *S_hat_re.tape;
    const int F = static_cast<int>(S.rows()), T = static_cast<int>(S.cols());
    if (S_hat_re.val().ndim() != 2 || S_hat_re.val().dim(0) != F || S_hat_re.val().dim(1) != T ||
        !S_hat_re.val().same_shape(S_hat_im.val()))
        throw ShapeMismatch("ad_complex_loss: shape mismatch");
    Tensor re({F, T}), im({F, T}), mag({F, T});
    for (int f = 0; f < F; ++f)
        for (int t = 0; t < T; ++t) {
            re[static_cast<long>(f) * T + t] = S(f, t).real();
            im[static_cast<long>(f) * T + t] = S(f, t).imag();
            mag[static_cast<long>(f) * T + t] = std::abs(S(f, t));
        }
    Var dre = mean(vabs(sub(S_hat_re, constant(tape, re))));
    Var dim = mean(vabs(sub(S_hat_im, constant(tape, im))));
    Var mh = vsqrt(add(mul(S_hat_re, S_hat_re), mul(S_hat_im, S_hat_im)));
    Var dm = mean(vabs(sub(mh, constant(tape, mag))));
    return add(add(dre, dim), dm);
}

}  // namespace s4se
