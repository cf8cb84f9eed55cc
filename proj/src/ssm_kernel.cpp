#include "s4se/ssm_kernel.hpp"

#include <Eigen/Eigenvalues>
#include <cstdio>
#include <fstream>

namespace s4se {

void ContinuousSSM::validate() const {
    const int n = state_dim();
    if (A.cols() != n || B.size() != n || C.size() != n)
        throw DimensionMismatch("ContinuousSSM: inconsistent dimensions");
    if (!A.allFinite() || !B.allFinite() || !C.allFinite() || !std::isfinite(D.real()) ||
        !std::isfinite(D.imag()))
        throw NumericError("ContinuousSSM: non-finite entries");
}

Eigen::MatrixXcd DplrSSM::dense_A() const {
    Eigen::MatrixXcd A = Eigen::MatrixXcd(Lambda.asDiagonal());
    A.noalias() -= P * P.adjoint();
    return A;
}

ContinuousSSM DplrSSM::dense() const {
    ContinuousSSM ssm;
    ssm.A = dense_A();
    ssm.B = B;
    ssm.C = C.transpose();
    ssm.D = cdouble(0, 0);
    return ssm;
}

DiscreteSSM discretize(const ContinuousSSM& ssm, double delta) {
    ssm.validate();
    if (!(delta > 0.0)) throw InvalidDelta("discretize: delta must be positive");
    const int n = ssm.state_dim();
    const Eigen::MatrixXcd I = Eigen::MatrixXcd::Identity(n, n);
    const Eigen::MatrixXcd M = I - (delta / 2.0) * ssm.A;
    Eigen::FullPivLU<Eigen::MatrixXcd> lu(M);
    if (!lu.isInvertible()) throw SingularMatrix("discretize: (I - delta/2 A) is singular");
    DiscreteSSM d;
    d.Abar = lu.solve(I + (delta / 2.0) * ssm.A);
    d.Bbar = lu.solve(delta * ssm.B);
    d.C = ssm.C;
    d.D = ssm.D;
    d.delta = delta;
    return d;
}

cdouble step(const DiscreteSSM& dssm, Eigen::VectorXcd& state, cdouble u) {
    if (state.size() != dssm.state_dim())
        throw DimensionMismatch("step: state length does not match N");
    state = dssm.Abar * state + dssm.Bbar * u;
    return (dssm.C * state)(0) + dssm.D * u;
}

SsmKernel materialize_kernel(const DiscreteSSM& dssm, int L) {
    if (L < 1) throw DimensionMismatch("materialize_kernel: L must be >= 1");
    SsmKernel k;
    k.taps.resize(L);
    Eigen::VectorXcd s = dssm.Bbar;
    k.taps[0] = (dssm.C * s)(0);
    for (int i = 1; i < L; ++i) {
        s = dssm.Abar * s;
        k.taps[i] = (dssm.C * s)(0);
    }
    return k;
}

std::vector<Eigen::VectorXcd> kernel_states(const DiscreteSSM& dssm, int L) {
    std::vector<Eigen::VectorXcd> states(static_cast<std::size_t>(L));
    states[0] = dssm.Bbar;
    for (int i = 1; i < L; ++i) states[i] = dssm.Abar * states[i - 1];
    return states;
}

KernelAdjoint kernel_adjoint(const DiscreteSSM& dssm, const std::vector<Eigen::VectorXcd>& states,
                             const Eigen::VectorXcd& g) {
    const int n = dssm.state_dim();
    const int L = static_cast<int>(states.size());
    if (g.size() != L) throw DimensionMismatch("kernel_adjoint: cotangent length mismatch");
    KernelAdjoint adj;
    adj.cot_Abar = Eigen::MatrixXcd::Zero(n, n);
    adj.cot_C = Eigen::RowVectorXcd::Zero(n);
    const Eigen::VectorXcd c_conj = dssm.C.transpose().conjugate();
    const Eigen::MatrixXcd AbarH = dssm.Abar.adjoint();
    // tk carries cot(s_k) while walking k = L-1 .. 0; s_k = Abar s_{k-1}.
    Eigen::VectorXcd tk = Eigen::VectorXcd::Zero(n);
    for (int k = L - 1; k >= 0; --k) {
        adj.cot_C += g[k] * states[k].adjoint();
        tk = g[k] * c_conj + (k == L - 1 ? tk : Eigen::VectorXcd(AbarH * tk));
        if (k >= 1) adj.cot_Abar.noalias() += tk * states[k - 1].adjoint();
    }
    adj.cot_Bbar = tk;
    return adj;
}

SsmKernel materialize_kernel_dplr(const DplrSSM& dplr, int L, double tol) {
    if (L < 1) throw DimensionMismatch("materialize_kernel_dplr: L must be >= 1");
    if (!(dplr.delta > 0.0)) throw InvalidDelta("materialize_kernel_dplr: delta must be positive");
    const int n = dplr.state_dim();
    const double delta = dplr.delta;
    const int Lf = static_cast<int>(next_pow2(static_cast<std::size_t>(L)));

    // Stability guard. Re(Lambda) < 0 suffices: A = Lambda - P P^H has
    // Re(x^H A x) < 0 for all x, so A is Hurwitz and the bilinear map lands
    // strictly inside the unit circle. Only fall back to the eigensolver when
    // that cheap certificate fails.
    if (dplr.Lambda.real().maxCoeff() >= 0.0) {
        const DiscreteSSM dref = discretize(dplr.dense(), delta);
        Eigen::ComplexEigenSolver<Eigen::MatrixXcd> es(dref.Abar, false);
        for (int i = 0; i < n; ++i) {
            if (std::abs(es.eigenvalues()[i]) >= 1.0 + tol)
                throw NumericalInstability("materialize_kernel_dplr: |eig(Abar)| >= 1");
        }
    }

    // The infinite generating function is sampled on a circle of radius
    // rho < 1: the aliased tail of the tap series is damped by rho^Lf and the
    // recovered taps are rescaled by rho^-k. This sidesteps both the dense
    // Abar^Lf truncation correction and the z = -1 bilinear pole.
    const double rho = std::exp(std::log(1e-7) / static_cast<double>(Lf));

    // Woodbury resolvent sampled at the Lf scaled roots of unity.
    const Eigen::VectorXcd p_conj = dplr.P.conjugate();
    Eigen::MatrixXcd W(4, n);
    W.row(0) = dplr.C.transpose().cwiseProduct(dplr.B.transpose());
    W.row(1) = dplr.C.transpose().cwiseProduct(dplr.P.transpose());
    W.row(2) = p_conj.transpose().cwiseProduct(dplr.B.transpose());
    W.row(3) = p_conj.transpose().cwiseProduct(dplr.P.transpose());

    Eigen::VectorXcd zp1s(Lf), gs(Lf);
    const cdouble w = std::polar(1.0, -2.0 * kPi / static_cast<double>(Lf));
    cdouble z(rho, 0);
    for (int l = 0; l < Lf; ++l, z *= w) {
        const double pr = 1.0 + z.real(), pi = z.imag();
        const double mr = (2.0 / delta) * (1.0 - z.real()), mi = -(2.0 / delta) * z.imag();
        const double s = 1.0 / (pr * pr + pi * pi);
        zp1s(l) = cdouble(pr, pi);
        gs(l) = cdouble((mr * pr + mi * pi) * s, (mi * pr - mr * pi) * s);
    }
    // Fused Cauchy accumulation in explicit real arithmetic: the resolvent
    // entry 1/(g - lambda_i) is formed and folded into all four sums in one
    // pass, avoiding __divdc3/__muldc3 and a materialized Lf x n matrix.
    Eigen::MatrixXcd K(Lf, 4);  // cols: k00 k01 k10 k11
    for (int l = 0; l < Lf; ++l) {
        const double gr = gs(l).real(), gi = gs(l).imag();
        double acc_r[4] = {0, 0, 0, 0}, acc_i[4] = {0, 0, 0, 0};
        const cdouble* wcol = W.data();  // column-major 4 x n: per-i block of 4
        for (int i = 0; i < n; ++i, wcol += 4) {
            const double ar = gr - dplr.Lambda(i).real(), ai = gi - dplr.Lambda(i).imag();
            const double s = 1.0 / (ar * ar + ai * ai);
            const double dr = ar * s, di = -ai * s;
            for (int r = 0; r < 4; ++r) {
                acc_r[r] += wcol[r].real() * dr - wcol[r].imag() * di;
                acc_i[r] += wcol[r].real() * di + wcol[r].imag() * dr;
            }
        }
        for (int r = 0; r < 4; ++r) K(l, r) = cdouble(acc_r[r], acc_i[r]);
    }

    std::vector<cdouble> khat(static_cast<std::size_t>(Lf));
    for (int l = 0; l < Lf; ++l) {
        const cdouble a = K(l, 1) * K(l, 2);
        const cdouble b = cdouble(1, 0) + K(l, 3);
        const double sb = 1.0 / (b.real() * b.real() + b.imag() * b.imag());
        const cdouble q((a.real() * b.real() + a.imag() * b.imag()) * sb,
                        (a.imag() * b.real() - a.real() * b.imag()) * sb);
        const cdouble num = 2.0 * (K(l, 0) - q);
        const cdouble zp = zp1s(l);
        const double sz = 1.0 / (zp.real() * zp.real() + zp.imag() * zp.imag());
        khat[static_cast<std::size_t>(l)] =
            cdouble((num.real() * zp.real() + num.imag() * zp.imag()) * sz,
                    (num.imag() * zp.real() - num.real() * zp.imag()) * sz);
    }
    fft_pow2(khat, true);  // Lf is a power of two
    SsmKernel k;
    k.taps.resize(L);
    double rinv = 1.0;
    for (int i = 0; i < L; ++i, rinv /= rho) k.taps[i] = rinv * khat[static_cast<std::size_t>(i)];
    return k;
}

Eigen::VectorXcd apply_conv(const SsmKernel& kernel, const Eigen::VectorXcd& u, cdouble d_term) {
    const std::size_t n = static_cast<std::size_t>(u.size());
    std::vector<cdouble> kv(static_cast<std::size_t>(kernel.length()), cdouble(0, 0));
    for (int i = 0; i < kernel.length(); ++i) kv[static_cast<std::size_t>(i)] = kernel.taps[i];
    kv.resize(n, cdouble(0, 0));  // truncate/pad kernel to the input length
    std::vector<cdouble> uv(n);
    for (std::size_t i = 0; i < n; ++i) uv[i] = u[static_cast<Eigen::Index>(i)];
    std::vector<cdouble> yv = causal_conv_fft(kv, uv);
    Eigen::VectorXcd y(u.size());
    for (std::size_t i = 0; i < n; ++i) y[static_cast<Eigen::Index>(i)] = yv[i] + d_term * u[static_cast<Eigen::Index>(i)];
    return y;
}

namespace {

void put_u32(std::ofstream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void put_f64(std::ofstream& os, double v) { os.write(reinterpret_cast<const char*>(&v), 8); }

}  // namespace

void write_kernel(const std::string& path, const SsmKernel& kernel) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("write_kernel: cannot open " + path);
    os.write("SSMK", 4);
    put_u32(os, 1);
    put_u32(os, static_cast<uint32_t>(kernel.length()));
    for (int i = 0; i < kernel.length(); ++i) {
        put_f64(os, kernel.taps[i].real());
        put_f64(os, kernel.taps[i].imag());
    }
}

SsmKernel read_kernel(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("read_kernel: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "SSMK") throw CorruptHeader("read_kernel: bad magic");
    uint32_t version = 0, L = 0;
    is.read(reinterpret_cast<char*>(&version), 4);
    is.read(reinterpret_cast<char*>(&L), 4);
    if (version != 1) throw UnsupportedFormat("read_kernel: unsupported version");
    SsmKernel k;
    k.taps.resize(L);
    for (uint32_t i = 0; i < L; ++i) {
        double re = 0, im = 0;
        is.read(reinterpret_cast<char*>(&re), 8);
        is.read(reinterpret_cast<char*>(&im), 8);
        k.taps[static_cast<Eigen::Index>(i)] = cdouble(re, im);
    }
    if (!is) throw CorruptHeader("read_kernel: truncated file");
    return k;
}

}  // namespace s4se
