#pragma once

#include <Eigen/Dense>
#include <complex>
#include <string>
#include <vector>

#include "s4se/common.hpp"
#include "s4se/fft.hpp"

namespace s4se {

// Continuous-time linear state space: x' = A x + B u, v = C x + D u.
struct ContinuousSSM {
    Eigen::MatrixXcd A;     // N x N
    Eigen::VectorXcd B;     // N x 1
    Eigen::RowVectorXcd C;  // 1 x N
    cdouble D{0.0, 0.0};

    int state_dim() const { return static_cast<int>(A.rows()); }
    void validate() const;
};

// Bilinear-discretized counterpart: x_k = Abar x_{k-1} + Bbar u_k.
struct DiscreteSSM {
    Eigen::MatrixXcd Abar;
    Eigen::VectorXcd Bbar;
    Eigen::RowVectorXcd C;
    cdouble D{0.0, 0.0};
    double delta = 0.0;

    int state_dim() const { return static_cast<int>(Abar.rows()); }
};

// Diagonal-plus-low-rank parameterization: A = diag(Lambda) - P P^*, D = 0.
struct DplrSSM {
    Eigen::VectorXcd Lambda;
    Eigen::VectorXcd P;
    Eigen::VectorXcd B;
    Eigen::VectorXcd C;
    double delta = 0.0;

    int state_dim() const { return static_cast<int>(Lambda.size()); }
    Eigen::MatrixXcd dense_A() const;  // diag(Lambda) - P P^*
    ContinuousSSM dense() const;
};

// Materialized convolution kernel (C Bbar, C Abar Bbar, ...).
struct SsmKernel {
    Eigen::VectorXcd taps;

    int length() const { return static_cast<int>(taps.size()); }
};

DiscreteSSM discretize(const ContinuousSSM& ssm, double delta);

// One recurrence step; returns the output sample and updates `state` in place.
cdouble step(const DiscreteSSM& dssm, Eigen::VectorXcd& state, cdouble u);

SsmKernel materialize_kernel(const DiscreteSSM& dssm, int L);

// Frequency-sampled fast path with a rank-1 Woodbury correction. Forward only.
// Throws NumericalInstability when |eig(Abar)| >= 1 + tol.
SsmKernel materialize_kernel_dplr(const DplrSSM& dplr, int L, double tol = 1e-6);

// v = Kbar * u (causal, truncated to |u|) + d_term * u.
Eigen::VectorXcd apply_conv(const SsmKernel& kernel, const Eigen::VectorXcd& u, cdouble d_term);

// Adjoint of materialize_kernel. `states` are the forward states s_k = Abar^k Bbar
// (as returned by kernel_states), `g` the complex cotangents of the taps
// (dL/dRe + i dL/dIm). Outputs cotangents of Abar, Bbar, C in the same convention.
struct KernelAdjoint {
    Eigen::MatrixXcd cot_Abar;
    Eigen::VectorXcd cot_Bbar;
    Eigen::RowVectorXcd cot_C;
};
std::vector<Eigen::VectorXcd> kernel_states(const DiscreteSSM& dssm, int L);
KernelAdjoint kernel_adjoint(const DiscreteSSM& dssm, const std::vector<Eigen::VectorXcd>& states,
                             const Eigen::VectorXcd& g);

// Binary dump, magic "SSMK": u32 version=1, u32 L, L (re, im) f64 pairs.
void write_kernel(const std::string& path, const SsmKernel& kernel);
SsmKernel read_kernel(const std::string& path);

}  // namespace s4se
