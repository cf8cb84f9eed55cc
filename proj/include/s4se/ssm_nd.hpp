#pragma once

#include <string>
#include <utility>
#include <vector>

#include "s4se/ssm_kernel.hpp"

namespace s4se {

// Two independent per-axis SSMs combined through a low-rank factorization of
// the output projection. The implied C tensor is sum_r c1_r (x) c2_r.
struct Ssm2D {
    DplrSSM axis1;  // its C field is unused; projections come from the factors
    DplrSSM axis2;
    struct Factor {
        Eigen::VectorXcd c1;  // length N1
        Eigen::VectorXcd c2;  // length N2
    };
    std::vector<Factor> c_factors;

    int rank() const { return static_cast<int>(c_factors.size()); }
    void validate() const;
};

struct SsmKernel2D {
    Eigen::MatrixXcd taps;  // L1 x L2, equals sum_r k1[r] k2[r]^T
    // Axis factors enabling the separable convolution path. Empty when the
    // kernel was loaded from a dump; apply_conv_2d then falls back to the
    // dense route.
    std::vector<Eigen::VectorXcd> k1;
    std::vector<Eigen::VectorXcd> k2;
    int stored_rank = 1;  // rank recorded in dumps when factors are absent

    int rank() const { return k1.empty() ? stored_rank : static_cast<int>(k1.size()); }
    int length1() const { return static_cast<int>(taps.rows()); }
    int length2() const { return static_cast<int>(taps.cols()); }
};

// Per rank component: 1-D kernels along each axis, summed outer products.
SsmKernel2D materialize_kernel_2d(const Ssm2D& ssm, int L1, int L2);

// Causal 2-D convolution truncated to the input shape; separable per-axis
// FFT passes when the kernel carries its factors. Axis 1 runs over rows,
// axis 2 over columns.
Eigen::MatrixXcd apply_conv_2d(const SsmKernel2D& kernel, const Eigen::MatrixXcd& u);

// Binary dump, magic "SSK2": u32 version=1, u32 L1, u32 L2, u32 R,
// row-major (re, im) f64 pairs of the summed taps.
void write_kernel_2d(const std::string& path, const SsmKernel2D& kernel);
SsmKernel2D read_kernel_2d(const std::string& path);

}  // namespace s4se
