#include "s4se/ssm_nd.hpp"

#include <fstream>

namespace s4se {

void Ssm2D::validate() const {
    if (c_factors.empty()) throw DimensionMismatch("Ssm2D: rank must be >= 1");
    for (const auto& f : c_factors) {
        if (f.c1.size() != axis1.state_dim() || f.c2.size() != axis2.state_dim())
            throw DimensionMismatch("Ssm2D: factor length does not match axis state size");
    }
}

SsmKernel2D materialize_kernel_2d(const Ssm2D& ssm, int L1, int L2) {
    if (L1 < 1 || L2 < 1) throw DimensionMismatch("materialize_kernel_2d: lengths must be >= 1");
    ssm.validate();
    SsmKernel2D k;
    const DiscreteSSM d1 = discretize(ssm.axis1.dense(), ssm.axis1.delta);
    const DiscreteSSM d2 = discretize(ssm.axis2.dense(), ssm.axis2.delta);
    for (const auto& f : ssm.c_factors) {
        DiscreteSSM a = d1;
        a.C = f.c1.transpose();
        DiscreteSSM b = d2;
        b.C = f.c2.transpose();
        k.k1.push_back(materialize_kernel(a, L1).taps);
        k.k2.push_back(materialize_kernel(b, L2).taps);
    }
    k.taps = Eigen::MatrixXcd::Zero(L1, L2);
    for (std::size_t r = 0; r < k.k1.size(); ++r)
        k.taps.noalias() += k.k1[r] * k.k2[r].transpose();
    return k;
}

namespace {

std::vector<cdouble> to_len(const Eigen::VectorXcd& k, Eigen::Index n) {
    std::vector<cdouble> kv(static_cast<std::size_t>(n), cdouble(0, 0));
    for (Eigen::Index i = 0; i < std::min(n, k.size()); ++i) kv[static_cast<std::size_t>(i)] = k[i];
    return kv;
}

// Causal conv of kernel k along every column (axis-1 direction) of u.
Eigen::MatrixXcd conv_cols(const Eigen::VectorXcd& k, const Eigen::MatrixXcd& u) {
    Eigen::MatrixXcd y(u.rows(), u.cols());
    const auto kv = to_len(k, u.rows());
    std::vector<cdouble> col(static_cast<std::size_t>(u.rows()));
    for (Eigen::Index j = 0; j < u.cols(); ++j) {
        for (Eigen::Index i = 0; i < u.rows(); ++i) col[static_cast<std::size_t>(i)] = u(i, j);
        std::vector<cdouble> yc = causal_conv(kv, col);
        for (Eigen::Index i = 0; i < u.rows(); ++i) y(i, j) = yc[static_cast<std::size_t>(i)];
    }
    return y;
}

// Causal conv of kernel k along every row (axis-2 direction) of u.
Eigen::MatrixXcd conv_rows(const Eigen::VectorXcd& k, const Eigen::MatrixXcd& u) {
    Eigen::MatrixXcd y(u.rows(), u.cols());
    const auto kv = to_len(k, u.cols());
    std::vector<cdouble> row(static_cast<std::size_t>(u.cols()));
    for (Eigen::Index i = 0; i < u.rows(); ++i) {
        for (Eigen::Index j = 0; j < u.cols(); ++j) row[static_cast<std::size_t>(j)] = u(i, j);
        std::vector<cdouble> yr = causal_conv(kv, row);
        for (Eigen::Index j = 0; j < u.cols(); ++j) y(i, j) = yr[static_cast<std::size_t>(j)];
    }
    return y;
}

}  // namespace

Eigen::MatrixXcd apply_conv_2d(const SsmKernel2D& kernel, const Eigen::MatrixXcd& u) {
    if (kernel.length1() == 0 || kernel.length2() == 0)
        throw DimensionMismatch("apply_conv_2d: empty kernel");
    const Eigen::Index L1 = u.rows(), L2 = u.cols();
    if (!kernel.k1.empty()) {
        // Separable path: per rank, rows with k2 then columns with k1.
        Eigen::MatrixXcd y = Eigen::MatrixXcd::Zero(L1, L2);
        for (std::size_t r = 0; r < kernel.k1.size(); ++r)
            y += conv_cols(kernel.k1[r], conv_rows(kernel.k2[r], u));
        return y;
    }
    // Dense fallback: per-row FFT convolution of u with each kernel row,
    // accumulated at the matching row shift.
    Eigen::MatrixXcd y = Eigen::MatrixXcd::Zero(L1, L2);
    std::vector<cdouble> row(static_cast<std::size_t>(L2));
    for (Eigen::Index s = 0; s < std::min<Eigen::Index>(kernel.length1(), L1); ++s) {
        std::vector<cdouble> kr = to_len(kernel.taps.row(s).transpose(), L2);
        for (Eigen::Index i = 0; i + s < L1; ++i) {
            for (Eigen::Index j = 0; j < L2; ++j) row[static_cast<std::size_t>(j)] = u(i, j);
            std::vector<cdouble> c = causal_conv(kr, row);
            for (Eigen::Index j = 0; j < L2; ++j) y(i + s, j) += c[static_cast<std::size_t>(j)];
        }
    }
    return y;
}

void write_kernel_2d(const std::string& path, const SsmKernel2D& kernel) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("write_kernel_2d: cannot open " + path);
    os.write("SSK2", 4);
    const uint32_t version = 1, L1 = static_cast<uint32_t>(kernel.length1()),
                   L2 = static_cast<uint32_t>(kernel.length2()), R = static_cast<uint32_t>(kernel.rank());
    os.write(reinterpret_cast<const char*>(&version), 4);
    os.write(reinterpret_cast<const char*>(&L1), 4);
    os.write(reinterpret_cast<const char*>(&L2), 4);
    os.write(reinterpret_cast<const char*>(&R), 4);
    for (uint32_t i = 0; i < L1; ++i) {
        for (uint32_t j = 0; j < L2; ++j) {
            const double re = kernel.taps(i, j).real(), im = kernel.taps(i, j).imag();
            os.write(reinterpret_cast<const char*>(&re), 8);
            os.write(reinterpret_cast<const char*>(&im), 8);
        }
    }
}

SsmKernel2D read_kernel_2d(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("read_kernel_2d: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "SSK2") throw CorruptHeader("read_kernel_2d: bad magic");
    uint32_t version = 0, L1 = 0, L2 = 0, R = 0;
    is.read(reinterpret_cast<char*>(&version), 4);
    is.read(reinterpret_cast<char*>(&L1), 4);
    is.read(reinterpret_cast<char*>(&L2), 4);
    is.read(reinterpret_cast<char*>(&R), 4);
    if (version != 1) throw UnsupportedFormat("read_kernel_2d: unsupported version");
    SsmKernel2D k;
    k.stored_rank = static_cast<int>(R);
    k.taps.resize(L1, L2);
    for (uint32_t i = 0; i < L1; ++i) {
        for (uint32_t j = 0; j < L2; ++j) {
            double re = 0, im = 0;
            is.read(reinterpret_cast<char*>(&re), 8);
            is.read(reinterpret_cast<char*>(&im), 8);
            k.taps(i, j) = cdouble(re, im);
        }
    }
    if (!is) throw CorruptHeader("read_kernel_2d: truncated file");
    return k;
}

}  // namespace s4se
