#include "s4se/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "s4se/fft.hpp"

namespace s4se {

Tensor::Tensor(std::vector<int> s, double fill) : shape(std::move(s)) {
    long n = 1;
    for (int d : shape) {
        if (d < 0) throw ShapeMismatch("Tensor: negative dimension");
        n *= d;
    }
    data.assign(static_cast<std::size_t>(n), fill);
}

Tensor Tensor::scalar(double v) {
    Tensor t(std::vector<int>{});
    t.data.assign(1, v);
    return t;
}

Tensor Tensor::zeros_like(const Tensor& t) {
    Tensor z;
    z.shape = t.shape;
    z.data.assign(t.data.size(), 0.0);
    return z;
}

bool Tensor::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

const Tensor& Var::val() const { return tape->value(id); }

Var Tape::leaf(Tensor value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    grads_.emplace_back();
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Tensor value, std::vector<int> parents, std::function<void(Tape&, int)> bw) {
    Node n;
    n.value = std::move(value);
    n.parents = std::move(parents);
    n.backward = std::move(bw);
    for (int p : n.parents)
        if (nodes_[static_cast<std::size_t>(p)].requires_grad) n.requires_grad = true;
    nodes_.push_back(std::move(n));
    grads_.emplace_back();
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Tensor& Tape::grad(int id) {
    Tensor& g = grads_[static_cast<std::size_t>(id)];
    if (g.data.empty() && nodes_[static_cast<std::size_t>(id)].value.size() > 0) {
        g = Tensor::zeros_like(nodes_[static_cast<std::size_t>(id)].value);
    }
    return g;
}

bool Tape::reached(int id) const { return !grads_[static_cast<std::size_t>(id)].data.empty(); }

void Tape::backward(Var loss) {
    if (loss.tape != this) throw ShapeMismatch("backward: loss from a different tape");
    if (value(loss.id).size() != 1) throw ShapeMismatch("backward: loss must be scalar");
    for (auto& g : grads_) g.data.clear();
    grad(loss.id).data.assign(1, 1.0);
    for (int i = loss.id; i >= 0; --i) {
        auto& n = nodes_[static_cast<std::size_t>(i)];
        if (!n.requires_grad || !n.backward) continue;
        if (grads_[static_cast<std::size_t>(i)].data.empty()) continue;  // unreached
        n.backward(*this, i);
    }
}

namespace ad {

namespace {

void check_same_tape(Var a, Var b) {
    if (a.tape != b.tape) throw ShapeMismatch("op: vars from different tapes");
}

// Elementwise unary: value fn and local-derivative fn of the input value.
template <class F, class G>
Var unary(Var a, F&& f, G&& dfdx) {
    const Tensor& x = a.val();
    Tensor y = Tensor::zeros_like(x);
    for (long i = 0; i < x.size(); ++i) y[i] = f(x[i]);
    return a.tape->record(std::move(y), {a.id}, [aid = a.id, dfdx](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        const Tensor& x2 = t.value(aid);
        Tensor& ga = t.grad(aid);
        for (long i = 0; i < x2.size(); ++i) ga[i] += g[i] * dfdx(x2[i]);
    });
}

}  // namespace

Var constant(Tape& tape, Tensor t) { return tape.leaf(std::move(t), false); }

Var add(Var a, Var b) {
    check_same_tape(a, b);
    if (!a.val().same_shape(b.val())) throw ShapeMismatch("add: shape mismatch");
    Tensor y = a.val();
    for (long i = 0; i < y.size(); ++i) y[i] += b.val()[i];
    return a.tape->record(std::move(y), {a.id, b.id}, [aid = a.id, bid = b.id](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        Tensor& ga = t.grad(aid);
        Tensor& gb = t.grad(bid);
        for (long i = 0; i < g.size(); ++i) {
            ga[i] += g[i];
            gb[i] += g[i];
        }
    });
}

Var sub(Var a, Var b) {
    check_same_tape(a, b);
    if (!a.val().same_shape(b.val())) throw ShapeMismatch("sub: shape mismatch");
    Tensor y = a.val();
    for (long i = 0; i < y.size(); ++i) y[i] -= b.val()[i];
    return a.tape->record(std::move(y), {a.id, b.id}, [aid = a.id, bid = b.id](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        Tensor& ga = t.grad(aid);
        Tensor& gb = t.grad(bid);
        for (long i = 0; i < g.size(); ++i) {
            ga[i] += g[i];
            gb[i] -= g[i];
        }
    });
}

Var mul(Var a, Var b) {
    check_same_tape(a, b);
    if (!a.val().same_shape(b.val())) throw ShapeMismatch("mul: shape mismatch");
    Tensor y = a.val();
    for (long i = 0; i < y.size(); ++i) y[i] *= b.val()[i];
    return a.tape->record(std::move(y), {a.id, b.id}, [aid = a.id, bid = b.id](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        const Tensor& xa = t.value(aid);
        const Tensor& xb = t.value(bid);
        Tensor& ga = t.grad(aid);
        Tensor& gb = t.grad(bid);
        for (long i = 0; i < g.size(); ++i) {
            ga[i] += g[i] * xb[i];
            gb[i] += g[i] * xa[i];
        }
    });
}

Var div(Var a, Var b) {
    check_same_tape(a, b);
    if (!a.val().same_shape(b.val())) throw ShapeMismatch("div: shape mismatch");
    Tensor y = a.val();
    for (long i = 0; i < y.size(); ++i) y[i] /= b.val()[i];
    return a.tape->record(std::move(y), {a.id, b.id}, [aid = a.id, bid = b.id](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        const Tensor& xa = t.value(aid);
        const Tensor& xb = t.value(bid);
        Tensor& ga = t.grad(aid);
        Tensor& gb = t.grad(bid);
        for (long i = 0; i < g.size(); ++i) {
            ga[i] += g[i] / xb[i];
            gb[i] -= g[i] * xa[i] / (xb[i] * xb[i]);
        }
    });
}

Var neg(Var a) { return scale(a, -1.0); }

Var scale(Var a, double c) {
    return unary(a, [c](double x) { return c * x; }, [c](double) { return c; });
}

Var add_const(Var a, double c) {
    return unary(a, [c](double x) { return x + c; }, [](double) { return 1.0; });
}

Var vexp(Var a) {
    return unary(a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

Var vlog(Var a) {
    return unary(a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Var vsqrt(Var a) {
    return unary(a, [](double x) { return std::sqrt(x); },
                 [](double x) { return x > 0.0 ? 0.5 / std::sqrt(x) : 0.0; });
}

Var vabs(Var a) {
    return unary(a, [](double x) { return std::abs(x); },
                 [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var vtanh(Var a) {
    return unary(a, [](double x) { return std::tanh(x); },
                 [](double x) { const double t = std::tanh(x); return 1.0 - t * t; });
}

Var sigmoid(Var a) {
    auto sg = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
    return unary(a, sg, [sg](double x) { const double s = sg(x); return s * (1.0 - s); });
}

Var softplus(Var a) {
    // overflow-safe log(1 + e^x)
    auto sp = [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); };
    return unary(a, sp, [](double x) { return 1.0 / (1.0 + std::exp(-x)); });
}

Var gelu(Var a) {
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * kPi);
    return unary(
        a, [=](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
        [=](double x) {
            return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
        });
}

Var clamp_min(Var a, double lo) {
    return unary(a, [lo](double x) { return std::max(x, lo); },
                 [lo](double x) { return x > lo ? 1.0 : 0.0; });
}

Var sum(Var a) {
    double s = 0;
    for (long i = 0; i < a.val().size(); ++i) s += a.val()[i];
    return a.tape->record(Tensor::scalar(s), {a.id}, [aid = a.id](Tape& t, int self) {
        const double g = t.grad(self)[0];
        Tensor& ga = t.grad(aid);
        for (long i = 0; i < ga.size(); ++i) ga[i] += g;
    });
}

Var mean(Var a) {
    const long n = a.val().size();
    if (n == 0) throw ShapeMismatch("mean: empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(n));
}

namespace {

Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
as_mat(const Tensor& t, int rows, int cols) {
    return {t.data.data(), rows, cols};
}

Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
as_mat(Tensor& t, int rows, int cols) {
    return {t.data.data(), rows, cols};
}

}  // namespace

Var matmul(Var a, Var b) {
    check_same_tape(a, b);
    const Tensor& A = a.val();
    const Tensor& B = b.val();
    if (A.ndim() != 2 || B.ndim() != 2 || A.dim(1) != B.dim(0))
        throw ShapeMismatch("matmul: incompatible shapes");
    const int m = A.dim(0), k = A.dim(1), n = B.dim(1);
    Tensor y({m, n});
    as_mat(y, m, n) = as_mat(A, m, k) * as_mat(B, k, n);
    return a.tape->record(std::move(y), {a.id, b.id},
                          [aid = a.id, bid = b.id, m, k, n](Tape& t, int self) {
                              auto G = as_mat(t.grad(self), m, n);
                              as_mat(t.grad(aid), m, k).noalias() +=
                                  G * as_mat(t.value(bid), k, n).transpose();
                              as_mat(t.grad(bid), k, n).noalias() +=
                                  as_mat(t.value(aid), m, k).transpose() * G;
                          });
}

Var linear_cols(Var w, Var x, Var b) {
    check_same_tape(w, x);
    check_same_tape(w, b);
    const Tensor& W = w.val();
    const Tensor& X = x.val();
    const Tensor& B = b.val();
    if (W.ndim() != 2 || X.ndim() < 2) throw ShapeMismatch("linear_cols: bad ranks");
    const int cin = W.dim(1), cout = W.dim(0);
    if (X.dim(0) != cin || B.size() != cout) throw ShapeMismatch("linear_cols: shape mismatch");
    const int m = static_cast<int>(X.size() / cin);
    std::vector<int> oshape = X.shape;
    oshape[0] = cout;
    Tensor y(oshape);
    auto Y = as_mat(y, cout, m);
    Y = as_mat(W, cout, cin) * as_mat(X, cin, m);
    for (int i = 0; i < cout; ++i) Y.row(i).array() += B[i];
    return w.tape->record(std::move(y), {w.id, x.id, b.id},
                          [wid = w.id, xid = x.id, bid = b.id, cin, cout, m](Tape& t, int self) {
                              auto G = as_mat(t.grad(self), cout, m);
                              as_mat(t.grad(wid), cout, cin).noalias() +=
                                  G * as_mat(t.value(xid), cin, m).transpose();
                              as_mat(t.grad(xid), cin, m).noalias() +=
                                  as_mat(t.value(wid), cout, cin).transpose() * G;
                              Tensor& gb = t.grad(bid);
                              for (int i = 0; i < cout; ++i) gb[i] += G.row(i).sum();
                          });
}

Var layer_norm_cols(Var x, Var gamma, Var beta, double eps) {
    check_same_tape(x, gamma);
    check_same_tape(x, beta);
    const Tensor& X = x.val();
    const int C = X.dim(0);
    const int m = static_cast<int>(X.size() / C);
    if (gamma.val().size() != C || beta.val().size() != C)
        throw ShapeMismatch("layer_norm_cols: parameter size");
    Tensor y = X;
    auto Xm = as_mat(X, C, m);
    auto Ym = as_mat(y, C, m);
    Tensor xhat({C, m});
    auto H = as_mat(xhat, C, m);
    Tensor istd({m});
    for (int j = 0; j < m; ++j) {
        const double mu = Xm.col(j).mean();
        const double var = (Xm.col(j).array() - mu).square().mean();
        const double is = 1.0 / std::sqrt(var + eps);
        istd[j] = is;
        H.col(j) = (Xm.col(j).array() - mu) * is;
        for (int i = 0; i < C; ++i) Ym(i, j) = gamma.val()[i] * H(i, j) + beta.val()[i];
    }
    return x.tape->record(
        std::move(y), {x.id, gamma.id, beta.id},
        [xid = x.id, gid = gamma.id, bid = beta.id, C, m, xhat = std::move(xhat),
         istd = std::move(istd)](Tape& t, int self) {
            auto G = as_mat(t.grad(self), C, m);
            auto H2 = as_mat(xhat, C, m);
            Tensor& gg = t.grad(gid);
            Tensor& gb = t.grad(bid);
            auto GX = as_mat(t.grad(xid), C, m);
            const Tensor& gamma_v = t.value(gid);
            for (int j = 0; j < m; ++j) {
                double mean_dh = 0, mean_dhh = 0;
                Eigen::VectorXd dh(C);
                for (int i = 0; i < C; ++i) {
                    gg[i] += G(i, j) * H2(i, j);
                    gb[i] += G(i, j);
                    dh[i] = G(i, j) * gamma_v[i];
                    mean_dh += dh[i];
                    mean_dhh += dh[i] * H2(i, j);
                }
                mean_dh /= C;
                mean_dhh /= C;
                for (int i = 0; i < C; ++i)
                    GX(i, j) += istd[j] * (dh[i] - mean_dh - H2(i, j) * mean_dhh);
            }
        });
}

Var reshape(Var a, std::vector<int> shape) {
    long n = 1;
    for (int d : shape) n *= d;
    if (n != a.val().size()) throw ShapeMismatch("reshape: size mismatch");
    Tensor y = a.val();
    y.shape = shape;
    return a.tape->record(std::move(y), {a.id}, [aid = a.id](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        Tensor& ga = t.grad(aid);
        for (long i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

Var concat_rows(Var a, Var b) {
    check_same_tape(a, b);
    const Tensor& A = a.val();
    const Tensor& B = b.val();
    if (A.ndim() != B.ndim() || A.ndim() < 1) throw ShapeMismatch("concat_rows: rank");
    for (int i = 1; i < A.ndim(); ++i)
        if (A.dim(i) != B.dim(i)) throw ShapeMismatch("concat_rows: trailing dims differ");
    std::vector<int> oshape = A.shape;
    oshape[0] += B.dim(0);
    Tensor y(oshape);
    std::copy(A.data.begin(), A.data.end(), y.data.begin());
    std::copy(B.data.begin(), B.data.end(), y.data.begin() + A.data.size());
    return a.tape->record(std::move(y), {a.id, b.id},
                          [aid = a.id, bid = b.id, na = A.size()](Tape& t, int self) {
                              const Tensor& g = t.grad(self);
                              Tensor& ga = t.grad(aid);
                              Tensor& gb = t.grad(bid);
                              for (long i = 0; i < na; ++i) ga[i] += g[i];
                              for (long i = na; i < g.size(); ++i) gb[i - na] += g[i];
                          });
}

Var slice_rows(Var a, int start, int count) {
    const Tensor& A = a.val();
    if (start < 0 || count < 0 || start + count > A.dim(0))
        throw ShapeMismatch("slice_rows: out of range");
    const long stride = A.size() / A.dim(0);
    std::vector<int> oshape = A.shape;
    oshape[0] = count;
    Tensor y(oshape);
    std::copy(A.data.begin() + start * stride, A.data.begin() + (start + count) * stride,
              y.data.begin());
    return a.tape->record(std::move(y), {a.id},
                          [aid = a.id, start, stride](Tape& t, int self) {
                              const Tensor& g = t.grad(self);
                              Tensor& ga = t.grad(aid);
                              for (long i = 0; i < g.size(); ++i) ga[start * stride + i] += g[i];
                          });
}

Var pad2d_to(Var a, int F2, int T2) {
    const Tensor& A = a.val();
    if (A.ndim() != 3) throw ShapeMismatch("pad2d_to: need [C,F,T]");
    const int C = A.dim(0), F = A.dim(1), T = A.dim(2);
    if (F2 < F || T2 < T) throw ShapeMismatch("pad2d_to: target smaller than input");
    Tensor y({C, F2, T2});
    for (int c = 0; c < C; ++c)
        for (int f = 0; f < F; ++f)
            for (int t = 0; t < T; ++t)
                y[(static_cast<long>(c) * F2 + f) * T2 + t] =
                    A[(static_cast<long>(c) * F + f) * T + t];
    return a.tape->record(std::move(y), {a.id}, [aid = a.id, C, F, T, F2, T2](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        Tensor& ga = t.grad(aid);
        for (int c = 0; c < C; ++c)
            for (int f = 0; f < F; ++f)
                for (int u = 0; u < T; ++u)
                    ga[(static_cast<long>(c) * F + f) * T + u] +=
                        g[(static_cast<long>(c) * F2 + f) * T2 + u];
    });
}

Var crop2d(Var a, int F, int T) {
    const Tensor& A = a.val();
    if (A.ndim() != 3) throw ShapeMismatch("crop2d: need [C,F,T]");
    const int C = A.dim(0), F2 = A.dim(1), T2 = A.dim(2);
    if (F > F2 || T > T2) throw ShapeMismatch("crop2d: target larger than input");
    Tensor y({C, F, T});
    for (int c = 0; c < C; ++c)
        for (int f = 0; f < F; ++f)
            for (int t = 0; t < T; ++t)
                y[(static_cast<long>(c) * F + f) * T + t] =
                    A[(static_cast<long>(c) * F2 + f) * T2 + t];
    return a.tape->record(std::move(y), {a.id}, [aid = a.id, C, F, T, F2, T2](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        Tensor& ga = t.grad(aid);
        for (int c = 0; c < C; ++c)
            for (int f = 0; f < F; ++f)
                for (int u = 0; u < T; ++u)
                    ga[(static_cast<long>(c) * F2 + f) * T2 + u] +=
                        g[(static_cast<long>(c) * F + f) * T + u];
    });
}

Var pad1d_to(Var a, int L2) {
    const Tensor& A = a.val();
    if (A.ndim() != 2) throw ShapeMismatch("pad1d_to: need [C,L]");
    const int C = A.dim(0), L = A.dim(1);
    if (L2 < L) throw ShapeMismatch("pad1d_to: target smaller than input");
    Tensor y({C, L2});
    for (int c = 0; c < C; ++c)
        for (int l = 0; l < L; ++l) y[static_cast<long>(c) * L2 + l] = A[static_cast<long>(c) * L + l];
    return a.tape->record(std::move(y), {a.id}, [aid = a.id, C, L, L2](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        Tensor& ga = t.grad(aid);
        for (int c = 0; c < C; ++c)
            for (int l = 0; l < L; ++l)
                ga[static_cast<long>(c) * L + l] += g[static_cast<long>(c) * L2 + l];
    });
}

Var crop1d(Var a, int L) {
    const Tensor& A = a.val();
    if (A.ndim() != 2) throw ShapeMismatch("crop1d: need [C,L]");
    const int C = A.dim(0), L2 = A.dim(1);
    if (L > L2) throw ShapeMismatch("crop1d: target larger than input");
    Tensor y({C, L});
    for (int c = 0; c < C; ++c)
        for (int l = 0; l < L; ++l) y[static_cast<long>(c) * L + l] = A[static_cast<long>(c) * L2 + l];
    return a.tape->record(std::move(y), {a.id}, [aid = a.id, C, L, L2](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        Tensor& ga = t.grad(aid);
        for (int c = 0; c < C; ++c)
            for (int l = 0; l < L; ++l)
                ga[static_cast<long>(c) * L2 + l] += g[static_cast<long>(c) * L + l];
    });
}

Var avgpool2d(Var a) {
    const Tensor& A = a.val();
    if (A.ndim() != 3) throw ShapeMismatch("avgpool2d: need [C,F,T]");
    const int C = A.dim(0), F = A.dim(1), T = A.dim(2);
    if (F % 2 || T % 2) throw ShapeMismatch("avgpool2d: dims must be even");
    const int Fo = F / 2, To = T / 2;
    Tensor y({C, Fo, To});
    for (int c = 0; c < C; ++c)
        for (int f = 0; f < Fo; ++f)
            for (int t = 0; t < To; ++t) {
                double s = 0;
                for (int df = 0; df < 2; ++df)
                    for (int dt = 0; dt < 2; ++dt)
                        s += A[(static_cast<long>(c) * F + 2 * f + df) * T + 2 * t + dt];
                y[(static_cast<long>(c) * Fo + f) * To + t] = 0.25 * s;
            }
    return a.tape->record(std::move(y), {a.id}, [aid = a.id, C, F, T, Fo, To](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        Tensor& ga = t.grad(aid);
        for (int c = 0; c < C; ++c)
            for (int f = 0; f < Fo; ++f)
                for (int u = 0; u < To; ++u) {
                    const double gv = 0.25 * g[(static_cast<long>(c) * Fo + f) * To + u];
                    for (int df = 0; df < 2; ++df)
                        for (int dt = 0; dt < 2; ++dt)
                            ga[(static_cast<long>(c) * F + 2 * f + df) * T + 2 * u + dt] += gv;
                }
    });
}

Var upsample2d(Var a) {
    const Tensor& A = a.val();
    if (A.ndim() != 3) throw ShapeMismatch("upsample2d: need [C,F,T]");
    const int C = A.dim(0), F = A.dim(1), T = A.dim(2);
    Tensor y({C, 2 * F, 2 * T});
    for (int c = 0; c < C; ++c)
        for (int f = 0; f < F; ++f)
            for (int t = 0; t < T; ++t) {
                const double v = A[(static_cast<long>(c) * F + f) * T + t];
                for (int df = 0; df < 2; ++df)
                    for (int dt = 0; dt < 2; ++dt)
                        y[(static_cast<long>(c) * 2 * F + 2 * f + df) * 2 * T + 2 * t + dt] = v;
            }
    return a.tape->record(std::move(y), {a.id}, [aid = a.id, C, F, T](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        Tensor& ga = t.grad(aid);
        for (int c = 0; c < C; ++c)
            for (int f = 0; f < F; ++f)
                for (int u = 0; u < T; ++u) {
                    double s = 0;
                    for (int df = 0; df < 2; ++df)
                        for (int dt = 0; dt < 2; ++dt)
                            s += g[(static_cast<long>(c) * 2 * F + 2 * f + df) * 2 * T + 2 * u + dt];
                    ga[(static_cast<long>(c) * F + f) * T + u] += s;
                }
    });
}

Var avgpool1d(Var a, int k) {
    const Tensor& A = a.val();
    if (A.ndim() != 2) throw ShapeMismatch("avgpool1d: need [C,L]");
    const int C = A.dim(0), L = A.dim(1);
    if (L % k) throw ShapeMismatch("avgpool1d: L not divisible by k");
    const int Lo = L / k;
    Tensor y({C, Lo});
    for (int c = 0; c < C; ++c)
        for (int l = 0; l < Lo; ++l) {
            double s = 0;
            for (int d = 0; d < k; ++d) s += A[static_cast<long>(c) * L + l * k + d];
            y[static_cast<long>(c) * Lo + l] = s / k;
        }
    return a.tape->record(std::move(y), {a.id}, [aid = a.id, C, L, Lo, k](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        Tensor& ga = t.grad(aid);
        for (int c = 0; c < C; ++c)
            for (int l = 0; l < Lo; ++l) {
                const double gv = g[static_cast<long>(c) * Lo + l] / k;
                for (int d = 0; d < k; ++d) ga[static_cast<long>(c) * L + l * k + d] += gv;
            }
    });
}

Var upsample1d(Var a, int k) {
    const Tensor& A = a.val();
    if (A.ndim() != 2) throw ShapeMismatch("upsample1d: need [C,L]");
    const int C = A.dim(0), L = A.dim(1);
    Tensor y({C, L * k});
    for (int c = 0; c < C; ++c)
        for (int l = 0; l < L; ++l)
            for (int d = 0; d < k; ++d)
                y[static_cast<long>(c) * L * k + l * k + d] = A[static_cast<long>(c) * L + l];
    return a.tape->record(std::move(y), {a.id}, [aid = a.id, C, L, k](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        Tensor& ga = t.grad(aid);
        for (int c = 0; c < C; ++c)
            for (int l = 0; l < L; ++l) {
                double s = 0;
                for (int d = 0; d < k; ++d) s += g[static_cast<long>(c) * L * k + l * k + d];
                ga[static_cast<long>(c) * L + l] += s;
            }
    });
}

// ---------------------------------------------------------------------------
// Fused SSM kernel primitive.
// Forward per channel h: dt = exp(log_dt); A = diag(Lambda) - p p^H;
// bilinear discretization; states s_0 = Bbar, s_k = Abar s_{k-1};
// taps[r][k] = c_r . s_k (bilinear product, no conjugation).
// Backward uses the complex cotangent convention cot = dL/dRe + i dL/dIm.
// ---------------------------------------------------------------------------

namespace {

struct AxisDims {
    int H, N, R, L;
};

AxisDims axis_dims(const Tensor& lam_re, const Tensor& c_re, int L) {
    if (lam_re.ndim() != 2 || c_re.ndim() != 3) throw ShapeMismatch("s4_axis_kernel: ranks");
    AxisDims d{lam_re.dim(0), lam_re.dim(1), c_re.dim(1), L};
    if (c_re.dim(0) != d.H || c_re.dim(2) != d.N) throw ShapeMismatch("s4_axis_kernel: c shape");
    return d;
}

Eigen::VectorXcd channel_cvec(const Tensor& re, const Tensor& im, int h, int n) {
    Eigen::VectorXcd v(n);
    for (int i = 0; i < n; ++i)
        v(i) = cdouble(re[static_cast<long>(h) * n + i], im[static_cast<long>(h) * n + i]);
    return v;
}

struct ChannelForward {
    Eigen::MatrixXcd Minv;   // (I - dt/2 A)^{-1}
    Eigen::MatrixXcd Abar;
    Eigen::VectorXcd Bbar;
    Eigen::MatrixXcd A;
    double dt;
};

ChannelForward channel_forward(const Eigen::VectorXcd& lam, const Eigen::VectorXcd& p,
                               const Eigen::VectorXcd& b, double log_dt) {
    ChannelForward f;
    const int n = static_cast<int>(lam.size());
    f.dt = std::exp(log_dt);
    f.A = Eigen::MatrixXcd(lam.asDiagonal());
    f.A.noalias() -= p * p.adjoint();
    Eigen::MatrixXcd M = Eigen::MatrixXcd::Identity(n, n) - (f.dt / 2.0) * f.A;
    Eigen::FullPivLU<Eigen::MatrixXcd> lu(M);
    if (!lu.isInvertible()) throw SingularMatrix("s4_axis_kernel: I - dt/2 A singular");
    f.Minv = lu.inverse();
    f.Abar = f.Minv * (Eigen::MatrixXcd::Identity(n, n) + (f.dt / 2.0) * f.A);
    f.Bbar = f.Minv * (f.dt * b);
    return f;
}

}  // namespace

Var s4_axis_kernel(Var lam_re, Var lam_im, Var p_re, Var p_im, Var b_re, Var b_im,
                   Var c_re, Var c_im, Var log_dt, int L) {
    Tape& tape = *lam_re.tape;
    const AxisDims d = axis_dims(lam_re.val(), c_re.val(), L);
    const int H = d.H, N = d.N, R = d.R;
    if (log_dt.val().size() != H) throw ShapeMismatch("s4_axis_kernel: log_dt size");

    Tensor out({H, R, 2, L});
#pragma omp parallel for schedule(static)
    for (int h = 0; h < H; ++h) {
        const auto lam = channel_cvec(lam_re.val(), lam_im.val(), h, N);
        const auto p = channel_cvec(p_re.val(), p_im.val(), h, N);
        const auto b = channel_cvec(b_re.val(), b_im.val(), h, N);
        const auto f = channel_forward(lam, p, b, log_dt.val()[h]);
        Eigen::MatrixXcd C(R, N);
        for (int r = 0; r < R; ++r) C.row(r) = channel_cvec(c_re.val(), c_im.val(), h * R + r, N);
        Eigen::VectorXcd s = f.Bbar;
        for (int k = 0; k < L; ++k) {
            if (k > 0) s = f.Abar * s;
            for (int r = 0; r < R; ++r) {
                const cdouble t = (C.row(r) * s)(0);
                out[((static_cast<long>(h) * R + r) * 2 + 0) * L + k] = t.real();
                out[((static_cast<long>(h) * R + r) * 2 + 1) * L + k] = t.imag();
            }
        }
    }

    std::vector<int> parents = {lam_re.id, lam_im.id, p_re.id, p_im.id,
                                b_re.id,  b_im.id,  c_re.id, c_im.id, log_dt.id};
    return tape.record(std::move(out), parents, [=](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        Tensor& g_lam_re = t.grad(lam_re.id);
        Tensor& g_lam_im = t.grad(lam_im.id);
        Tensor& g_p_re = t.grad(p_re.id);
        Tensor& g_p_im = t.grad(p_im.id);
        Tensor& g_b_re = t.grad(b_re.id);
        Tensor& g_b_im = t.grad(b_im.id);
        Tensor& g_c_re = t.grad(c_re.id);
        Tensor& g_c_im = t.grad(c_im.id);
        Tensor& g_logdt = t.grad(log_dt.id);
#pragma omp parallel for schedule(static)
        for (int h = 0; h < H; ++h) {
            const auto lam = channel_cvec(t.value(lam_re.id), t.value(lam_im.id), h, N);
            const auto p = channel_cvec(t.value(p_re.id), t.value(p_im.id), h, N);
            const auto b = channel_cvec(t.value(b_re.id), t.value(b_im.id), h, N);
            const auto f = channel_forward(lam, p, b, t.value(log_dt.id)[h]);
            Eigen::MatrixXcd C(R, N);
            for (int r = 0; r < R; ++r)
                C.row(r) = channel_cvec(t.value(c_re.id), t.value(c_im.id), h * R + r, N);

            // recompute states
            Eigen::MatrixXcd S(N, L);
            S.col(0) = f.Bbar;
            for (int k = 1; k < L; ++k) S.col(k) = f.Abar * S.col(k - 1);

            // complex cotangents of taps
            Eigen::MatrixXcd gc(R, L);
            for (int r = 0; r < R; ++r)
                for (int k = 0; k < L; ++k)
                    gc(r, k) = cdouble(g[((static_cast<long>(h) * R + r) * 2 + 0) * L + k],
                                       g[((static_cast<long>(h) * R + r) * 2 + 1) * L + k]);

            // taps: t_{r,k} = C_r . s_k  ->  cot_C_r += gc conj(s_k), cot_s_k += gc conj(C_r)
            Eigen::MatrixXcd cot_C = Eigen::MatrixXcd::Zero(R, N);
            Eigen::MatrixXcd cot_Abar = Eigen::MatrixXcd::Zero(N, N);
            Eigen::VectorXcd tk = Eigen::VectorXcd::Zero(N);
            for (int k = L - 1; k >= 0; --k) {
                Eigen::VectorXcd dir = Eigen::VectorXcd::Zero(N);
                for (int r = 0; r < R; ++r) {
                    cot_C.row(r) += gc(r, k) * S.col(k).conjugate().transpose();
                    dir += gc(r, k) * C.row(r).conjugate().transpose();
                }
                tk = (k == L - 1) ? dir : Eigen::VectorXcd(dir + f.Abar.adjoint() * tk);
                if (k > 0) cot_Abar.noalias() += tk * S.col(k - 1).adjoint();
            }
            const Eigen::VectorXcd cot_Bbar = tk;

            // through Abar = M^{-1} Np, Bbar = M^{-1} (dt b)
            const Eigen::MatrixXcd MinvH = f.Minv.adjoint();
            const Eigen::MatrixXcd X = MinvH * cot_Abar;
            Eigen::MatrixXcd cot_Np = X;
            Eigen::MatrixXcd cot_M = -X * f.Abar.adjoint();
            const Eigen::VectorXcd yv = MinvH * cot_Bbar;
            cot_M.noalias() -= yv * f.Bbar.adjoint();
            // dt b term
            const Eigen::VectorXcd cot_b = f.dt * yv;
            double cot_dt = (yv.conjugate().array() * b.array()).sum().real();

            // M = I - dt/2 A, Np = I + dt/2 A
            const Eigen::MatrixXcd cot_A = (f.dt / 2.0) * (cot_Np - cot_M);
            cot_dt += 0.5 * ((cot_Np.conjugate().array() * f.A.array()).sum().real() -
                             (cot_M.conjugate().array() * f.A.array()).sum().real());

            // A = diag(lam) - p p^H
            const Eigen::VectorXcd cot_lam = cot_A.diagonal();
            const Eigen::VectorXcd cot_p = -(cot_A + cot_A.adjoint()) * p;

            const double cot_logdt = f.dt * cot_dt;

            for (int i = 0; i < N; ++i) {
                g_lam_re[static_cast<long>(h) * N + i] += cot_lam(i).real();
                g_lam_im[static_cast<long>(h) * N + i] += cot_lam(i).imag();
                g_p_re[static_cast<long>(h) * N + i] += cot_p(i).real();
                g_p_im[static_cast<long>(h) * N + i] += cot_p(i).imag();
                g_b_re[static_cast<long>(h) * N + i] += cot_b(i).real();
                g_b_im[static_cast<long>(h) * N + i] += cot_b(i).imag();
            }
            for (int r = 0; r < R; ++r)
                for (int i = 0; i < N; ++i) {
                    g_c_re[(static_cast<long>(h) * R + r) * N + i] += cot_C(r, i).real();
                    g_c_im[(static_cast<long>(h) * R + r) * N + i] += cot_C(r, i).imag();
                }
            g_logdt[h] += cot_logdt;
        }
    });
}

Var conv1d_causal(Var u, Var k) {
    check_same_tape(u, k);
    const Tensor& U = u.val();
    const Tensor& K = k.val();
    if (U.ndim() != 2 || K.ndim() != 4) throw ShapeMismatch("conv1d_causal: ranks");
    const int H = U.dim(0), L = U.dim(1);
    if (K.dim(0) != H || K.dim(1) != 1 || K.dim(2) != 2 || K.dim(3) != L)
        throw ShapeMismatch("conv1d_causal: kernel shape");
    Tensor y({H, L});
#pragma omp parallel for schedule(static)
    for (int h = 0; h < H; ++h)
        causal_conv(&K.data[(static_cast<long>(h) * 2 + 0) * L], &U.data[static_cast<long>(h) * L],
                    &y.data[static_cast<long>(h) * L], static_cast<std::size_t>(L));
    return u.tape->record(std::move(y), {u.id, k.id},
                          [uid = u.id, kid = k.id, H, L](Tape& t, int self) {
                              const Tensor& g = t.grad(self);
                              const Tensor& U2 = t.value(uid);
                              const Tensor& K2 = t.value(kid);
                              Tensor& gu = t.grad(uid);
                              Tensor& gk = t.grad(kid);
#pragma omp parallel for schedule(static)
                              for (int h = 0; h < H; ++h) {
                                  std::vector<double> tmp(static_cast<std::size_t>(L));
                                  const double* gh = &g.data[static_cast<long>(h) * L];
                                  corr_trunc(gh, &K2.data[(static_cast<long>(h) * 2 + 0) * L],
                                             tmp.data(), static_cast<std::size_t>(L));
                                  for (int l = 0; l < L; ++l)
                                      gu.data[static_cast<long>(h) * L + l] += tmp[static_cast<std::size_t>(l)];
                                  corr_trunc(gh, &U2.data[static_cast<long>(h) * L], tmp.data(),
                                             static_cast<std::size_t>(L));
                                  for (int l = 0; l < L; ++l)
                                      gk.data[(static_cast<long>(h) * 2 + 0) * L + l] +=
                                          tmp[static_cast<std::size_t>(l)];
                              }
                          });
}

namespace {

// rows of an L1xL2 buffer convolved with kernel (length L2)
void rows_conv(const double* k, const double* u, double* y, int L1, int L2) {
    for (int i = 0; i < L1; ++i)
        causal_conv(k, u + static_cast<long>(i) * L2, y + static_cast<long>(i) * L2,
                    static_cast<std::size_t>(L2));
}

// columns convolved with kernel (length L1)
void cols_conv(const double* k, const double* u, double* y, int L1, int L2) {
    std::vector<double> col(static_cast<std::size_t>(L1)), out(static_cast<std::size_t>(L1));
    for (int j = 0; j < L2; ++j) {
        for (int i = 0; i < L1; ++i) col[static_cast<std::size_t>(i)] = u[static_cast<long>(i) * L2 + j];
        causal_conv(k, col.data(), out.data(), static_cast<std::size_t>(L1));
        for (int i = 0; i < L1; ++i) y[static_cast<long>(i) * L2 + j] = out[static_cast<std::size_t>(i)];
    }
}

void rows_corr(const double* g, const double* x, double* acc, int L1, int L2) {
    std::vector<double> tmp(static_cast<std::size_t>(L2));
    for (int i = 0; i < L1; ++i) {
        corr_trunc(g + static_cast<long>(i) * L2, x + static_cast<long>(i) * L2, tmp.data(),
                   static_cast<std::size_t>(L2));
        for (int j = 0; j < L2; ++j) acc[j] += tmp[static_cast<std::size_t>(j)];
    }
}

}  // namespace

Var s4nd_conv(Var u, Var k1, Var k2) {
    check_same_tape(u, k1);
    check_same_tape(u, k2);
    const Tensor& U = u.val();
    const Tensor& K1 = k1.val();
    const Tensor& K2 = k2.val();
    if (U.ndim() != 3 || K1.ndim() != 4 || K2.ndim() != 4) throw ShapeMismatch("s4nd_conv: ranks");
    const int H = U.dim(0), L1 = U.dim(1), L2 = U.dim(2);
    const int R = K1.dim(1);
    if (K1.dim(0) != H || K1.dim(2) != 2 || K1.dim(3) != L1 || K2.dim(0) != H ||
        K2.dim(1) != R || K2.dim(2) != 2 || K2.dim(3) != L2)
        throw ShapeMismatch("s4nd_conv: kernel shapes");

    const long plane = static_cast<long>(L1) * L2;
    Tensor y({H, L1, L2});
#pragma omp parallel for schedule(static)
    for (int h = 0; h < H; ++h) {
        std::vector<double> z(static_cast<std::size_t>(plane)), w(static_cast<std::size_t>(plane));
        const double* uh = &U.data[static_cast<std::size_t>(h * plane)];
        double* yh = &y.data[static_cast<std::size_t>(h * plane)];
        for (int r = 0; r < R; ++r) {
            // Re(K1 (x) K2) = ReK1 (x) ReK2 - ImK1 (x) ImK2
            for (int part = 0; part < 2; ++part) {
                const double sgn = part == 0 ? 1.0 : -1.0;
                const double* a = &K1.data[((static_cast<long>(h) * R + r) * 2 + part) * L1];
                const double* bkk = &K2.data[((static_cast<long>(h) * R + r) * 2 + part) * L2];
                rows_conv(bkk, uh, z.data(), L1, L2);
                cols_conv(a, z.data(), w.data(), L1, L2);
                for (long i = 0; i < plane; ++i) yh[i] += sgn * w[static_cast<std::size_t>(i)];
            }
        }
    }

    return u.tape->record(std::move(y), {u.id, k1.id, k2.id},
                          [uid = u.id, k1id = k1.id, k2id = k2.id, H, L1, L2, R,
                           plane](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        const Tensor& U2 = t.value(uid);
        const Tensor& K1v = t.value(k1id);
        const Tensor& K2v = t.value(k2id);
        Tensor& gu = t.grad(uid);
        Tensor& gk1 = t.grad(k1id);
        Tensor& gk2 = t.grad(k2id);
#pragma omp parallel for schedule(static)
        for (int h = 0; h < H; ++h) {
            std::vector<double> z(static_cast<std::size_t>(plane)), gz(static_cast<std::size_t>(plane)),
                tmp(static_cast<std::size_t>(std::max(L1, L2)));
            const double* uh = &U2.data[static_cast<std::size_t>(h * plane)];
            const double* gh = &g.data[static_cast<std::size_t>(h * plane)];
            for (int r = 0; r < R; ++r) {
                for (int part = 0; part < 2; ++part) {
                    const double sgn = part == 0 ? 1.0 : -1.0;
                    const double* a = &K1v.data[((static_cast<long>(h) * R + r) * 2 + part) * L1];
                    const double* bkk = &K2v.data[((static_cast<long>(h) * R + r) * 2 + part) * L2];
                    double* ga = &gk1.data[((static_cast<long>(h) * R + r) * 2 + part) * L1];
                    double* gb = &gk2.data[((static_cast<long>(h) * R + r) * 2 + part) * L2];
                    // recompute intermediate z = rows_conv(b, u)
                    rows_conv(bkk, uh, z.data(), L1, L2);
                    // grad wrt a (column kernel): per column corr of (sgn*g, z)
                    std::vector<double> colg(static_cast<std::size_t>(L1)),
                        colz(static_cast<std::size_t>(L1)), cola(static_cast<std::size_t>(L1));
                    for (int j = 0; j < L2; ++j) {
                        for (int i = 0; i < L1; ++i) {
                            colg[static_cast<std::size_t>(i)] = sgn * gh[static_cast<long>(i) * L2 + j];
                            colz[static_cast<std::size_t>(i)] = z[static_cast<std::size_t>(static_cast<long>(i) * L2 + j)];
                        }
                        corr_trunc(colg.data(), colz.data(), cola.data(), static_cast<std::size_t>(L1));
                        for (int i = 0; i < L1; ++i) ga[i] += cola[static_cast<std::size_t>(i)];
                        // grad into z along this column: corr of (colg, a)
                        corr_trunc(colg.data(), a, cola.data(), static_cast<std::size_t>(L1));
                        for (int i = 0; i < L1; ++i)
                            gz[static_cast<std::size_t>(static_cast<long>(i) * L2 + j)] = cola[static_cast<std::size_t>(i)];
                    }
                    // grad wrt b: rows corr of (gz, u); grad wrt u: rows corr of (gz, b)
                    rows_corr(gz.data(), uh, gb, L1, L2);
                    for (int i = 0; i < L1; ++i) {
                        corr_trunc(&gz[static_cast<std::size_t>(static_cast<long>(i) * L2)], bkk, tmp.data(),
                                   static_cast<std::size_t>(L2));
                        for (int j = 0; j < L2; ++j)
                            gu.data[static_cast<std::size_t>(h * plane + static_cast<long>(i) * L2 + j)] +=
                                tmp[static_cast<std::size_t>(j)];
                    }
                }
            }
        }
    });
}

Var stft_mag(Var y, const StftConfig& cfg) {
    const Tensor& Y = y.val();
    if (Y.ndim() != 1) throw ShapeMismatch("stft_mag: need [L]");
    std::vector<double> sig(Y.data.begin(), Y.data.end());
    ComplexSpectrogram spec = stft(sig, cfg);
    const int F = spec.bins(), T = spec.frames();
    Tensor out({F, T});
    for (int f = 0; f < F; ++f)
        for (int t = 0; t < T; ++t) out[static_cast<long>(f) * T + t] = std::abs(spec.data(f, t));
    return y.tape->record(std::move(out), {y.id},
                          [yid = y.id, spec = std::move(spec), cfg, F, T](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        const long L = t.value(yid).size();
        const int pad = cfg.center ? cfg.n_fft / 2 : 0;
        const long plen = L + 2L * pad;  // reflect-padded length before tail extension
        std::vector<double> xg(static_cast<std::size_t>(plen), 0.0);
        const std::vector<double> w = cfg.window();
        const int woff = (cfg.n_fft - cfg.win_length) / 2;
        std::vector<cdouble> cot(static_cast<std::size_t>(cfg.n_fft));
        for (int tt = 0; tt < T; ++tt) {
            std::fill(cot.begin(), cot.end(), cdouble(0, 0));
            for (int f = 0; f < F; ++f) {
                const cdouble s = spec.data(f, tt);
                const double m = std::abs(s);
                if (m > 1e-300)
                    cot[static_cast<std::size_t>(f)] = g[static_cast<long>(f) * T + tt] * s / m;
            }
            const std::vector<cdouble> fg = idft_unscaled(cot);
            const long base = static_cast<long>(tt) * cfg.hop_length;
            for (int n = 0; n < cfg.win_length; ++n) {
                const long idx = base + woff + n;
                if (idx < plen)
                    xg[static_cast<std::size_t>(idx)] +=
                        w[static_cast<std::size_t>(n)] * fg[static_cast<std::size_t>(woff + n)].real();
            }
        }
        Tensor& gy = t.grad(yid);
        if (cfg.center) {
            // adjoint of reflect_pad: scatter-add each padded position to its source
            for (long i = 0; i < plen; ++i) {
                long j = i - pad;
                while (j < 0 || j >= L) {
                    if (j < 0) j = -j;
                    if (j >= L) j = 2 * (L - 1) - j;
                }
                gy[j] += xg[static_cast<std::size_t>(i)];
            }
        } else {
            for (long i = 0; i < std::min(plen, L); ++i) gy[i] += xg[static_cast<std::size_t>(i)];
        }
    });
}

}  // namespace ad
}  // namespace s4se
