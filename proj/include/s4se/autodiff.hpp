#pragma once

#include <functional>
#include <string>
#include <vector>

#include "s4se/common.hpp"
#include "s4se/dsp.hpp"

namespace s4se {

// Dense row-major f64 tensor.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s, double fill = 0.0);
    static Tensor scalar(double v);
    static Tensor zeros_like(const Tensor& t);

    long size() const { return static_cast<long>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
    double& operator[](long i) { return data[static_cast<std::size_t>(i)]; }
    double operator[](long i) const { return data[static_cast<std::size_t>(i)]; }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    bool all_finite() const;
};

class Tape;

struct Var {
    Tape* tape = nullptr;
    int id = -1;
    const Tensor& val() const;
};

// Reverse-mode tape. Nodes are recorded in execution (= topological) order;
// backward() walks them once in reverse.
class Tape {
  public:
    struct Node {
        Tensor value;
        std::vector<int> parents;
        std::function<void(Tape&, int)> backward;  // pulls grad(self), pushes into parents
        bool requires_grad = false;
    };

    Var leaf(Tensor value, bool requires_grad);
    Var record(Tensor value, std::vector<int> parents, std::function<void(Tape&, int)> bw);

    void backward(Var loss);
    const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
    // Zero-initialized on first touch; valid only after backward().
    Tensor& grad(int id);
    const Tensor& grad(Var v) { return grad(v.id); }
    // True when backward() propagated a nonempty gradient into this node.
    bool reached(int id) const;
    std::size_t num_nodes() const { return nodes_.size(); }

  private:
    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
};

namespace ad {

// elementwise
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double c);
Var add_const(Var a, double c);
Var vexp(Var a);
Var vlog(Var a);
Var vsqrt(Var a);
Var vabs(Var a);   // subgradient sign(0) = 0
Var vtanh(Var a);
Var sigmoid(Var a);
Var softplus(Var a);
Var gelu(Var a);   // exact erf form
Var clamp_min(Var a, double lo);  // gradient passes only where a > lo

// reductions
Var sum(Var a);
Var mean(Var a);

// linear algebra on [rows, cols] tensors
Var matmul(Var a, Var b);
// x: [Cin, M], w: [Cout, Cin], b: [Cout] -> [Cout, M]
Var linear_cols(Var w, Var x, Var b);
// per-column layer norm over the row (channel) axis; gamma/beta: [C]
Var layer_norm_cols(Var x, Var gamma, Var beta, double eps = 1e-5);

// shape plumbing
Var reshape(Var a, std::vector<int> shape);
Var concat_rows(Var a, Var b);
Var slice_rows(Var a, int start, int count);
// [C, F, T] zero-pad (bottom/right) or crop back
Var pad2d_to(Var a, int F2, int T2);
Var crop2d(Var a, int F, int T);
Var pad1d_to(Var a, int L2);
Var crop1d(Var a, int L);

// resampling, [C, F, T] and [C, L]
Var avgpool2d(Var a);          // 2x2, even dims required
Var upsample2d(Var a);         // nearest 2x2
Var avgpool1d(Var a, int k);
Var upsample1d(Var a, int k);

// Fused SSM primitives. Shapes:
//   lam/p/b re+im: [H, N]; c re+im: [H, R, N]; log_dt: [H]
//   output kernel: [H, R, 2, L] (planes: re, im)
Var s4_axis_kernel(Var lam_re, Var lam_im, Var p_re, Var p_im, Var b_re, Var b_im,
                   Var c_re, Var c_im, Var log_dt, int L);
// u: [H, L], k: [H, 1, 2, L] (re plane used) -> [H, L]
Var conv1d_causal(Var u, Var k);
// u: [H, L1, L2], k1: [H, R, 2, L1], k2: [H, R, 2, L2] -> [H, L1, L2]
// computes Re(sum_r K1_r (x) K2_r) * u separably
Var s4nd_conv(Var u, Var k1, Var k2);

// y: [L] waveform -> [F, T] magnitude spectrogram (centered stft)
Var stft_mag(Var y, const StftConfig& cfg);

// constant helper
Var constant(Tape& tape, Tensor t);

}  // namespace ad
}  // namespace s4se
