#pragma once

#include <vector>

#include "ms2s/tensor.hpp"

namespace ms2s {

// Fault-injection hooks for gradcheck mutation testing. All off in normal
// operation; tests and `gradcheck --mutate` flip them to verify the
// verification machinery actually catches broken implementations.
struct FaultInjection {
  bool gate_swap = false;             // gate_mix forward uses (1-beta)*a + beta*b
  bool gate_grad_flip = false;        // gate_mix backward routes adjoints swapped
  bool attn_scale_skip = false;       // attn_scale is a no-op, forward and backward
  bool attn_scale_skip_forward = false;  // forward skips the scale, backward keeps it
};
FaultInjection& fault_injection();

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_rowvec(const Tensor& m, const Tensor& v);  // m: R x C, v: C
Tensor scale(const Tensor& x, scalar c);
Tensor add_scalar(const Tensor& x, scalar c);
Tensor rsub_scalar(scalar c, const Tensor& x);  // c - x
Tensor neg(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh_t(const Tensor& x);
Tensor swish(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor log_t(const Tensor& x);
Tensor clamp(const Tensor& x, scalar lo, scalar hi);

// beta*a + (1-beta)*b with a learnable scalar gate (beta: 1-element tensor).
Tensor gate_mix(const Tensor& a, const Tensor& b, const Tensor& beta);

// Multiply attention logits by c (fault-injectable; see FaultInjection).
Tensor attn_scale(const Tensor& x, scalar c);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor softmax_rows(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, scalar eps = scalar(1e-5));
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);  // x*w + b

// ---- reductions ----
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

// ---- shape ----
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, int64_t r0, int64_t r1);
Tensor slice_cols(const Tensor& x, int64_t c0, int64_t c1);
Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& indices);

// ---- convolutions ----
// x: Cin x H x W, w: Cout x Cin x kh x kw, b: Cout
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int sh, int sw, int ph, int pw);
// depthwise, same padding; x: T x D, w: D x k (k odd), b: D
Tensor dw_conv1d(const Tensor& x, const Tensor& w, const Tensor& b);
// C x T x W -> T x (C*W)
Tensor merge_channels(const Tensor& x);

// ---- regularization ----
Tensor dropout(const Tensor& x, double p, Rng& rng);

// ---- attention ----
struct MhaParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

// Scaled dot-product attention with per-head projections and an output
// projection. When no tape is active the core runs a streaming kernel with
// O(L*d) transient memory instead of materializing Lq x Lk score matrices.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                            const MhaParams& p);

// ---- constants ----
// PE[t, 2i] = sin(t / 10000^(2i/D)), PE[t, 2i+1] = cos(t / 10000^(2i/D))
Tensor sinusoidal_pe(int64_t t_len, int64_t d);

}  // namespace ms2s
