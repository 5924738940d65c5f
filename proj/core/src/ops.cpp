#include "ms2s/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace ms2s {

namespace {

FaultInjection g_faults;

bool track(const Tensor& t) { return grad_mode() && t.requires_grad(); }

Tensor make_output(Shape shape, bool needs_grad) {
  Tensor out(std::move(shape));
  if (needs_grad && grad_mode()) out.set_requires_grad(true);
  return out;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                   shape_str(b.shape()));
}

// Shared scaffold for unary elementwise ops with dy/dx expressible from x and y.
template <typename Fwd, typename Bwd>
Tensor unary_op(const char* name, const Tensor& x, Fwd fwd, Bwd bwd) {
  Tensor out = make_output(x.shape(), x.requires_grad());
  auto xd = x.data();
  auto od = out.data();
  for (size_t i = 0; i < xd.size(); ++i) od[i] = fwd(xd[i]);
  out.check_finite(name);
  if (track(x)) {
    Tape::active()->record([x = x, out = out, bwd = bwd]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto xd = x.data();
      auto od = out.data();
      auto gx = x.grad_mut();
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * bwd(xd[i], od[i]);
    });
  }
  return out;
}

}  // namespace

FaultInjection& fault_injection() { return g_faults; }

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = make_output(a.shape(), a.requires_grad() || b.requires_grad());
  auto ad = a.data(), bd = b.data();
  auto od = out.data();
  for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] + bd[i];
  out.check_finite("add");
  if (track(a) || track(b)) {
    Tape::active()->record([a = a, b = b, out = out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_mut();
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_mut();
        for (size_t i = 0; i < gb.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = make_output(a.shape(), a.requires_grad() || b.requires_grad());
  auto ad = a.data(), bd = b.data();
  auto od = out.data();
  for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] - bd[i];
  out.check_finite("sub");
  if (track(a) || track(b)) {
    Tape::active()->record([a = a, b = b, out = out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_mut();
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_mut();
        for (size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = make_output(a.shape(), a.requires_grad() || b.requires_grad());
  auto ad = a.data(), bd = b.data();
  auto od = out.data();
  for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] * bd[i];
  out.check_finite("mul");
  if (track(a) || track(b)) {
    Tape::active()->record([a = a, b = b, out = out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto ad = a.data(), bd = b.data();
      if (a.requires_grad()) {
        auto ga = a.grad_mut();
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bd[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_mut();
        for (size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * ad[i];
      }
    });
  }
  return out;
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
  if (m.rank() != 2 || v.rank() != 1 || m.dim(1) != v.dim(0))
    throw DimError("add_rowvec: " + shape_str(m.shape()) + " vs " + shape_str(v.shape()));
  int64_t rows = m.dim(0), cols = m.dim(1);
  Tensor out = make_output(m.shape(), m.requires_grad() || v.requires_grad());
  auto md = m.data(), vd = v.data();
  auto od = out.data();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) od[r * cols + c] = md[r * cols + c] + vd[c];
  out.check_finite("add_rowvec");
  if (track(m) || track(v)) {
    Tape::active()->record([m = m, v = v, out = out, rows = rows, cols = cols]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (m.requires_grad()) {
        auto gm = m.grad_mut();
        for (size_t i = 0; i < gm.size(); ++i) gm[i] += g[i];
      }
      if (v.requires_grad()) {
        auto gv = v.grad_mut();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t c = 0; c < cols; ++c) gv[c] += g[r * cols + c];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, scalar c) {
  return unary_op("scale", x, [c](scalar v) { return v * c; },
                  [c](scalar, scalar) { return c; });
}

Tensor add_scalar(const Tensor& x, scalar c) {
  return unary_op("add_scalar", x, [c](scalar v) { return v + c; },
                  [](scalar, scalar) { return scalar(1); });
}

Tensor rsub_scalar(scalar c, const Tensor& x) {
  return unary_op("rsub_scalar", x, [c](scalar v) { return c - v; },
                  [](scalar, scalar) { return scalar(-1); });
}

Tensor neg(const Tensor& x) { return scale(x, scalar(-1)); }

Tensor sigmoid(const Tensor& x) {
  return unary_op("sigmoid", x,
                  [](scalar v) { return scalar(1) / (scalar(1) + std::exp(-v)); },
                  [](scalar, scalar y) { return y * (scalar(1) - y); });
}

Tensor tanh_t(const Tensor& x) {
  return unary_op("tanh", x, [](scalar v) { return std::tanh(v); },
                  [](scalar, scalar y) { return scalar(1) - y * y; });
}

Tensor swish(const Tensor& x) {
  return unary_op("swish", x,
                  [](scalar v) { return v / (scalar(1) + std::exp(-v)); },
                  [](scalar v, scalar) {
                    scalar s = scalar(1) / (scalar(1) + std::exp(-v));
                    return s + v * s * (scalar(1) - s);
                  });
}

Tensor gelu(const Tensor& x) {
  constexpr scalar inv_sqrt2 = scalar(0.70710678118654752440);
  constexpr scalar inv_sqrt2pi = scalar(0.39894228040143267794);
  return unary_op("gelu", x,
                  [=](scalar v) { return scalar(0.5) * v * (scalar(1) + std::erf(v * inv_sqrt2)); },
                  [=](scalar v, scalar) {
                    scalar cdf = scalar(0.5) * (scalar(1) + std::erf(v * inv_sqrt2));
                    scalar pdf = inv_sqrt2pi * std::exp(scalar(-0.5) * v * v);
                    return cdf + v * pdf;
                  });
}

Tensor log_t(const Tensor& x) {
  return unary_op("log", x, [](scalar v) { return std::log(v); },
                  [](scalar v, scalar) { return scalar(1) / v; });
}

Tensor clamp(const Tensor& x, scalar lo, scalar hi) {
  return unary_op("clamp", x,
                  [lo, hi](scalar v) { return std::min(hi, std::max(lo, v)); },
                  [lo, hi](scalar v, scalar) { return (v >= lo && v <= hi) ? scalar(1) : scalar(0); });
}

Tensor gate_mix(const Tensor& a, const Tensor& b, const Tensor& beta) {
  require_same_shape(a, b, "gate_mix");
  if (beta.size() != 1) throw DimError("gate_mix: beta must be a scalar tensor");
  const bool swap = g_faults.gate_swap;
  scalar be = beta.item();
  scalar ca = swap ? scalar(1) - be : be;
  scalar cb = swap ? be : scalar(1) - be;
  Tensor out = make_output(a.shape(), a.requires_grad() || b.requires_grad() || beta.requires_grad());
  auto ad = a.data(), bd = b.data();
  auto od = out.data();
  for (size_t i = 0; i < od.size(); ++i) od[i] = ca * ad[i] + cb * bd[i];
  out.check_finite("gate_mix");
  if (track(a) || track(b) || track(beta)) {
    const bool flip = g_faults.gate_grad_flip;
    Tape::active()->record([a = a, b = b, beta = beta, out = out, ca = ca, cb = cb, swap = swap, flip = flip]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto ad = a.data(), bd = b.data();
      scalar ga_c = flip ? cb : ca;
      scalar gb_c = flip ? ca : cb;
      if (a.requires_grad()) {
        auto ga = a.grad_mut();
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += ga_c * g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_mut();
        for (size_t i = 0; i < gb.size(); ++i) gb[i] += gb_c * g[i];
      }
      if (beta.requires_grad()) {
        scalar acc = 0;
        for (size_t i = 0; i < ad.size(); ++i) acc += g[i] * (ad[i] - bd[i]);
        if (swap) acc = -acc;
        if (flip) acc = -acc;
        beta.grad_mut()[0] += acc;
      }
    });
  }
  return out;
}

Tensor attn_scale(const Tensor& x, scalar c) {
  if (g_faults.attn_scale_skip) return unary_op("attn_scale", x,
                                                [](scalar v) { return v; },
                                                [](scalar, scalar) { return scalar(1); });
  if (g_faults.attn_scale_skip_forward)
    return unary_op("attn_scale", x, [](scalar v) { return v; },
                    [c](scalar, scalar) { return c; });
  return scale(x, c);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimError("matmul: " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  const int64_t m = a.dim(0), kk = a.dim(1), n = b.dim(1);
  Tensor out = make_output({m, n}, a.requires_grad() || b.requires_grad());
  const scalar* ad = a.data().data();
  const scalar* bd = b.data().data();
  scalar* od = out.data().data();
  for (int64_t i = 0; i < m; ++i) {
    scalar* orow = od + i * n;
    for (int64_t p = 0; p < kk; ++p) {
      const scalar av = ad[i * kk + p];
      if (av == scalar(0)) continue;
      const scalar* brow = bd + p * n;
      for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  out.check_finite("matmul");
  if (track(a) || track(b)) {
    Tape::active()->record([a = a, b = b, out = out, m = m, kk = kk, n = n]() mutable {
      if (!out.has_grad()) return;
      const scalar* g = out.grad().data();
      const scalar* ad = a.data().data();
      const scalar* bd = b.data().data();
      if (a.requires_grad()) {
        scalar* ga = a.grad_mut().data();  // dA = dC * B^T
        for (int64_t i = 0; i < m; ++i)
          for (int64_t p = 0; p < kk; ++p) {
            const scalar* grow = g + i * n;
            const scalar* brow = bd + p * n;
            scalar acc = 0;
            for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            ga[i * kk + p] += acc;
          }
      }
      if (b.requires_grad()) {
        scalar* gb = b.grad_mut().data();  // dB = A^T * dC
        for (int64_t i = 0; i < m; ++i) {
          const scalar* grow = g + i * n;
          for (int64_t p = 0; p < kk; ++p) {
            const scalar av = ad[i * kk + p];
            if (av == scalar(0)) continue;
            scalar* gbrow = gb + p * n;
            for (int64_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
          }
        }
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw DimError("transpose: rank-2 only, got " + shape_str(x.shape()));
  int64_t r = x.dim(0), c = x.dim(1);
  Tensor out = make_output({c, r}, x.requires_grad());
  auto xd = x.data();
  auto od = out.data();
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) od[j * r + i] = xd[i * c + j];
  if (track(x)) {
    Tape::active()->record([x = x, out = out, r = r, c = c]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad_mut();
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
    });
  }
  return out;
}

Tensor softmax_rows(const Tensor& x) {
  if (x.rank() != 2) throw DimError("softmax_rows: rank-2 only");
  int64_t rows = x.dim(0), cols = x.dim(1);
  Tensor out = make_output(x.shape(), x.requires_grad());
  auto xd = x.data();
  auto od = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const scalar* in = xd.data() + r * cols;
    scalar* o = od.data() + r * cols;
    scalar mx = in[0];
    for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, in[c]);
    scalar sum = 0;
    for (int64_t c = 0; c < cols; ++c) {
      o[c] = std::exp(in[c] - mx);
      sum += o[c];
    }
    for (int64_t c = 0; c < cols; ++c) o[c] /= sum;
  }
  out.check_finite("softmax_rows");
  if (track(x)) {
    Tape::active()->record([x = x, out = out, rows = rows, cols = cols]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto od = out.data();
      auto gx = x.grad_mut();
      for (int64_t r = 0; r < rows; ++r) {
        const scalar* p = od.data() + r * cols;
        const scalar* gr = g.data() + r * cols;
        scalar dot = 0;
        for (int64_t c = 0; c < cols; ++c) dot += gr[c] * p[c];
        scalar* gxr = gx.data() + r * cols;
        for (int64_t c = 0; c < cols; ++c) gxr[c] += p[c] * (gr[c] - dot);
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, scalar eps) {
  if (x.rank() != 2) throw DimError("layer_norm: rank-2 only");
  int64_t rows = x.dim(0), d = x.dim(1);
  if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d)
    throw DimError("layer_norm: gain/bias must match last dim " + std::to_string(d));
  Tensor out = make_output(x.shape(), x.requires_grad() || gain.requires_grad() || bias.requires_grad());
  std::vector<scalar> inv_std(static_cast<size_t>(rows));
  std::vector<scalar> xhat(x.data().size());
  auto xd = x.data();
  auto gd = gain.data();
  auto bd = bias.data();
  auto od = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const scalar* in = xd.data() + r * d;
    scalar mean = 0;
    for (int64_t c = 0; c < d; ++c) mean += in[c];
    mean /= scalar(d);
    scalar var = 0;
    for (int64_t c = 0; c < d; ++c) var += (in[c] - mean) * (in[c] - mean);
    var /= scalar(d);
    scalar is = scalar(1) / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(r)] = is;
    for (int64_t c = 0; c < d; ++c) {
      scalar h = (in[c] - mean) * is;
      xhat[static_cast<size_t>(r * d + c)] = h;
      od[r * d + c] = gd[c] * h + bd[c];
    }
  }
  out.check_finite("layer_norm");
  if (track(x) || track(gain) || track(bias)) {
    Tape::active()->record([x = x, gain = gain, bias = bias, out = out, rows = rows, d = d, inv_std = std::move(inv_std), xhat = std::move(xhat)]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gd = gain.data();
      if (gain.requires_grad()) {
        auto gg = gain.grad_mut();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t c = 0; c < d; ++c) gg[c] += g[r * d + c] * xhat[static_cast<size_t>(r * d + c)];
      }
      if (bias.requires_grad()) {
        auto gb = bias.grad_mut();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t c = 0; c < d; ++c) gb[c] += g[r * d + c];
      }
      if (x.requires_grad()) {
        auto gx = x.grad_mut();
        for (int64_t r = 0; r < rows; ++r) {
          const scalar* gr = g.data() + r * d;
          const scalar* xh = xhat.data() + r * d;
          scalar mean_gy = 0, mean_gyxh = 0;
          for (int64_t c = 0; c < d; ++c) {
            scalar gy = gr[c] * gd[c];
            mean_gy += gy;
            mean_gyxh += gy * xh[c];
          }
          mean_gy /= scalar(d);
          mean_gyxh /= scalar(d);
          scalar is = inv_std[static_cast<size_t>(r)];
          for (int64_t c = 0; c < d; ++c) {
            scalar gy = gr[c] * gd[c];
            gx[r * d + c] += is * (gy - mean_gy - xh[c] * mean_gyxh);
          }
        }
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_rowvec(matmul(x, w), b);
}

Tensor sum_all(const Tensor& x) {
  Tensor out = make_output({1}, x.requires_grad());
  scalar acc = 0;
  for (scalar v : x.data()) acc += v;
  out.data()[0] = acc;
  out.check_finite("sum");
  if (track(x)) {
    Tape::active()->record([x = x, out = out]() mutable {
      if (!out.has_grad()) return;
      scalar g = out.grad()[0];
      auto gx = x.grad_mut();
      for (auto& v : gx) v += g;
    });
  }
  return out;
}

Tensor mean_all(const Tensor& x) { return scale(sum_all(x), scalar(1) / scalar(x.size())); }

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size())
    throw DimError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes size");
  Tensor out = make_output(std::move(shape), x.requires_grad());
  std::copy(x.data().begin(), x.data().end(), out.data().begin());
  if (track(x)) {
    Tape::active()->record([x = x, out = out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad_mut();
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw UsageError("concat_rows: empty input");
  int64_t cols = parts[0].dim(1), rows = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(1) != cols) throw DimError("concat_rows: column mismatch");
    rows += p.dim(0);
    rg = rg || p.requires_grad();
  }
  Tensor out = make_output({rows, cols}, rg);
  auto od = out.data();
  int64_t r = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), od.begin() + r * cols);
    r += p.dim(0);
  }
  if (grad_mode() && rg) {
    Tape::active()->record([parts = parts, out = out, cols = cols]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      int64_t r = 0;
      for (auto& p : parts) {
        if (p.requires_grad()) {
          auto gp = p.grad_mut();
          for (size_t i = 0; i < gp.size(); ++i) gp[i] += g[static_cast<size_t>(r * cols) + i];
        }
        r += p.dim(0);
      }
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw UsageError("concat_cols: empty input");
  int64_t rows = parts[0].dim(0), cols = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != rows) throw DimError("concat_cols: row mismatch");
    cols += p.dim(1);
    rg = rg || p.requires_grad();
  }
  Tensor out = make_output({rows, cols}, rg);
  auto od = out.data();
  int64_t c0 = 0;
  for (const auto& p : parts) {
    int64_t pc = p.dim(1);
    auto pd = p.data();
    for (int64_t r = 0; r < rows; ++r)
      std::copy(pd.begin() + r * pc, pd.begin() + (r + 1) * pc, od.begin() + r * cols + c0);
    c0 += pc;
  }
  if (grad_mode() && rg) {
    Tape::active()->record([parts = parts, out = out, rows = rows, cols = cols]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      int64_t c0 = 0;
      for (auto& p : parts) {
        int64_t pc = p.dim(1);
        if (p.requires_grad()) {
          auto gp = p.grad_mut();
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < pc; ++c) gp[r * pc + c] += g[r * cols + c0 + c];
        }
        c0 += pc;
      }
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& x, int64_t r0, int64_t r1) {
  if (x.rank() != 2 || r0 < 0 || r1 > x.dim(0) || r0 >= r1)
    throw DimError("slice_rows: bad range [" + std::to_string(r0) + "," + std::to_string(r1) + ")");
  int64_t cols = x.dim(1);
  Tensor out = make_output({r1 - r0, cols}, x.requires_grad());
  std::copy(x.data().begin() + r0 * cols, x.data().begin() + r1 * cols, out.data().begin());
  if (track(x)) {
    Tape::active()->record([x = x, out = out, r0 = r0, cols = cols]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad_mut();
      for (size_t i = 0; i < g.size(); ++i) gx[static_cast<size_t>(r0 * cols) + i] += g[i];
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& x, int64_t c0, int64_t c1) {
  if (x.rank() != 2 || c0 < 0 || c1 > x.dim(1) || c0 >= c1) throw DimError("slice_cols: bad range");
  int64_t rows = x.dim(0), cols = x.dim(1), w = c1 - c0;
  Tensor out = make_output({rows, w}, x.requires_grad());
  auto xd = x.data();
  auto od = out.data();
  for (int64_t r = 0; r < rows; ++r)
    std::copy(xd.begin() + r * cols + c0, xd.begin() + r * cols + c1, od.begin() + r * w);
  if (track(x)) {
    Tape::active()->record([x = x, out = out, c0 = c0, rows = rows, cols = cols, w = w]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad_mut();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < w; ++c) gx[r * cols + c0 + c] += g[r * w + c];
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& indices) {
  if (x.rank() != 2) throw DimError("gather_rows: rank-2 only");
  int64_t cols = x.dim(1);
  for (int64_t i : indices)
    if (i < 0 || i >= x.dim(0)) throw DimError("gather_rows: index out of range");
  Tensor out = make_output({static_cast<int64_t>(indices.size()), cols}, x.requires_grad());
  auto xd = x.data();
  auto od = out.data();
  for (size_t r = 0; r < indices.size(); ++r)
    std::copy(xd.begin() + indices[r] * cols, xd.begin() + (indices[r] + 1) * cols,
              od.begin() + static_cast<int64_t>(r) * cols);
  if (track(x)) {
    Tape::active()->record([x = x, out = out, indices = indices, cols = cols]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad_mut();
      for (size_t r = 0; r < indices.size(); ++r)
        for (int64_t c = 0; c < cols; ++c)
          gx[indices[r] * cols + c] += g[static_cast<int64_t>(r) * cols + c];
    });
  }
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int sh, int sw, int ph, int pw) {
  if (x.rank() != 3 || w.rank() != 4 || b.rank() != 1)
    throw DimError("conv2d: expected x[Cin,H,W], w[Cout,Cin,kh,kw], b[Cout]");
  const int64_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int64_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != cin || b.dim(0) != cout) throw DimError("conv2d: channel mismatch");
  const int64_t oh = (h + 2 * ph - kh) / sh + 1;
  const int64_t ow = (wd + 2 * pw - kw) / sw + 1;
  if (oh <= 0 || ow <= 0) throw DimError("conv2d: empty output");
  Tensor out = make_output({cout, oh, ow}, x.requires_grad() || w.requires_grad() || b.requires_grad());
  const scalar* xd = x.data().data();
  const scalar* wdp = w.data().data();
  const scalar* bd = b.data().data();
  scalar* od = out.data().data();
  for (int64_t co = 0; co < cout; ++co)
    for (int64_t i = 0; i < oh; ++i)
      for (int64_t j = 0; j < ow; ++j) {
        scalar acc = bd[co];
        for (int64_t ci = 0; ci < cin; ++ci)
          for (int64_t u = 0; u < kh; ++u) {
            int64_t xi = i * sh + u - ph;
            if (xi < 0 || xi >= h) continue;
            for (int64_t vj = 0; vj < kw; ++vj) {
              int64_t xj = j * sw + vj - pw;
              if (xj < 0 || xj >= wd) continue;
              acc += xd[(ci * h + xi) * wd + xj] * wdp[((co * cin + ci) * kh + u) * kw + vj];
            }
          }
        od[(co * oh + i) * ow + j] = acc;
      }
  out.check_finite("conv2d");
  if (track(x) || track(w) || track(b)) {
    Tape::active()->record([x = x, w = w, b = b, out = out, sh = sh, sw = sw, ph = ph, pw = pw, cin = cin, h = h, wd = wd, cout = cout, kh = kh, kw = kw, oh = oh, ow = ow]() mutable {
      if (!out.has_grad()) return;
      const scalar* g = out.grad().data();
      const scalar* xd = x.data().data();
      const scalar* wdp = w.data().data();
      scalar* gx = x.requires_grad() ? x.grad_mut().data() : nullptr;
      scalar* gw = w.requires_grad() ? w.grad_mut().data() : nullptr;
      scalar* gb = b.requires_grad() ? b.grad_mut().data() : nullptr;
      for (int64_t co = 0; co < cout; ++co)
        for (int64_t i = 0; i < oh; ++i)
          for (int64_t j = 0; j < ow; ++j) {
            scalar go = g[(co * oh + i) * ow + j];
            if (gb) gb[co] += go;
            if (!gx && !gw) continue;
            for (int64_t ci = 0; ci < cin; ++ci)
              for (int64_t u = 0; u < kh; ++u) {
                int64_t xi = i * sh + u - ph;
                if (xi < 0 || xi >= h) continue;
                for (int64_t vj = 0; vj < kw; ++vj) {
                  int64_t xj = j * sw + vj - pw;
                  if (xj < 0 || xj >= wd) continue;
                  if (gx) gx[(ci * h + xi) * wd + xj] += go * wdp[((co * cin + ci) * kh + u) * kw + vj];
                  if (gw) gw[((co * cin + ci) * kh + u) * kw + vj] += go * xd[(ci * h + xi) * wd + xj];
                }
              }
          }
    });
  }
  return out;
}

Tensor dw_conv1d(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1)
    throw DimError("dw_conv1d: expected x[T,D], w[D,k], b[D]");
  const int64_t t = x.dim(0), d = x.dim(1), k = w.dim(1);
  if (w.dim(0) != d || b.dim(0) != d) throw DimError("dw_conv1d: channel mismatch");
  if (k % 2 == 0) throw ConfigError("dw_conv1d: kernel must be odd for same padding");
  const int64_t pad = k / 2;
  Tensor out = make_output({t, d}, x.requires_grad() || w.requires_grad() || b.requires_grad());
  const scalar* xd = x.data().data();
  const scalar* wd = w.data().data();
  const scalar* bd = b.data().data();
  scalar* od = out.data().data();
  for (int64_t ti = 0; ti < t; ++ti)
    for (int64_t di = 0; di < d; ++di) {
      scalar acc = bd[di];
      for (int64_t u = 0; u < k; ++u) {
        int64_t src = ti + u - pad;
        if (src < 0 || src >= t) continue;
        acc += xd[src * d + di] * wd[di * k + u];
      }
      od[ti * d + di] = acc;
    }
  out.check_finite("dw_conv1d");
  if (track(x) || track(w) || track(b)) {
    Tape::active()->record([x = x, w = w, b = b, out = out, t = t, d = d, k = k, pad = pad]() mutable {
      if (!out.has_grad()) return;
      const scalar* g = out.grad().data();
      const scalar* xd = x.data().data();
      const scalar* wd = w.data().data();
      scalar* gx = x.requires_grad() ? x.grad_mut().data() : nullptr;
      scalar* gw = w.requires_grad() ? w.grad_mut().data() : nullptr;
      scalar* gb = b.requires_grad() ? b.grad_mut().data() : nullptr;
      for (int64_t ti = 0; ti < t; ++ti)
        for (int64_t di = 0; di < d; ++di) {
          scalar go = g[ti * d + di];
          if (gb) gb[di] += go;
          for (int64_t u = 0; u < k; ++u) {
            int64_t src = ti + u - pad;
            if (src < 0 || src >= t) continue;
            if (gx) gx[src * d + di] += go * wd[di * k + u];
            if (gw) gw[di * k + u] += go * xd[src * d + di];
          }
        }
    });
  }
  return out;
}

Tensor merge_channels(const Tensor& x) {
  if (x.rank() != 3) throw DimError("merge_channels: expected C x T x W");
  const int64_t c = x.dim(0), t = x.dim(1), w = x.dim(2);
  Tensor out = make_output({t, c * w}, x.requires_grad());
  auto xd = x.data();
  auto od = out.data();
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t ti = 0; ti < t; ++ti)
      for (int64_t wi = 0; wi < w; ++wi) od[ti * c * w + ci * w + wi] = xd[(ci * t + ti) * w + wi];
  if (track(x)) {
    Tape::active()->record([x = x, out = out, c = c, t = t, w = w]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad_mut();
      for (int64_t ci = 0; ci < c; ++ci)
        for (int64_t ti = 0; ti < t; ++ti)
          for (int64_t wi = 0; wi < w; ++wi) gx[(ci * t + ti) * w + wi] += g[ti * c * w + ci * w + wi];
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout: rate must be < 1");
  const scalar keep_scale = scalar(1.0 / (1.0 - p));
  std::vector<scalar> mask(x.data().size());
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  for (auto& m : mask) m = dist(rng) < p ? scalar(0) : keep_scale;
  Tensor out = make_output(x.shape(), x.requires_grad());
  auto xd = x.data();
  auto od = out.data();
  for (size_t i = 0; i < od.size(); ++i) od[i] = xd[i] * mask[i];
  if (track(x)) {
    Tape::active()->record([x = x, out = out, mask = std::move(mask)]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad_mut();
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * mask[i];
    });
  }
  return out;
}

namespace {

// One-pass streaming softmax-attention over projected Q/K/V; never builds the
// Lq x Lk score matrix. Inference path only (no adjoints).
Tensor streaming_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads) {
  const int64_t lq = q.dim(0), lk = k.dim(0), d = q.dim(1);
  const int64_t dh = d / heads;
  const scalar inv = scalar(1) / std::sqrt(static_cast<scalar>(dh));
  Tensor out({lq, d});
  const scalar* qd = q.data().data();
  const scalar* kd = k.data().data();
  const scalar* vd = v.data().data();
  scalar* od = out.data().data();
  std::vector<scalar> acc(static_cast<size_t>(dh));
  for (int h = 0; h < heads; ++h) {
    const int64_t off = h * dh;
    for (int64_t i = 0; i < lq; ++i) {
      const scalar* qrow = qd + i * d + off;
      scalar m = -std::numeric_limits<scalar>::infinity();
      scalar s = 0;
      std::fill(acc.begin(), acc.end(), scalar(0));
      for (int64_t j = 0; j < lk; ++j) {
        const scalar* krow = kd + j * d + off;
        scalar logit = 0;
        for (int64_t c = 0; c < dh; ++c) logit += qrow[c] * krow[c];
        logit *= inv;
        if (logit > m) {
          scalar f = (m == -std::numeric_limits<scalar>::infinity()) ? scalar(0) : std::exp(m - logit);
          for (auto& a : acc) a *= f;
          s *= f;
          m = logit;
        }
        scalar wgt = std::exp(logit - m);
        s += wgt;
        const scalar* vrow = vd + j * d + off;
        for (int64_t c = 0; c < dh; ++c) acc[static_cast<size_t>(c)] += wgt * vrow[c];
      }
      scalar* orow = od + i * d + off;
      for (int64_t c = 0; c < dh; ++c) orow[c] = acc[static_cast<size_t>(c)] / s;
    }
  }
  out.check_finite("streaming_attention");
  return out;
}

}  // namespace

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                            const MhaParams& p) {
  const int64_t d = q.dim(1);
  if (heads <= 0 || d % heads != 0)
    throw ConfigError("multi_head_attention: model dim " + std::to_string(d) +
                      " not divisible by heads " + std::to_string(heads));
  if (k.dim(1) != d || v.dim(1) != d || k.dim(0) != v.dim(0))
    throw DimError("multi_head_attention: key/value shapes disagree");
  Tensor qp = linear(q, p.wq, p.bq);
  Tensor kp = linear(k, p.wk, p.bk);
  Tensor vp = linear(v, p.wv, p.bv);
  const bool needs_tape = grad_mode() && (qp.requires_grad() || kp.requires_grad() || vp.requires_grad());
  Tensor ctx;
  if (!needs_tape) {
    ctx = streaming_attention(qp, kp, vp, heads);
  } else {
    const int64_t dh = d / heads;
    const scalar inv = scalar(1) / std::sqrt(static_cast<scalar>(dh));
    std::vector<Tensor> head_out;
    head_out.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      Tensor qh = slice_cols(qp, h * dh, (h + 1) * dh);
      Tensor kh = slice_cols(kp, h * dh, (h + 1) * dh);
      Tensor vh = slice_cols(vp, h * dh, (h + 1) * dh);
      Tensor att = softmax_rows(scale(matmul(qh, transpose(kh)), inv));
      head_out.push_back(matmul(att, vh));
    }
    ctx = concat_cols(head_out);
  }
  return linear(ctx, p.wo, p.bo);
}

Tensor sinusoidal_pe(int64_t t_len, int64_t d) {
  if (d % 2 != 0) throw ConfigError("sinusoidal_pe: dimension must be even");
  Tensor pe({t_len, d});
  auto pd = pe.data();
  for (int64_t t = 0; t < t_len; ++t)
    for (int64_t i = 0; i < d / 2; ++i) {
      double angle = static_cast<double>(t) /
                     std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d));
      pd[t * d + 2 * i] = static_cast<scalar>(std::sin(angle));
      pd[t * d + 2 * i + 1] = static_cast<scalar>(std::cos(angle));
    }
  return pe;
}

}  // namespace ms2s
