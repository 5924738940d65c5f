#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ms2s/ops.hpp"
#include "ms2s/tensor.hpp"

namespace testutil {

using ms2s::Tensor;

// Central finite-difference gradient verification. `forward_loss` must be a
// pure deterministic function of the parameter tensors' current contents.
// Returns the max relative error over all coordinates of all params, where
// rel = |analytic - fd| / max(floor, |analytic|, |fd|).
struct FdResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  int64_t worst_index = -1;
  double analytic = 0.0, numeric = 0.0;
};

inline FdResult fd_check(std::vector<std::pair<std::string, Tensor>> params,
                         const std::function<Tensor()>& forward_loss, double step = 1e-5,
                         double floor = 1e-6) {
  std::vector<std::vector<ms2s::scalar>> analytic;
  {
    for (auto& [name, p] : params) p.zero_grad();
    ms2s::Tape tape;
    Tensor loss = forward_loss();
    tape.backward(loss);
    for (auto& [name, p] : params) {
      if (p.has_grad())
        analytic.emplace_back(p.grad().begin(), p.grad().end());
      else
        analytic.emplace_back(p.size(), ms2s::scalar(0));
    }
  }
  FdResult res;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi].second;
    auto d = p.data();
    for (size_t i = 0; i < d.size(); ++i) {
      const ms2s::scalar saved = d[i];
      d[i] = saved + static_cast<ms2s::scalar>(step);
      double lp = forward_loss().item();
      d[i] = saved - static_cast<ms2s::scalar>(step);
      double lm = forward_loss().item();
      d[i] = saved;
      double fd = (lp - lm) / (2.0 * step);
      double an = analytic[pi][i];
      double rel = std::fabs(an - fd) / std::max({floor, std::fabs(an), std::fabs(fd)});
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_param = params[pi].first;
        res.worst_index = static_cast<int64_t>(i);
        res.analytic = an;
        res.numeric = fd;
      }
    }
  }
  return res;
}

inline Tensor random_tensor(ms2s::Shape shape, ms2s::Rng& rng, double stddev = 1.0,
                            bool requires_grad = false) {
  return Tensor::randn(std::move(shape), rng, stddev, requires_grad);
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  auto ad = a.data(), bd = b.data();
  for (size_t i = 0; i < ad.size(); ++i) m = std::max(m, std::fabs(double(ad[i]) - double(bd[i])));
  return m;
}

inline bool bit_identical(const Tensor& a, const Tensor& b) {
  auto ad = a.data(), bd = b.data();
  if (ad.size() != bd.size()) return false;
  for (size_t i = 0; i < ad.size(); ++i)
    if (std::memcmp(&ad[i], &bd[i], sizeof(ms2s::scalar)) != 0) return false;
  return true;
}

}  // namespace testutil
