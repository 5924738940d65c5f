#include "ms2s/tensor.hpp"

#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>

namespace ms2s {

namespace {

std::atomic<int64_t> g_alloc_current{0};
std::atomic<int64_t> g_alloc_peak{0};
bool g_finite_checks = true;

void alloc_add(int64_t bytes) {
  int64_t cur = g_alloc_current.fetch_add(bytes) + bytes;
  int64_t peak = g_alloc_peak.load();
  while (cur > peak && !g_alloc_peak.compare_exchange_weak(peak, cur)) {
  }
}

void alloc_sub(int64_t bytes) { g_alloc_current.fetch_sub(bytes); }

thread_local Tape* t_active_tape = nullptr;

}  // namespace

void alloc_stats_reset() {
  g_alloc_peak.store(g_alloc_current.load());
}
int64_t alloc_stats_current() { return g_alloc_current.load(); }
int64_t alloc_stats_peak() { return g_alloc_peak.load(); }

void set_finite_checks(bool enabled) { g_finite_checks = enabled; }
bool finite_checks_enabled() { return g_finite_checks; }

int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<scalar> data;
  std::vector<scalar> grad;
  bool requires_grad = false;

  TensorImpl(Shape s, std::vector<scalar> d, bool rg)
      : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
    alloc_add(static_cast<int64_t>(data.capacity() * sizeof(scalar)));
  }
  ~TensorImpl() {
    alloc_sub(static_cast<int64_t>(data.capacity() * sizeof(scalar)));
    alloc_sub(static_cast<int64_t>(grad.capacity() * sizeof(scalar)));
  }
  void ensure_grad() {
    if (grad.empty()) {
      grad.assign(data.size(), scalar(0));
      alloc_add(static_cast<int64_t>(grad.capacity() * sizeof(scalar)));
    }
  }
  void drop_grad() {
    alloc_sub(static_cast<int64_t>(grad.capacity() * sizeof(scalar)));
    grad.clear();
    grad.shrink_to_fit();
  }
};

}  // namespace detail

Tensor::Tensor(Shape shape, bool requires_grad) {
  int64_t n = numel(shape);
  if (n < 0) throw DimError("negative dimension in shape " + shape_str(shape));
  impl_ = std::make_shared<detail::TensorImpl>(
      std::move(shape), std::vector<scalar>(static_cast<size_t>(n), scalar(0)), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<scalar> values, bool requires_grad) {
  if (numel(shape) != static_cast<int64_t>(values.size()))
    throw DimError("value count " + std::to_string(values.size()) + " does not match shape " +
                   shape_str(shape));
  Tensor t;
  t.impl_ = std::make_shared<detail::TensorImpl>(std::move(shape), std::move(values), requires_grad);
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return Tensor(std::move(shape), requires_grad); }

Tensor Tensor::full(Shape shape, scalar value, bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  for (auto& v : t.data()) v = value;
  return t;
}

Tensor Tensor::scalar_value(scalar value, bool requires_grad) {
  return Tensor::from({1}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  fill_gaussian(t.data(), rng, 0.0, stddev);
  return t;
}

const Shape& Tensor::shape() const { return impl_->shape; }

int64_t Tensor::dim(int i) const { return impl_->shape.at(static_cast<size_t>(i)); }

int Tensor::rank() const { return static_cast<int>(impl_->shape.size()); }

int64_t Tensor::size() const { return static_cast<int64_t>(impl_->data.size()); }

std::span<const scalar> Tensor::data() const { return impl_->data; }
std::span<scalar> Tensor::data() { return impl_->data; }

scalar Tensor::item() const {
  if (size() != 1) throw UsageError("item() on non-scalar tensor " + shape_str(shape()));
  return impl_->data[0];
}

scalar Tensor::at(int64_t r, int64_t c) const {
  return impl_->data[static_cast<size_t>(r * impl_->shape[1] + c)];
}
scalar& Tensor::at(int64_t r, int64_t c) {
  return impl_->data[static_cast<size_t>(r * impl_->shape[1] + c)];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }
void Tensor::set_requires_grad(bool rg) { impl_->requires_grad = rg; }

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const scalar> Tensor::grad() const {
  if (!has_grad()) throw UsageError("grad() before backward populated it");
  return impl_->grad;
}

std::span<scalar> Tensor::grad_mut() {
  impl_->ensure_grad();
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_) impl_->drop_grad();
}

Tensor Tensor::clone() const {
  Tensor t;
  t.impl_ = std::make_shared<detail::TensorImpl>(impl_->shape, impl_->data, impl_->requires_grad);
  return t;
}

void Tensor::check_finite(const char* op_name) const {
  if (!g_finite_checks) return;
  for (scalar v : impl_->data) {
    if (!std::isfinite(v))
      throw NumericError(std::string("non-finite value produced by ") + op_name);
  }
}

Tape::Tape() {
  prev_ = t_active_tape;
  t_active_tape = this;
}

Tape::~Tape() { t_active_tape = prev_; }

Tape* Tape::active() { return t_active_tape; }

void Tape::record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw UsageError("backward requires a scalar loss tensor");
  Tensor l = loss;
  l.grad_mut()[0] += scalar(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

bool grad_mode() { return t_active_tape != nullptr; }

}  // namespace ms2s
