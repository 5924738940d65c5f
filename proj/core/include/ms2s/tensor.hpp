#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ms2s/error.hpp"
#include "ms2s/rng.hpp"

namespace ms2s {

#ifdef MS2S_FLOAT32
using scalar = float;
#else
using scalar = double;
#endif

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

// Transient-allocation accounting for the bench harness. Tracks live bytes
// held by tensor storage (data + grad) and the high-water mark since the
// last reset.
void alloc_stats_reset();
int64_t alloc_stats_current();
int64_t alloc_stats_peak();

// Forward NaN/Inf checking; on by default, can be disabled for benchmarking.
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

namespace detail {
struct TensorImpl;
}

// Dense row-major tensor with handle semantics: copies share storage.
// Gradients live next to the data and are allocated lazily by backward.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);

  static Tensor from(Shape shape, std::vector<scalar> values, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, scalar value, bool requires_grad = false);
  static Tensor scalar_value(scalar value, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int64_t dim(int i) const;
  int rank() const;
  int64_t size() const;

  std::span<const scalar> data() const;
  std::span<scalar> data();
  scalar item() const;  // scalar tensors only

  // 2-D convenience accessors.
  scalar at(int64_t r, int64_t c) const;
  scalar& at(int64_t r, int64_t c);

  bool requires_grad() const;
  void set_requires_grad(bool rg);
  bool has_grad() const;
  std::span<const scalar> grad() const;
  std::span<scalar> grad_mut();   // allocates zeros on first use
  void zero_grad();               // drops the accumulator

  Tensor clone() const;           // deep copy of data (grad not copied)

  void check_finite(const char* op_name) const;

  detail::TensorImpl* impl() const { return impl_.get(); }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Reverse-mode tape. Constructing a Tape makes it the active tape for the
// current thread (tapes nest); ops record adjoint closures onto the active
// tape whenever an input requires grad. backward() replays the closures in
// reverse execution order — a valid topological order, since every op is
// recorded after its inputs were produced. Each node is visited exactly once.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(std::function<void()> backward_fn);
  size_t size() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
  // requires_grad leaf reachable from the recorded ops. Gradients add up
  // across repeated uses and across repeated backward calls.
  void backward(const Tensor& loss);

 private:
  std::vector<std::function<void()>> nodes_;
  Tape* prev_ = nullptr;
};

// True when a tape is active on this thread (i.e. ops will record adjoints).
bool grad_mode();

}  // namespace ms2s
