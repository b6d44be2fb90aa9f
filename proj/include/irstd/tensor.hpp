#pragma once

// Dense row-major tensor with tape-free reverse-mode autodiff.
//
// Every op that sees an input with requires_grad() records its parents and a
// backward closure on the output. Tensor::backward() topologically sorts the
// graph reachable from a scalar and runs the closures in reverse order.
// Storage is double precision throughout.

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace irstd {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int64_t dim(int axis) const;
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  double* ptr() { return impl_->data.data(); }
  const double* ptr() const { return impl_->data.data(); }
  double item() const;
  double at(std::initializer_list<int64_t> index) const;
  double& at(std::initializer_list<int64_t> index);

  // Gradient buffer; zero-filled on first access.
  std::span<double> grad();
  bool has_grad() const { return impl_ && impl_->grad.size() == impl_->data.size(); }
  void zero_grad();

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool on);

  // Value copy, outside any graph.
  Tensor detach() const;

  // Accumulate d(this)/d(leaves). `this` must hold exactly one element.
  void backward();

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Gradient recording switch. Disabled inside a NoGradGuard scope.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Forward-pass operation counter. Matrix-product style work is tallied as
// multiply-accumulates; everything else (softmax, norms, scaling, sampling)
// lands in `extra`.
struct OpCounts {
  int64_t macs = 0;
  int64_t extra = 0;
  int64_t flops() const { return 2 * macs; }
};

class OpCounter {
 public:
  static bool active();
  static void add_macs(int64_t n);
  static void add_extra(int64_t n);
  static OpCounts& current();
};

class OpCountScope {
 public:
  OpCountScope();
  ~OpCountScope();
  OpCountScope(const OpCountScope&) = delete;
  OpCountScope& operator=(const OpCountScope&) = delete;
  const OpCounts& counts() const;

 private:
  OpCounts saved_;
  bool prev_active_;
};

namespace detail {

// Builds an op result. When recording is on and any input requires grad, the
// output is linked to its inputs and `fn` is stored as its backward rule.
Tensor make_result(Shape shape, std::vector<double> values,
                   std::initializer_list<const Tensor*> inputs,
                   std::function<void(TensorImpl&)> fn);
Tensor make_result(Shape shape, std::vector<double> values,
                   const std::vector<Tensor>& inputs,
                   std::function<void(TensorImpl&)> fn);

// grad buffer of a parent, allocating if needed; nullptr when the parent does
// not require grad.
double* grad_of(const Tensor& t);

}  // namespace detail

}  // namespace irstd
