#include "irstd/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace irstd {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) throw ShapeError("negative dimension in " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<TensorImpl>()) {
  const int64_t n = shape_numel(shape);
  impl_->shape = std::move(shape);
  impl_->data.assign(static_cast<size_t>(n), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : impl_(std::make_shared<TensorImpl>()) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size()))
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     shape_str(shape));
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

int64_t Tensor::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("axis out of range for " + shape_str(shape()));
  return impl_->shape[static_cast<size_t>(axis)];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

namespace {
size_t flat_index(const Shape& shape, std::initializer_list<int64_t> index) {
  if (index.size() != shape.size()) throw ShapeError("index rank mismatch for " + shape_str(shape));
  size_t off = 0;
  size_t i = 0;
  for (int64_t v : index) {
    if (v < 0 || v >= shape[i]) throw ShapeError("index out of range for " + shape_str(shape));
    off = off * static_cast<size_t>(shape[i]) + static_cast<size_t>(v);
    ++i;
  }
  return off;
}
}  // namespace

double Tensor::at(std::initializer_list<int64_t> index) const {
  return impl_->data[flat_index(impl_->shape, index)];
}

double& Tensor::at(std::initializer_list<int64_t> index) {
  return impl_->data[flat_index(impl_->shape, index)];
}

std::span<double> Tensor::grad() {
  impl_->ensure_grad();
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data); }

void Tensor::backward() {
  if (numel() != 1) throw ShapeError("backward() needs a scalar, got " + shape_str(shape()));
  if (!impl_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents first).
  // Owning references keep interior nodes alive while parents are released.
  std::vector<std::shared_ptr<TensorImpl>> order;
  std::unordered_set<TensorImpl*> seen;
  std::vector<std::pair<std::shared_ptr<TensorImpl>, size_t>> stack;
  stack.emplace_back(impl_, 0);
  seen.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      std::shared_ptr<TensorImpl> p = node->parents[next++];
      if (p->requires_grad && seen.insert(p.get()).second) stack.emplace_back(std::move(p), 0);
    } else {
      order.push_back(std::move(node));
      stack.pop_back();
    }
  }

  impl_->ensure_grad();
  impl_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* node = it->get();
    if (node->backward_fn) {
      node->ensure_grad();
      node->backward_fn(*node);
      // The graph is consumed; interior nodes drop their closures and grads.
      node->backward_fn = nullptr;
      node->parents.clear();
      if (node != impl_.get()) {
        node->grad.clear();
        node->grad.shrink_to_fit();
      }
    }
  }
}

namespace {
thread_local bool g_grad_enabled = true;
thread_local bool g_count_active = false;
thread_local OpCounts g_counts;
}  // namespace

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool on) { g_grad_enabled = on; }

bool OpCounter::active() { return g_count_active; }
void OpCounter::add_macs(int64_t n) {
  if (g_count_active) g_counts.macs += n;
}
void OpCounter::add_extra(int64_t n) {
  if (g_count_active) g_counts.extra += n;
}
OpCounts& OpCounter::current() { return g_counts; }

OpCountScope::OpCountScope() : saved_(g_counts), prev_active_(g_count_active) {
  g_counts = OpCounts{};
  g_count_active = true;
}

OpCountScope::~OpCountScope() {
  g_counts = saved_;
  g_count_active = prev_active_;
}

const OpCounts& OpCountScope::counts() const { return g_counts; }

namespace detail {

namespace {
template <class Range>
Tensor make_result_impl(Shape shape, std::vector<double> values, const Range& inputs,
                        std::function<void(TensorImpl&)> fn) {
  Tensor out(std::move(shape), std::move(values));
  if (!GradMode::enabled()) return out;
  bool any = false;
  for (const Tensor* t : inputs) any = any || t->requires_grad();
  if (!any) return out;
  TensorImpl* impl = out.impl();
  impl->requires_grad = true;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) impl->parents.push_back(t->impl_ptr());
  impl->backward_fn = std::move(fn);
  return out;
}
}  // namespace

Tensor make_result(Shape shape, std::vector<double> values,
                   std::initializer_list<const Tensor*> inputs,
                   std::function<void(TensorImpl&)> fn) {
  return make_result_impl(std::move(shape), std::move(values), inputs, std::move(fn));
}

Tensor make_result(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs,
                   std::function<void(TensorImpl&)> fn) {
  std::vector<const Tensor*> ptrs;
  ptrs.reserve(inputs.size());
  for (const auto& t : inputs) ptrs.push_back(&t);
  return make_result_impl(std::move(shape), std::move(values), ptrs, std::move(fn));
}

double* grad_of(const Tensor& t) {
  if (!t.requires_grad()) return nullptr;
  t.impl()->ensure_grad();
  return t.impl()->grad.data();
}

}  // namespace detail
}  // namespace irstd
