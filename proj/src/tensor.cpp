// SPDX-License-Identifier: Apache-2.0
#include "dynaroute/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "dynaroute/errors.hpp"

namespace dynaroute {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, bool requires_grad) : impl_(std::make_shared<Impl>()) {
  const auto n = shape_numel(shape);
  impl_->shape = std::move(shape);
  impl_->data.assign(static_cast<std::size_t>(n), T(0));
  impl_->requires_grad = requires_grad;
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> values, bool requires_grad)
    : impl_(std::make_shared<Impl>()) {
  const auto n = shape_numel(shape);
  if (static_cast<std::int64_t>(values.size()) != n) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     shape_str(shape));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
  impl_->requires_grad = requires_grad;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
  return BasicTensor(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
const Shape& BasicTensor<T>::shape() const {
  if (!impl_) throw Error("use of undefined tensor");
  return impl_->shape;
}

template <typename T>
std::int64_t BasicTensor<T>::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  return s[axis];
}

template <typename T>
std::int64_t BasicTensor<T>::numel() const {
  return static_cast<std::int64_t>(impl_ ? impl_->data.size() : 0);
}

template <typename T>
std::span<T> BasicTensor<T>::data() {
  if (!impl_) throw Error("use of undefined tensor");
  return impl_->data;
}

template <typename T>
std::span<const T> BasicTensor<T>::data() const {
  if (!impl_) throw Error("use of undefined tensor");
  return impl_->data;
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

template <typename T>
bool BasicTensor<T>::requires_grad() const {
  return impl_ && impl_->requires_grad;
}

template <typename T>
BasicTensor<T>& BasicTensor<T>::set_requires_grad(bool flag) {
  if (!impl_) throw Error("use of undefined tensor");
  impl_->requires_grad = flag;
  return *this;
}

template <typename T>
bool BasicTensor<T>::has_grad() const {
  return impl_ && !impl_->grad.empty();
}

template <typename T>
std::span<T> BasicTensor<T>::grad() const {
  if (!impl_) throw Error("use of undefined tensor");
  if (impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), T(0));
  return impl_->grad;
}

template <typename T>
std::span<const T> BasicTensor<T>::grad_view() const {
  if (!impl_) return {};
  return impl_->grad;
}

template <typename T>
void BasicTensor<T>::zero_grad() {
  if (impl_) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
}

template <typename T>
bool BasicTensor<T>::all_finite() const {
  const auto d = data();
  return std::all_of(d.begin(), d.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return BasicTensor(shape(), std::vector<T>(impl_->data), false);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::clone() const {
  BasicTensor out(shape(), std::vector<T>(impl_->data), impl_->requires_grad);
  out.impl_->grad = impl_->grad;
  return out;
}

template class BasicTensor<float>;
template class BasicTensor<double>;

namespace {
thread_local Tape* g_active_tape = nullptr;
thread_local FlopCounter* g_active_counter = nullptr;
}  // namespace

void Tape::record(const char* op_name, BackwardFn backward) {
  entries_.push_back(Entry{op_name, std::move(backward)});
}

std::vector<std::string> Tape::op_names() const {
  std::vector<std::string> names;
  names.reserve(entries_.size());
  for (const auto& e : entries_) names.emplace_back(e.name);
  return names;
}

void Tape::replay_backward() {
  // Detach the entries first so closures that touch the tape see it empty.
  auto entries = std::move(entries_);
  entries_.clear();
  for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
    it->backward();
    it->backward = nullptr;
  }
}

Tape* active_tape() noexcept { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) noexcept : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

template <typename T>
void backward(BasicTensor<T>& loss, Tape& tape) {
  if (loss.numel() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    tape.clear();
    return;
  }
  loss.grad()[0] = T(1);
  tape.replay_backward();
}

template void backward<float>(BasicTensor<float>&, Tape&);
template void backward<double>(BasicTensor<double>&, Tape&);

FlopCounter::FlopCounter() noexcept : previous_(g_active_counter) { g_active_counter = this; }
FlopCounter::~FlopCounter() { g_active_counter = previous_; }
FlopCounter* active_flop_counter() noexcept { return g_active_counter; }

}  // namespace dynaroute
