// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

namespace dynaroute {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major tensor with an optional gradient buffer.
///
/// Copies share storage (handle semantics); use clone() or detach() for an
/// independent value. The gradient buffer is allocated lazily and always has
/// the same length as the data.
template <typename T>
class BasicTensor {
  static_assert(std::is_floating_point_v<T>);

 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, bool requires_grad = false);
  BasicTensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static BasicTensor scalar(T value, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::int64_t dim(std::size_t axis) const;
  std::int64_t numel() const;

  std::span<T> data();
  std::span<const T> data() const;
  T item() const;

  bool requires_grad() const;
  BasicTensor& set_requires_grad(bool flag);

  bool has_grad() const;
  /// Gradient buffer; allocated as zeros on first access. Handle constness
  /// does not extend to the gradient, which backward closures accumulate into.
  std::span<T> grad() const;
  /// Gradient buffer, or an empty span when none has been allocated.
  std::span<const T> grad_view() const;
  void zero_grad();

  bool all_finite() const;
  BasicTensor detach() const;
  BasicTensor clone() const;

  /// Identity of the underlying storage.
  const void* id() const noexcept { return impl_.get(); }

 private:
  struct Impl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

template <typename T>
struct BasicNamedParam {
  std::string name;
  BasicTensor<T> tensor;
};
using NamedParam = BasicNamedParam<float>;

/// Ordered record of executed primitives. Each entry's backward closure reads
/// the gradient of the op's output and accumulates into its inputs.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(const char* op_name, BackwardFn backward);
  std::size_t size() const noexcept { return entries_.size(); }
  std::vector<std::string> op_names() const;
  void clear() noexcept { entries_.clear(); }

  /// Invokes every entry once, newest first, then empties the tape.
  void replay_backward();

 private:
  struct Entry {
    const char* name;
    BackwardFn backward;
  };
  std::vector<Entry> entries_;
};

/// The tape ops record onto; nullptr outside any TapeScope.
Tape* active_tape() noexcept;

class TapeScope {
 public:
  explicit TapeScope(Tape& tape) noexcept;
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Seeds d(loss)/d(loss) = 1 and replays the tape. Parameters that do not
/// contribute to the loss end up with zero gradients.
template <typename T>
void backward(BasicTensor<T>& loss, Tape& tape);

/// Counts FLOPs (2 x multiply-accumulate) of conv, depthwise conv and matmul
/// primitives executed while in scope.
class FlopCounter {
 public:
  FlopCounter() noexcept;
  ~FlopCounter();
  FlopCounter(const FlopCounter&) = delete;
  FlopCounter& operator=(const FlopCounter&) = delete;

  std::uint64_t count() const noexcept { return count_; }
  void add(std::uint64_t flops) noexcept { count_ += flops; }

 private:
  std::uint64_t count_ = 0;
  FlopCounter* previous_;
};

FlopCounter* active_flop_counter() noexcept;

}  // namespace dynaroute
