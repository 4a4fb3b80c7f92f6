#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "mast/errors.hpp"

namespace mast {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

const char* dtype_name(DType dt);

/// Process-wide numeric configuration. Training runs in f32; gradient checks
/// switch to f64. Strict mode turns on division-by-zero and non-finite
/// validation for every produced value.
void set_default_dtype(DType dt);
DType default_dtype();
void set_strict_mode(bool on);
bool strict_mode();

class ScopedDType {
 public:
  explicit ScopedDType(DType dt) : saved_(default_dtype()) { set_default_dtype(dt); }
  ~ScopedDType() { set_default_dtype(saved_); }
  ScopedDType(const ScopedDType&) = delete;
  ScopedDType& operator=(const ScopedDType&) = delete;

 private:
  DType saved_;
};

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Flat typed buffer; either float or double.
class Storage {
 public:
  Storage() = default;
  Storage(DType dt, std::size_t n, double fill = 0.0);

  DType dtype() const { return static_cast<DType>(data_.index()); }
  std::size_t size() const;

  template <class T>
  std::span<T> view() {
    return std::span<T>(std::get<std::vector<T>>(data_));
  }
  template <class T>
  std::span<const T> view() const {
    return std::span<const T>(std::get<std::vector<T>>(data_));
  }

  double get(std::size_t i) const;
  void set(std::size_t i, double v);
  std::vector<double> to_vector() const;

 private:
  std::variant<std::vector<float>, std::vector<double>> data_;
};

/// Calls f.template operator()<T>() with T matching the dtype.
template <class F>
decltype(auto) dispatch(DType dt, F&& f) {
  if (dt == DType::f32) return f.template operator()<float>();
  return f.template operator()<double>();
}

struct TensorImpl {
  Shape shape;
  Storage data;
  std::optional<Storage> grad;
  bool requires_grad = false;
  bool is_leaf = true;

  Storage& grad_buffer();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, std::optional<DType> dt = std::nullopt);
  static Tensor full(Shape shape, double value, std::optional<DType> dt = std::nullopt);
  static Tensor from(Shape shape, std::span<const double> values,
                     std::optional<DType> dt = std::nullopt);
  static Tensor from(Shape shape, std::initializer_list<double> values,
                     std::optional<DType> dt = std::nullopt);
  static Tensor scalar(double value, std::optional<DType> dt = std::nullopt);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }
  DType dtype() const { return impl_->data.dtype(); }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const { return impl_->is_leaf; }

  double item() const;
  double at(std::size_t flat) const { return impl_->data.get(flat); }
  std::vector<double> to_vector() const { return impl_->data.to_vector(); }

  template <class T>
  std::span<const T> data() const {
    return std::as_const(impl_->data).view<T>();
  }
  /// Direct write access, intended for parameter initialization and optimizer
  /// updates on leaves. Never used by differentiable ops.
  template <class T>
  std::span<T> mutable_data() {
    return impl_->data.view<T>();
  }
  void set(std::size_t flat, double v) { impl_->data.set(flat, v); }

  bool has_grad() const { return impl_->grad.has_value(); }
  std::vector<double> grad_vector() const;
  template <class T>
  std::span<T> grad_data() {
    return impl_->grad_buffer().view<T>();
  }
  void zero_grad() { impl_->grad.reset(); }

  /// Deep copy with no autograd history.
  Tensor detach() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// One recorded primitive. backward receives the output gradient and
/// accumulates into the inputs' gradient buffers.
struct Node {
  const char* name = "";
  std::shared_ptr<TensorImpl> output;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(const Storage& grad_out)> backward;
};

/// Thread-local tape of primitives applied since the last reset. Creation
/// order is a valid topological order, so backward walks it in reverse.
class Graph {
 public:
  static Graph& current();

  void record(Node node);
  std::size_t size() const { return nodes_.size(); }
  void reset() { nodes_.clear(); }

  /// Populates grads of every requires_grad leaf reachable from loss, then
  /// clears the tape.
  void backward(const Tensor& loss);

  static bool grad_enabled();
  static void set_grad_enabled(bool on);

 private:
  std::vector<Node> nodes_;
};

class NoGradGuard {
 public:
  NoGradGuard() : saved_(Graph::grad_enabled()) { Graph::set_grad_enabled(false); }
  ~NoGradGuard() { Graph::set_grad_enabled(saved_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool saved_;
};

inline void backward(const Tensor& loss) { Graph::current().backward(loss); }

// Elementwise. Binary ops accept equal shapes or a single-element operand.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor square(const Tensor& x);
Tensor maximum(const Tensor& x, double floor);
Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return mul_scalar(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul_scalar(a, c); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }

// Linear algebra and layout.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
/// [d] -> [n, d], each row a copy of v.
Tensor tile_rows(const Tensor& v, std::size_t n);
/// [r, c] -> [r, |cols|] keeping the listed columns in order.
Tensor select_columns(const Tensor& x, std::span<const std::size_t> cols);
/// [n, p] ++ [n, q] -> [n, p + q].
Tensor concat_cols(const Tensor& a, const Tensor& b);

/// Valid-padding cross-correlation. input [n,c,h,w], kernel [co,c,kh,kw],
/// optional bias [co].
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride,
              const Tensor& bias = Tensor());

enum class ReduceOp { sum, mean, var };
/// Reduces the listed axes (all axes when empty); reduced axes are dropped.
/// var is the population variance (denominator n).
Tensor reduce(ReduceOp op, const Tensor& x, std::vector<std::size_t> axes = {});
inline Tensor sum(const Tensor& x, std::vector<std::size_t> axes = {}) {
  return reduce(ReduceOp::sum, x, std::move(axes));
}
inline Tensor mean(const Tensor& x, std::vector<std::size_t> axes = {}) {
  return reduce(ReduceOp::mean, x, std::move(axes));
}
inline Tensor var(const Tensor& x, std::vector<std::size_t> axes = {}) {
  return reduce(ReduceOp::var, x, std::move(axes));
}

/// Generalized-mean pooling over the spatial axes of [n,c,h,w] with a
/// learnable single-element exponent p. Inputs are clamped below at eps.
Tensor gem_pool(const Tensor& x, const Tensor& p, double eps = 1e-6);

/// Mean softmax cross-entropy of logits [n, C] against integer labels.
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

}  // namespace mast
