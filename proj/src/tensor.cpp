#include "mast/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "gemm.hpp"

namespace mast {

namespace {

std::atomic<DType> g_default_dtype{DType::f32};
std::atomic<bool> g_strict{false};
thread_local bool t_grad_enabled = true;

using ImplPtr = std::shared_ptr<TensorImpl>;

ImplPtr make_impl(Shape shape, DType dt, double fill = 0.0) {
  auto impl = std::make_shared<TensorImpl>();
  const std::size_t n = shape_numel(shape);
  impl->shape = std::move(shape);
  impl->data = Storage(dt, n, fill);
  return impl;
}

bool needs_grad(std::initializer_list<const Tensor*> inputs) {
  if (!Graph::grad_enabled()) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->defined() && t->requires_grad(); });
}

void check_finite(const TensorImpl& impl, const char* op) {
  if (!strict_mode()) return;
  dispatch(impl.data.dtype(), [&]<class T>() {
    for (T v : impl.data.view<T>()) {
      if (!std::isfinite(v)) {
        throw DomainError(std::string(op) + ": produced a non-finite value");
      }
    }
  });
}

// Creates the output of an op, records the node when any input needs grad.
Tensor finish(const char* name, ImplPtr out, std::initializer_list<const Tensor*> inputs,
              std::function<void(const Storage&)> bw) {
  check_finite(*out, name);
  if (needs_grad(inputs)) {
    out->requires_grad = true;
    out->is_leaf = false;
    Node node;
    node.name = name;
    node.output = out;
    for (const Tensor* t : inputs) {
      if (t->defined()) node.inputs.push_back(t->impl());
    }
    node.backward = std::move(bw);
    Graph::current().record(std::move(node));
  }
  return Tensor(std::move(out));
}

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw ContractError(std::string(op) + ": dtype mismatch (" + dtype_name(a.dtype()) +
                        " vs " + dtype_name(b.dtype()) + ")");
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_string(t.shape()));
  }
}

template <class T>
std::span<T> grad_of(const ImplPtr& impl) {
  return impl->grad_buffer().view<T>();
}

// ---------------------------------------------------------------- elementwise

enum class BinaryKind { add, sub, mul, div };

const char* binary_name(BinaryKind k) {
  switch (k) {
    case BinaryKind::add: return "add";
    case BinaryKind::sub: return "sub";
    case BinaryKind::mul: return "mul";
    case BinaryKind::div: return "div";
  }
  return "?";
}

Tensor binary(BinaryKind kind, const Tensor& a, const Tensor& b) {
  const char* name = binary_name(kind);
  require_same_dtype(a, b, name);
  Shape out_shape;
  if (a.shape() == b.shape()) {
    out_shape = a.shape();
  } else if (b.numel() == 1) {
    out_shape = a.shape();
  } else if (a.numel() == 1) {
    out_shape = b.shape();
  } else {
    throw DimensionError(std::string(name) + ": shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " are not broadcast-compatible");
  }
  const bool a_scalar = a.numel() == 1 && a.shape() != out_shape;
  const bool b_scalar = b.numel() == 1 && b.shape() != out_shape;
  auto out = make_impl(out_shape, a.dtype());
  const std::size_t n = out->data.size();

  dispatch(a.dtype(), [&]<class T>() {
    auto x = a.data<T>();
    auto y = b.data<T>();
    auto o = out->data.view<T>();
    for (std::size_t i = 0; i < n; ++i) {
      const T u = x[a_scalar ? 0 : i];
      const T v = y[b_scalar ? 0 : i];
      switch (kind) {
        case BinaryKind::add: o[i] = u + v; break;
        case BinaryKind::sub: o[i] = u - v; break;
        case BinaryKind::mul: o[i] = u * v; break;
        case BinaryKind::div:
          if (v == T(0) && strict_mode()) throw DomainError("div: zero divisor");
          o[i] = u / v;
          break;
      }
    }
  });

  auto ai = a.impl();
  auto bi = b.impl();
  return finish(name, out, {&a, &b}, [kind, ai, bi, a_scalar, b_scalar, n](const Storage& g) {
    dispatch(g.dtype(), [&]<class T>() {
      auto go = g.view<T>();
      auto x = std::as_const(ai->data).view<T>();
      auto y = std::as_const(bi->data).view<T>();
      if (ai->requires_grad) {
        auto ga = grad_of<T>(ai);
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t j = a_scalar ? 0 : i;
          const std::size_t k = b_scalar ? 0 : i;
          switch (kind) {
            case BinaryKind::add:
            case BinaryKind::sub: ga[j] += go[i]; break;
            case BinaryKind::mul: ga[j] += go[i] * y[k]; break;
            case BinaryKind::div: ga[j] += go[i] / y[k]; break;
          }
        }
      }
      if (bi->requires_grad) {
        auto gb = grad_of<T>(bi);
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t j = a_scalar ? 0 : i;
          const std::size_t k = b_scalar ? 0 : i;
          switch (kind) {
            case BinaryKind::add: gb[k] += go[i]; break;
            case BinaryKind::sub: gb[k] -= go[i]; break;
            case BinaryKind::mul: gb[k] += go[i] * x[j]; break;
            case BinaryKind::div: gb[k] -= go[i] * x[j] / (y[k] * y[k]); break;
          }
        }
      }
    });
  });
}

// fwd(x) computes the value; dfdx(x, y) the local derivative given x and the
// output y.
template <class Fwd, class Deriv>
Tensor unary(const char* name, const Tensor& x, Fwd fwd, Deriv dfdx) {
  auto out = make_impl(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto in = x.data<T>();
    auto o = out->data.view<T>();
    for (std::size_t i = 0; i < in.size(); ++i) o[i] = static_cast<T>(fwd(in[i]));
  });
  auto xi = x.impl();
  std::weak_ptr<TensorImpl> wo = out;
  return finish(name, out, {&x}, [xi, wo, dfdx](const Storage& g) {
    auto oi = wo.lock();
    dispatch(g.dtype(), [&]<class T>() {
      auto go = g.view<T>();
      auto in = std::as_const(xi->data).view<T>();
      auto y = std::as_const(oi->data).view<T>();
      auto gx = grad_of<T>(xi);
      for (std::size_t i = 0; i < go.size(); ++i) {
        gx[i] += go[i] * static_cast<T>(dfdx(in[i], y[i]));
      }
    });
  });
}

// ----------------------------------------------------------------- reductions

struct ReducePlan {
  Shape out_shape;
  std::vector<std::size_t> out_index;  // per input element
  std::size_t group = 1;               // elements per output
};

ReducePlan plan_reduce(const Shape& shape, std::vector<std::size_t> axes) {
  if (axes.empty()) {
    axes.resize(shape.size());
    std::iota(axes.begin(), axes.end(), std::size_t{0});
  }
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  std::vector<bool> reduced(shape.size(), false);
  for (std::size_t ax : axes) {
    if (ax >= shape.size()) {
      throw DimensionError("reduce: axis " + std::to_string(ax) + " out of range for shape " +
                           shape_string(shape));
    }
    reduced[ax] = true;
  }
  ReducePlan plan;
  std::vector<std::size_t> out_stride(shape.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = shape.size(); i-- > 0;) {
    if (reduced[i]) {
      plan.group *= shape[i];
    } else {
      out_stride[i] = stride;
      stride *= shape[i];
    }
  }
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (!reduced[i]) plan.out_shape.push_back(shape[i]);
  }
  if (plan.group == 0) throw DomainError("reduce: empty reduction axis");

  const std::size_t n = shape_numel(shape);
  plan.out_index.resize(n);
  std::vector<std::size_t> idx(shape.size(), 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t o = 0;
    for (std::size_t d = 0; d < shape.size(); ++d) o += idx[d] * out_stride[d];
    plan.out_index[flat] = o;
    for (std::size_t d = shape.size(); d-- > 0;) {
      if (++idx[d] < shape[d]) break;
      idx[d] = 0;
    }
  }
  return plan;
}

}  // namespace

// ------------------------------------------------------------------ config

const char* dtype_name(DType dt) { return dt == DType::f32 ? "f32" : "f64"; }

void set_default_dtype(DType dt) { g_default_dtype.store(dt); }
DType default_dtype() { return g_default_dtype.load(); }
void set_strict_mode(bool on) { g_strict.store(on); }
bool strict_mode() { return g_strict.load(); }

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// ------------------------------------------------------------------ storage

Storage::Storage(DType dt, std::size_t n, double fill) {
  if (dt == DType::f32) {
    data_ = std::vector<float>(n, static_cast<float>(fill));
  } else {
    data_ = std::vector<double>(n, fill);
  }
}

std::size_t Storage::size() const {
  return std::visit([](const auto& v) { return v.size(); }, data_);
}

double Storage::get(std::size_t i) const {
  return std::visit([i](const auto& v) { return static_cast<double>(v.at(i)); }, data_);
}

void Storage::set(std::size_t i, double value) {
  std::visit([&](auto& v) { v.at(i) = static_cast<typename std::decay_t<decltype(v)>::value_type>(value); },
             data_);
}

std::vector<double> Storage::to_vector() const {
  return std::visit([](const auto& v) { return std::vector<double>(v.begin(), v.end()); }, data_);
}

Storage& TensorImpl::grad_buffer() {
  if (!grad) grad.emplace(data.dtype(), data.size(), 0.0);
  return *grad;
}

// ------------------------------------------------------------------- tensor

Tensor Tensor::zeros(Shape shape, std::optional<DType> dt) {
  return Tensor(make_impl(std::move(shape), dt.value_or(default_dtype())));
}

Tensor Tensor::full(Shape shape, double value, std::optional<DType> dt) {
  return Tensor(make_impl(std::move(shape), dt.value_or(default_dtype()), value));
}

Tensor Tensor::from(Shape shape, std::span<const double> values, std::optional<DType> dt) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("Tensor::from: " + std::to_string(values.size()) +
                         " values for shape " + shape_string(shape));
  }
  auto impl = make_impl(std::move(shape), dt.value_or(default_dtype()));
  for (std::size_t i = 0; i < values.size(); ++i) impl->data.set(i, values[i]);
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::initializer_list<double> values, std::optional<DType> dt) {
  return from(std::move(shape), std::span<const double>(values.begin(), values.size()), dt);
}

Tensor Tensor::scalar(double value, std::optional<DType> dt) {
  return full({}, value, dt);
}

Tensor& Tensor::set_requires_grad(bool on) {
  if (!impl_->is_leaf) throw ContractError("set_requires_grad: only leaves can be toggled");
  impl_->requires_grad = on;
  return *this;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item: tensor of shape " + shape_string(shape()) + " is not a scalar");
  }
  return impl_->data.get(0);
}

std::vector<double> Tensor::grad_vector() const {
  if (!impl_->grad) return std::vector<double>(numel(), 0.0);
  return impl_->grad->to_vector();
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

// -------------------------------------------------------------------- graph

Graph& Graph::current() {
  thread_local Graph graph;
  return graph;
}

void Graph::record(Node node) { nodes_.push_back(std::move(node)); }

bool Graph::grad_enabled() { return t_grad_enabled; }
void Graph::set_grad_enabled(bool on) { t_grad_enabled = on; }

void Graph::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
  }
  if (nodes_.empty() || !loss.requires_grad()) {
    nodes_.clear();
    throw ContractError("backward: graph is empty; loss does not depend on any parameter");
  }
  loss.impl()->grad_buffer().set(0, loss.impl()->grad_buffer().get(0) + 1.0);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& node = *it;
    if (!node.output->grad) continue;
    node.backward(*node.output->grad);
    if (!node.output->is_leaf) node.output->grad.reset();
  }
  nodes_.clear();
}

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) { return binary(BinaryKind::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(BinaryKind::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(BinaryKind::mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(BinaryKind::div, a, b); }

Tensor relu(const Tensor& x) {
  return unary(
      "relu", x, [](auto v) { return v > 0 ? v : decltype(v)(0); },
      [](auto v, auto) { return v > 0 ? 1.0 : 0.0; });
}

Tensor sqrt(const Tensor& x) {
  return unary(
      "sqrt", x, [](auto v) { return std::sqrt(v); },
      [](auto, auto y) { return 0.5 / static_cast<double>(y); });
}

Tensor log(const Tensor& x) {
  return unary(
      "log", x, [](auto v) { return std::log(v); },
      [](auto v, auto) { return 1.0 / static_cast<double>(v); });
}

Tensor exp(const Tensor& x) {
  return unary(
      "exp", x, [](auto v) { return std::exp(v); },
      [](auto, auto y) { return static_cast<double>(y); });
}

Tensor square(const Tensor& x) {
  return unary(
      "square", x, [](auto v) { return v * v; },
      [](auto v, auto) { return 2.0 * static_cast<double>(v); });
}

Tensor maximum(const Tensor& x, double floor) {
  return unary(
      "maximum", x,
      [floor](auto v) {
        using T = decltype(v);
        return v > static_cast<T>(floor) ? v : static_cast<T>(floor);
      },
      [floor](auto v, auto) {
        using T = decltype(v);
        return v > static_cast<T>(floor) ? 1.0 : 0.0;
      });
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary(
      "add_scalar", x,
      [c](auto v) { return v + static_cast<decltype(v)>(c); },
      [](auto, auto) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double c) {
  return unary(
      "mul_scalar", x,
      [c](auto v) { return v * static_cast<decltype(v)>(c); },
      [c](auto, auto) { return c; });
}

// -------------------------------------------------------------------- layout

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  require_same_dtype(a, b, "matmul");
  const std::size_t n = a.dim(0), p = a.dim(1), m = b.dim(1);
  if (b.dim(0) != p) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  auto out = make_impl({n, m}, a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    detail::gemm_nn<T>(n, p, m, a.data<T>().data(), b.data<T>().data(),
                       out->data.view<T>().data(), false);
  });
  auto ai = a.impl();
  auto bi = b.impl();
  return finish("matmul", out, {&a, &b}, [ai, bi, n, p, m](const Storage& g) {
    dispatch(g.dtype(), [&]<class T>() {
      const T* go = g.view<T>().data();
      if (ai->requires_grad) {
        // dA = dC * B^T
        detail::gemm_nt<T>(n, m, p, go, std::as_const(bi->data).view<T>().data(),
                           grad_of<T>(ai).data(), true);
      }
      if (bi->requires_grad) {
        // dB = A^T * dC
        detail::gemm_tn<T>(p, n, m, std::as_const(ai->data).view<T>().data(), go,
                           grad_of<T>(bi).data(), true);
      }
    });
  });
}

Tensor transpose(const Tensor& x) {
  require_rank(x, 2, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  auto out = make_impl({c, r}, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto in = x.data<T>();
    auto o = out->data.view<T>();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) o[j * r + i] = in[i * c + j];
  });
  auto xi = x.impl();
  return finish("transpose", out, {&x}, [xi, r, c](const Storage& g) {
    dispatch(g.dtype(), [&]<class T>() {
      auto go = g.view<T>();
      auto gx = grad_of<T>(xi);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += go[j * r + i];
    });
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_string(x.shape()) + " as " +
                         shape_string(shape));
  }
  auto out = make_impl(std::move(shape), x.dtype());
  out->data = x.impl()->data;
  auto xi = x.impl();
  return finish("reshape", out, {&x}, [xi](const Storage& g) {
    dispatch(g.dtype(), [&]<class T>() {
      auto go = g.view<T>();
      auto gx = grad_of<T>(xi);
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    });
  });
}

Tensor tile_rows(const Tensor& v, std::size_t n) {
  require_rank(v, 1, "tile_rows");
  const std::size_t d = v.dim(0);
  auto out = make_impl({n, d}, v.dtype());
  dispatch(v.dtype(), [&]<class T>() {
    auto in = v.data<T>();
    auto o = out->data.view<T>();
    for (std::size_t i = 0; i < n; ++i) std::copy(in.begin(), in.end(), o.begin() + i * d);
  });
  auto vi = v.impl();
  return finish("tile_rows", out, {&v}, [vi, n, d](const Storage& g) {
    dispatch(g.dtype(), [&]<class T>() {
      auto go = g.view<T>();
      auto gv = grad_of<T>(vi);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) gv[j] += go[i * d + j];
    });
  });
}

Tensor select_columns(const Tensor& x, std::span<const std::size_t> cols) {
  require_rank(x, 2, "select_columns");
  const std::size_t r = x.dim(0), c = x.dim(1), k = cols.size();
  for (std::size_t col : cols) {
    if (col >= c) {
      throw ContractError("select_columns: column " + std::to_string(col) + " out of range for " +
                          shape_string(x.shape()));
    }
  }
  std::vector<std::size_t> idx(cols.begin(), cols.end());
  auto out = make_impl({r, k}, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto in = x.data<T>();
    auto o = out->data.view<T>();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < k; ++j) o[i * k + j] = in[i * c + idx[j]];
  });
  auto xi = x.impl();
  return finish("select_columns", out, {&x}, [xi, idx, r, c, k](const Storage& g) {
    dispatch(g.dtype(), [&]<class T>() {
      auto go = g.view<T>();
      auto gx = grad_of<T>(xi);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < k; ++j) gx[i * c + idx[j]] += go[i * k + j];
    });
  });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "concat_cols");
  require_rank(b, 2, "concat_cols");
  require_same_dtype(a, b, "concat_cols");
  const std::size_t n = a.dim(0), p = a.dim(1), q = b.dim(1);
  if (b.dim(0) != n) {
    throw DimensionError("concat_cols: row counts differ " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  auto out = make_impl({n, p + q}, a.dtype());
  dispatch(a.dtype(), [&]<class T>() {
    auto x = a.data<T>();
    auto y = b.data<T>();
    auto o = out->data.view<T>();
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(x.begin() + i * p, p, o.begin() + i * (p + q));
      std::copy_n(y.begin() + i * q, q, o.begin() + i * (p + q) + p);
    }
  });
  auto ai = a.impl();
  auto bi = b.impl();
  return finish("concat_cols", out, {&a, &b}, [ai, bi, n, p, q](const Storage& g) {
    dispatch(g.dtype(), [&]<class T>() {
      auto go = g.view<T>();
      if (ai->requires_grad) {
        auto ga = grad_of<T>(ai);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < p; ++j) ga[i * p + j] += go[i * (p + q) + j];
      }
      if (bi->requires_grad) {
        auto gb = grad_of<T>(bi);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < q; ++j) gb[i * q + j] += go[i * (p + q) + p + j];
      }
    });
  });
}

// ---------------------------------------------------------------------- conv

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w, co, kh, kw, stride, oh, ow;
  std::size_t patch() const { return c * kh * kw; }
  std::size_t positions() const { return n * oh * ow; }
};

// col[(ci*kh+ky)*kw+kx][(b*oh+oy)*ow+ox] = in[b,ci,oy*s+ky,ox*s+kx]
template <class T>
void im2col(const ConvGeometry& g, const T* in, T* col) {
  const std::size_t cols = g.positions();
  for (std::size_t ci = 0; ci < g.c; ++ci)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        T* row = col + ((ci * g.kh + ky) * g.kw + kx) * cols;
        for (std::size_t b = 0; b < g.n; ++b) {
          const T* plane = in + (b * g.c + ci) * g.h * g.w;
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            const T* src = plane + (oy * g.stride + ky) * g.w + kx;
            T* dst = row + (b * g.oh + oy) * g.ow;
            for (std::size_t ox = 0; ox < g.ow; ++ox) dst[ox] = src[ox * g.stride];
          }
        }
      }
}

template <class T>
void col2im_add(const ConvGeometry& g, const T* col, T* in) {
  const std::size_t cols = g.positions();
  for (std::size_t ci = 0; ci < g.c; ++ci)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const T* row = col + ((ci * g.kh + ky) * g.kw + kx) * cols;
        for (std::size_t b = 0; b < g.n; ++b) {
          T* plane = in + (b * g.c + ci) * g.h * g.w;
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            T* dst = plane + (oy * g.stride + ky) * g.w + kx;
            const T* src = row + (b * g.oh + oy) * g.ow;
            for (std::size_t ox = 0; ox < g.ow; ++ox) dst[ox * g.stride] += src[ox];
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, const Tensor& bias) {
  require_rank(input, 4, "conv2d");
  require_rank(kernel, 4, "conv2d");
  require_same_dtype(input, kernel, "conv2d");
  if (stride == 0) throw ContractError("conv2d: stride must be >= 1");
  ConvGeometry geo{input.dim(0), input.dim(1), input.dim(2), input.dim(3), kernel.dim(0),
                   kernel.dim(2), kernel.dim(3), stride, 0, 0};
  if (kernel.dim(1) != geo.c) {
    throw DimensionError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) +
                         " input channels, got " + std::to_string(geo.c));
  }
  if (geo.kh > geo.h || geo.kw > geo.w) {
    throw DimensionError("conv2d: kernel " + shape_string(kernel.shape()) +
                         " larger than input " + shape_string(input.shape()));
  }
  if (bias.defined()) {
    require_same_dtype(input, bias, "conv2d");
    if (bias.rank() != 1 || bias.dim(0) != geo.co) {
      throw DimensionError("conv2d: bias shape " + shape_string(bias.shape()) +
                           " does not match output channels");
    }
  }
  geo.oh = (geo.h - geo.kh) / stride + 1;
  geo.ow = (geo.w - geo.kw) / stride + 1;
  const std::size_t plane = geo.oh * geo.ow;

  auto out = make_impl({geo.n, geo.co, geo.oh, geo.ow}, input.dtype());
  dispatch(input.dtype(), [&]<class T>() {
    std::vector<T> col(geo.patch() * geo.positions());
    im2col(geo, input.data<T>().data(), col.data());
    std::vector<T> tmp(geo.co * geo.positions());
    detail::gemm_nn<T>(geo.co, geo.patch(), geo.positions(), kernel.data<T>().data(), col.data(),
                       tmp.data(), false);
    auto o = out->data.view<T>();
    for (std::size_t b = 0; b < geo.n; ++b)
      for (std::size_t oc = 0; oc < geo.co; ++oc) {
        const T bv = bias.defined() ? bias.data<T>()[oc] : T(0);
        const T* src = tmp.data() + oc * geo.positions() + b * plane;
        T* dst = o.data() + (b * geo.co + oc) * plane;
        for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + bv;
      }
  });

  auto ii = input.impl();
  auto ki = kernel.impl();
  auto bi = bias.defined() ? bias.impl() : nullptr;
  return finish("conv2d", out, {&input, &kernel, &bias}, [ii, ki, bi, geo, plane](const Storage& g) {
    dispatch(g.dtype(), [&]<class T>() {
      auto go = g.view<T>();
      std::vector<T> gtmp(geo.co * geo.positions());
      for (std::size_t b = 0; b < geo.n; ++b)
        for (std::size_t oc = 0; oc < geo.co; ++oc) {
          const T* src = go.data() + (b * geo.co + oc) * plane;
          std::copy_n(src, plane, gtmp.data() + oc * geo.positions() + b * plane);
        }
      if (bi && bi->requires_grad) {
        auto gb = grad_of<T>(bi);
        for (std::size_t oc = 0; oc < geo.co; ++oc) {
          T acc = 0;
          const T* row = gtmp.data() + oc * geo.positions();
          for (std::size_t p = 0; p < geo.positions(); ++p) acc += row[p];
          gb[oc] += acc;
        }
      }
      if (ki->requires_grad) {
        std::vector<T> col(geo.patch() * geo.positions());
        im2col(geo, std::as_const(ii->data).view<T>().data(), col.data());
        detail::gemm_nt<T>(geo.co, geo.positions(), geo.patch(), gtmp.data(), col.data(),
                           grad_of<T>(ki).data(), true);
      }
      if (ii->requires_grad) {
        std::vector<T> gcol(geo.patch() * geo.positions());
        detail::gemm_tn<T>(geo.patch(), geo.co, geo.positions(),
                           std::as_const(ki->data).view<T>().data(), gtmp.data(), gcol.data(),
                           false);
        col2im_add(geo, gcol.data(), grad_of<T>(ii).data());
      }
    });
  });
}

// ---------------------------------------------------------------- reductions

Tensor reduce(ReduceOp op, const Tensor& x, std::vector<std::size_t> axes) {
  auto plan = std::make_shared<ReducePlan>(plan_reduce(x.shape(), std::move(axes)));
  const std::size_t outs = shape_numel(plan->out_shape);
  const std::size_t group = plan->group;
  auto out = make_impl(plan->out_shape, x.dtype());
  auto means = std::make_shared<std::vector<double>>();

  dispatch(x.dtype(), [&]<class T>() {
    auto in = x.data<T>();
    auto o = out->data.view<T>();
    std::vector<double> acc(outs, 0.0);
    for (std::size_t i = 0; i < in.size(); ++i) acc[plan->out_index[i]] += in[i];
    if (op == ReduceOp::sum) {
      for (std::size_t j = 0; j < outs; ++j) o[j] = static_cast<T>(acc[j]);
      return;
    }
    for (double& a : acc) a /= static_cast<double>(group);
    if (op == ReduceOp::mean) {
      for (std::size_t j = 0; j < outs; ++j) o[j] = static_cast<T>(acc[j]);
      return;
    }
    std::vector<double> sq(outs, 0.0);
    for (std::size_t i = 0; i < in.size(); ++i) {
      const double dlt = in[i] - acc[plan->out_index[i]];
      sq[plan->out_index[i]] += dlt * dlt;
    }
    for (std::size_t j = 0; j < outs; ++j) o[j] = static_cast<T>(sq[j] / static_cast<double>(group));
    *means = std::move(acc);
  });

  auto xi = x.impl();
  const char* name = op == ReduceOp::sum ? "sum" : (op == ReduceOp::mean ? "mean" : "var");
  return finish(name, out, {&x}, [op, xi, plan, means, group](const Storage& g) {
    dispatch(g.dtype(), [&]<class T>() {
      auto go = g.view<T>();
      auto gx = grad_of<T>(xi);
      auto in = std::as_const(xi->data).view<T>();
      const double inv = 1.0 / static_cast<double>(group);
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const std::size_t j = plan->out_index[i];
        switch (op) {
          case ReduceOp::sum: gx[i] += go[j]; break;
          case ReduceOp::mean: gx[i] += static_cast<T>(go[j] * inv); break;
          case ReduceOp::var:
            gx[i] += static_cast<T>(go[j] * 2.0 * (in[i] - (*means)[j]) * inv);
            break;
        }
      }
    });
  });
}

// ----------------------------------------------------------------------- gem

Tensor gem_pool(const Tensor& x, const Tensor& p, double eps) {
  require_rank(x, 4, "gem_pool");
  require_same_dtype(x, p, "gem_pool");
  if (p.numel() != 1) throw DimensionError("gem_pool: exponent must be a single element");
  const double pv = p.item();
  if (!(pv > 0.0)) throw DomainError("gem_pool: exponent must be positive");
  const std::size_t n = x.dim(0), c = x.dim(1), area = x.dim(2) * x.dim(3);
  if (area == 0) throw DomainError("gem_pool: empty spatial extent");

  auto out = make_impl({n, c}, x.dtype());
  dispatch(x.dtype(), [&]<class T>() {
    auto in = x.data<T>();
    auto o = out->data.view<T>();
    for (std::size_t r = 0; r < n * c; ++r) {
      const T* v = in.data() + r * area;
      double m = eps;
      for (std::size_t i = 0; i < area; ++i) m = std::max(m, static_cast<double>(v[i]));
      double s = 0.0;
      for (std::size_t i = 0; i < area; ++i) {
        s += std::pow(std::max(static_cast<double>(v[i]), eps) / m, pv);
      }
      s /= static_cast<double>(area);
      o[r] = static_cast<T>(m * std::pow(s, 1.0 / pv));
    }
  });

  auto xi = x.impl();
  auto pi = p.impl();
  std::weak_ptr<TensorImpl> wo = out;
  return finish("gem_pool", out, {&x, &p}, [xi, pi, wo, n, c, area, pv, eps](const Storage& g) {
    auto oi = wo.lock();
    dispatch(g.dtype(), [&]<class T>() {
      auto go = g.view<T>();
      auto in = std::as_const(xi->data).view<T>();
      auto y = std::as_const(oi->data).view<T>();
      double gp = 0.0;
      for (std::size_t r = 0; r < n * c; ++r) {
        const T* v = in.data() + r * area;
        double m = eps;
        for (std::size_t i = 0; i < area; ++i) m = std::max(m, static_cast<double>(v[i]));
        double s = 0.0, slog = 0.0;
        for (std::size_t i = 0; i < area; ++i) {
          const double vi = std::max(static_cast<double>(v[i]), eps);
          const double rp = std::pow(vi / m, pv);
          s += rp;
          slog += rp * std::log(vi);
        }
        s /= static_cast<double>(area);
        slog /= static_cast<double>(area);
        const double yr = y[r];
        const double gr = go[r];
        if (xi->requires_grad) {
          auto gx = grad_of<T>(xi);
          const double scale = gr * yr / (m * static_cast<double>(area) * s);
          for (std::size_t i = 0; i < area; ++i) {
            const double vi = static_cast<double>(v[i]);
            if (vi > eps) gx[r * area + i] += static_cast<T>(scale * std::pow(vi / m, pv - 1.0));
          }
        }
        const double log_s = pv * std::log(m) + std::log(s);
        gp += gr * yr * (-log_s / (pv * pv) + slog / (pv * s));
      }
      if (pi->requires_grad) grad_of<T>(pi)[0] += static_cast<T>(gp);
    });
  });
}

// --------------------------------------------------------------- cross entropy

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t n = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != n) {
    throw ContractError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                        std::to_string(n) + " rows");
  }
  if (n == 0) throw DomainError("cross_entropy: empty batch");
  for (std::size_t l : labels) {
    if (l >= classes) throw ContractError("cross_entropy: label out of range");
  }
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  auto probs = std::make_shared<std::vector<double>>(n * classes);
  auto out = make_impl({}, logits.dtype());
  dispatch(logits.dtype(), [&]<class T>() {
    auto z = logits.data<T>();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const T* row = z.data() + i * classes;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < classes; ++j) mx = std::max(mx, static_cast<double>(row[j]));
      double se = 0.0;
      for (std::size_t j = 0; j < classes; ++j) se += std::exp(row[j] - mx);
      const double lse = mx + std::log(se);
      for (std::size_t j = 0; j < classes; ++j) (*probs)[i * classes + j] = std::exp(row[j] - lse);
      total += lse - row[lab[i]];
    }
    out->data.view<T>()[0] = static_cast<T>(total / static_cast<double>(n));
  });
  auto li = logits.impl();
  return finish("cross_entropy", out, {&logits}, [li, lab, probs, n, classes](const Storage& g) {
    dispatch(g.dtype(), [&]<class T>() {
      const double go = g.view<T>()[0] / static_cast<double>(n);
      auto gl = grad_of<T>(li);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < classes; ++j) {
          const double target = j == lab[i] ? 1.0 : 0.0;
          gl[i * classes + j] += static_cast<T>(go * ((*probs)[i * classes + j] - target));
        }
    });
  });
}

}  // namespace mast
