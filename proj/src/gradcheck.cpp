#include "mast/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>

#include "mast/errors.hpp"
#include "mast/loss.hpp"
#include "mast/model.hpp"
#include "mast/rng.hpp"
#include "mast/tensor.hpp"

namespace mast {

namespace {

using Fn = std::function<Tensor(const std::vector<Tensor>&)>;

struct Input {
  Shape shape;
  double lo = -1.0;
  double hi = 1.0;
  bool avoid_zero = false;  // keep |x| >= 0.1 so kinks stay out of the difference stencil
};

Tensor random_leaf(const Input& in, Rng& rng) {
  std::vector<double> v(shape_numel(in.shape));
  for (double& x : v) {
    x = in.lo + (in.hi - in.lo) * uniform01(rng);
    if (in.avoid_zero && std::abs(x) < 0.1) x = x < 0 ? x - 0.1 : x + 0.1;
  }
  Tensor t = Tensor::from(in.shape, v, DType::f64);
  t.set_requires_grad(true);
  return t;
}

std::vector<double> central_difference(Tensor& leaf, const std::function<double()>& f, double h) {
  NoGradGuard no_grad;
  std::vector<double> g(leaf.numel());
  for (std::size_t i = 0; i < leaf.numel(); ++i) {
    const double x0 = leaf.at(i);
    leaf.set(i, x0 + h);
    const double fp = f();
    leaf.set(i, x0 - h);
    const double fm = f();
    leaf.set(i, x0);
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

GradcheckCase check_primitive(const std::string& name, std::vector<Input> inputs, const Fn& fn, Rng& rng) {
  std::vector<Tensor> leaves;
  for (const auto& in : inputs) leaves.push_back(random_leaf(in, rng));
  // A fixed random projection makes the scalar depend on every output element differently.
  Tensor out_shape_probe;
  {
    NoGradGuard no_grad;
    out_shape_probe = fn(leaves);
  }
  std::vector<double> w(out_shape_probe.numel());
  for (double& x : w) x = uniform01(rng) * 2.0 - 1.0;
  const Tensor weights = Tensor::from(out_shape_probe.shape(), w, DType::f64);
  const auto scalar = [&] { return sum(mul(fn(leaves), weights)); };

  Graph::current().reset();
  for (auto& l : leaves) l.zero_grad();
  backward(scalar());
  GradcheckCase c{name, 0.0, 1e-4, false};
  for (auto& l : leaves) {
    const auto numeric = central_difference(l, [&] { return scalar().item(); }, 1e-6);
    c.max_rel_error = std::max(c.max_rel_error, max_relative_error(l.grad_vector(), numeric, 1e-6));
  }
  c.passed = c.max_rel_error < c.tolerance;
  return c;
}

GradcheckCase check_full_loss(Rng& rng) {
  ModelConfig cfg;
  cfg.embed_dim = 8;
  cfg.hidden = 6;
  cfg.num_masks = 2;
  cfg.channels = {3, 4, 4};
  Model model(cfg, rng());
  const auto batch = [&] {
    std::vector<Image> out;
    for (int i = 0; i < 4; ++i) {
      Image img(16, 16);
      for (float& v : img.pixels) v = static_cast<float>(uniform01(rng));
      out.push_back(img);
    }
    return images_to_tensor(out);
  };
  const Tensor v = batch(), vp = batch();
  const std::vector<std::size_t> active{0, 1};
  const auto coeffs = LossCoefficients::defaults(cfg.embed_dim, cfg.num_masks);
  const auto loss = [&] {
    const auto f = model.forward(v);
    const auto fp = model.forward(vp);
    return total_loss(f.emb, fp.emb, model.bank.masks(), active, coeffs).total;
  };
  Graph::current().reset();
  for (auto& p : model.parameters()) p.tensor->zero_grad();
  backward(loss());
  GradcheckCase c{"total_loss", 0.0, 1e-3, false};
  for (auto& p : model.parameters()) {
    const auto numeric = central_difference(*p.tensor, [&] { return loss().item(); }, 1e-4);
    c.max_rel_error = std::max(c.max_rel_error, max_relative_error(p.tensor->grad_vector(), numeric, 1e-5));
  }
  c.passed = c.max_rel_error < c.tolerance;
  return c;
}

}  // namespace

double max_relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric,
                          double floor) {
  if (analytic.size() != numeric.size()) throw ContractError("max_relative_error: length mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double scale = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / scale);
  }
  return worst;
}

bool GradcheckReport::passed() const {
  return !cases.empty() && std::all_of(cases.begin(), cases.end(), [](const auto& c) { return c.passed; });
}

GradcheckReport gradcheck(std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  ScopedDType scope(DType::f64);
  Rng rng(seed);
  GradcheckReport r;
  const Shape m{3, 4};
  const Input pos{m, 0.5, 2.0};
  const auto add_case = [&](const std::string& name, std::vector<Input> in, const Fn& fn) {
    r.cases.push_back(check_primitive(name, std::move(in), fn, rng));
  };

  add_case("add", {{m}, {m}}, [](const auto& x) { return add(x[0], x[1]); });
  add_case("add_broadcast", {{m}, {{1}}}, [](const auto& x) { return add(x[0], x[1]); });
  add_case("sub", {{m}, {m}}, [](const auto& x) { return sub(x[0], x[1]); });
  add_case("mul", {{m}, {m}}, [](const auto& x) { return mul(x[0], x[1]); });
  add_case("mul_broadcast", {{{1}}, {m}}, [](const auto& x) { return mul(x[0], x[1]); });
  add_case("div", {{m}, pos}, [](const auto& x) { return div(x[0], x[1]); });
  add_case("relu", {{m, -1.0, 1.0, true}}, [](const auto& x) { return relu(x[0]); });
  add_case("sqrt", {pos}, [](const auto& x) { return sqrt(x[0]); });
  add_case("log", {pos}, [](const auto& x) { return log(x[0]); });
  add_case("exp", {{m}}, [](const auto& x) { return exp(x[0]); });
  add_case("square", {{m}}, [](const auto& x) { return square(x[0]); });
  add_case("maximum", {{m, -1.0, 1.0, true}}, [](const auto& x) { return maximum(x[0], 0.0); });
  add_case("add_scalar", {{m}}, [](const auto& x) { return add_scalar(x[0], 0.7); });
  add_case("mul_scalar", {{m}}, [](const auto& x) { return mul_scalar(x[0], -1.3); });
  add_case("matmul", {{{3, 4}}, {{4, 2}}}, [](const auto& x) { return matmul(x[0], x[1]); });
  add_case("transpose", {{m}}, [](const auto& x) { return transpose(x[0]); });
  add_case("reshape", {{m}}, [](const auto& x) { return reshape(x[0], {2, 6}); });
  add_case("tile_rows", {{{4}}}, [](const auto& x) { return tile_rows(x[0], 3); });
  add_case("select_columns", {{m}}, [](const auto& x) {
    const std::vector<std::size_t> cols{3, 0, 3};
    return select_columns(x[0], cols);
  });
  add_case("concat_cols", {{{3, 2}}, {{3, 3}}}, [](const auto& x) { return concat_cols(x[0], x[1]); });
  add_case("conv2d", {{{2, 2, 7, 7}}, {{3, 2, 3, 3}}, {{3}}},
           [](const auto& x) { return conv2d(x[0], x[1], 2, x[2]); });
  add_case("sum_all", {{m}}, [](const auto& x) { return sum(x[0]); });
  add_case("sum_axis0", {{m}}, [](const auto& x) { return sum(x[0], {0}); });
  add_case("mean_axis1", {{m}}, [](const auto& x) { return mean(x[0], {1}); });
  add_case("var_axis0", {{m}}, [](const auto& x) { return var(x[0], {0}); });
  add_case("var_all", {{{2, 3, 2}}}, [](const auto& x) { return var(x[0]); });
  add_case("gem_pool", {{{2, 3, 3, 3}, 0.2, 1.5}, {{1}, 1.5, 3.5}},
           [](const auto& x) { return gem_pool(x[0], x[1]); });
  add_case("cross_entropy", {{{4, 3}}}, [](const auto& x) {
    const std::vector<std::size_t> labels{0, 2, 1, 2};
    return cross_entropy(x[0], labels);
  });
  r.cases.push_back(check_full_loss(rng));
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

nlohmann::json to_json(const GradcheckReport& r) {
  nlohmann::json cases = nlohmann::json::array();
  for (const auto& c : r.cases) {
    cases.push_back({{"name", c.name}, {"max_rel_error", c.max_rel_error}, {"tolerance", c.tolerance},
                     {"passed", c.passed}});
  }
  return {{"passed", r.passed()}, {"seconds", r.seconds}, {"cases", cases}};
}

}  // namespace mast
