#include "mast/loss.hpp"

#include <cmath>

namespace mast {

namespace {

constexpr double kTraceFloor = 1e-12;

void check_pair(const char* what, const Tensor& z, const Tensor& zp) {
  if (z.rank() != 2 || z.shape() != zp.shape()) {
    throw DimensionError(std::string(what) + ": expected two equal [n,d] batches, got " +
                         shape_string(z.shape()) + " and " + shape_string(zp.shape()));
  }
}

void check_min_batch(const char* what, const Tensor& z) {
  if (z.dim(0) < 2) {
    throw ContractError(std::string(what) + ": needs a batch of at least 2, got " +
                        std::to_string(z.dim(0)));
  }
}

Tensor active_columns(const char* what, const Tensor& masks, std::size_t d,
                      std::span<const std::size_t> active) {
  if (masks.rank() != 2 || masks.dim(0) != d) {
    throw DimensionError(std::string(what) + ": mask matrix " + shape_string(masks.shape()) +
                         " does not match embedding width " + std::to_string(d));
  }
  if (active.empty()) throw ContractError(std::string(what) + ": empty active subspace set");
  for (std::size_t k : active) {
    if (k >= masks.dim(1)) {
      throw ContractError(std::string(what) + ": active subspace " + std::to_string(k) +
                          " out of range for K=" + std::to_string(masks.dim(1)));
    }
  }
  return select_columns(masks, active);
}

void check_positive(const char* what, const Tensor& var) {
  for (double v : var.to_vector()) {
    if (!(v > 0.0)) throw DomainError(std::string(what) + ": nonpositive variance " + std::to_string(v));
  }
}

Tensor neg(const Tensor& x) { return mul_scalar(x, -1.0); }

Tensor reciprocal(const Tensor& x) { return div(Tensor::full(x.shape(), 1.0, x.dtype()), x); }

double batch_size(const Tensor& z) { return static_cast<double>(z.dim(0)); }

}  // namespace

LossCoefficients LossCoefficients::defaults(std::size_t d, std::size_t k) {
  if (d == 0 || k == 0) throw ContractError("loss coefficients need d > 0 and K > 0");
  LossCoefficients c;
  const double dd = static_cast<double>(d), kk = static_cast<double>(k);
  c.lambda = 25.0 * dd / kk;
  c.lambda1 = 600.0 / (dd * kk);
  return c;
}

LossCoefficients LossCoefficients::baseline(std::size_t d) {
  if (d == 0) throw ContractError("loss coefficients need d > 0");
  LossCoefficients c;
  c.lambda = 25.0 / static_cast<double>(d);
  c.lambda1 = 0.0;
  c.lambda2 = 0.0;
  return c;
}

LossCoefficients LossCoefficients::scaled(double s) const {
  LossCoefficients c = *this;
  c.lambda *= s;
  c.lambda1 *= s;
  c.lambda2 *= s;
  return c;
}

Tensor invariance_distance(const Tensor& z, const Tensor& zp) {
  check_pair("invariance_distance", z, zp);
  return mul_scalar(sum(square(z - zp)), 1.0 / batch_size(z));
}

Tensor masked_distance(const Tensor& z, const Tensor& zp, const Tensor& masks,
                       std::span<const std::size_t> active) {
  check_pair("masked_distance", z, zp);
  Tensor m = active_columns("masked_distance", masks, z.dim(1), active);
  return mul_scalar(sum(matmul(square(z - zp), square(m))), 1.0 / batch_size(z));
}

Tensor sparsity(const Tensor& masks) { return sum(masks); }

Tensor masked_gaussian_distance(const GaussianEmbedding& e, const GaussianEmbedding& ep,
                                const Tensor& masks, std::span<const std::size_t> active,
                                std::size_t* degenerate) {
  check_pair("masked_gaussian_distance", e.mu, ep.mu);
  check_pair("masked_gaussian_distance", e.var, ep.var);
  check_pair("masked_gaussian_distance", e.mu, e.var);
  Tensor m = active_columns("masked_gaussian_distance", masks, e.mu.dim(1), active);
  Tensor num = matmul(square(e.mu - ep.mu), square(m));  // [n, |active|]
  Tensor den = matmul(e.var + ep.var, m);

  // Degenerate pairs are zeroed through constant keep/shift tensors so their
  // gradient vanishes too.
  const auto den_values = den.to_vector();
  Tensor keep = Tensor::zeros(den.shape(), den.dtype());
  Tensor shift = Tensor::zeros(den.shape(), den.dtype());
  std::size_t bad = 0;
  for (std::size_t i = 0; i < den_values.size(); ++i) {
    if (den_values[i] < kTraceFloor) {
      shift.set(i, 1.0);
      ++bad;
    } else {
      keep.set(i, 1.0);
    }
  }
  if (degenerate) *degenerate += bad;
  Tensor terms = (num * keep) / (den + shift);
  return mul_scalar(sum(terms), 2.0 / batch_size(e.mu));
}

Tensor kl_divergence(const GaussianEmbedding& e, const GaussianEmbedding& ep) {
  check_pair("kl_divergence", e.mu, ep.mu);
  check_pair("kl_divergence", e.var, ep.var);
  check_positive("kl_divergence", e.var);
  check_positive("kl_divergence", ep.var);
  Tensor per = e.var / ep.var + square(ep.mu - e.mu) / ep.var + (log(ep.var) - log(e.var));
  Tensor total = sum(add_scalar(per, -1.0));
  return mul_scalar(total, 0.5 / batch_size(e.mu));
}

Tensor symmetric_kl(const GaussianEmbedding& e, const GaussianEmbedding& ep) {
  check_pair("symmetric_kl", e.mu, ep.mu);
  check_pair("symmetric_kl", e.var, ep.var);
  check_positive("symmetric_kl", e.var);
  check_positive("symmetric_kl", ep.var);
  Tensor per = (e.var / ep.var + ep.var / e.var) +
               square(e.mu - ep.mu) * (reciprocal(e.var) + reciprocal(ep.var));
  return mul_scalar(sum(add_scalar(per, -2.0)), 0.5 / batch_size(e.mu));
}

Tensor variance_term(const Tensor& z, const Tensor& zp) {
  check_pair("variance_term", z, zp);
  check_min_batch("variance_term", z);
  const double n = batch_size(z);
  auto hinge = [&](const Tensor& x) {
    Tensor std_dev = sqrt(add_scalar(mul_scalar(var(x, {0}), n / (n - 1.0)), kVarianceEps));
    return mean(relu(add_scalar(neg(std_dev), kVarianceTarget)));
  };
  return mul_scalar(hinge(z) + hinge(zp), 0.5);
}

Tensor covariance_term(const Tensor& z, const Tensor& zp) {
  check_pair("covariance_term", z, zp);
  check_min_batch("covariance_term", z);
  const std::size_t n = z.dim(0), d = z.dim(1);
  Tensor off_diag = Tensor::full({d, d}, 1.0, z.dtype());
  for (std::size_t j = 0; j < d; ++j) off_diag.set(j * d + j, 0.0);
  auto c = [&](const Tensor& x) {
    Tensor centered = x - tile_rows(mean(x, {0}), n);
    Tensor cov = mul_scalar(matmul(transpose(centered), centered), 1.0 / static_cast<double>(n - 1));
    return mul_scalar(sum(square(cov) * off_diag), 1.0 / static_cast<double>(d));
  };
  return c(z) + c(zp);
}

LossResult total_loss(const GaussianEmbedding& e, const GaussianEmbedding& ep, const Tensor& masks,
                      std::span<const std::size_t> active, const LossCoefficients& c) {
  LossResult r;
  Tensor d_mg = masked_gaussian_distance(e, ep, masks, active, &r.breakdown.degenerate_terms);
  Tensor l_sp = sparsity(masks);
  Tensor l_kl = symmetric_kl(e, ep);
  Tensor l_var = variance_term(e.mu, ep.mu);
  Tensor l_cov = covariance_term(e.mu, ep.mu);
  r.total = d_mg * c.lambda + l_sp * c.lambda1 + l_kl * c.lambda2 + l_var * c.alpha +
            l_cov * c.beta;
  r.breakdown.d_mg = d_mg.item();
  r.breakdown.l_sp = l_sp.item();
  r.breakdown.l_kl = l_kl.item();
  r.breakdown.l_var = l_var.item();
  r.breakdown.l_cov = l_cov.item();
  r.breakdown.total = r.total.item();
  return r;
}

LossResult baseline_loss(const GaussianEmbedding& e, const GaussianEmbedding& ep,
                         const LossCoefficients& c) {
  LossResult r;
  Tensor dist = invariance_distance(e.mu, ep.mu);
  Tensor l_var = variance_term(e.mu, ep.mu);
  Tensor l_cov = covariance_term(e.mu, ep.mu);
  r.total = dist * c.lambda + l_var * c.alpha + l_cov * c.beta;
  r.breakdown.d_mg = dist.item();
  r.breakdown.l_var = l_var.item();
  r.breakdown.l_cov = l_cov.item();
  r.breakdown.total = r.total.item();
  return r;
}

}  // namespace mast
