#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mast/model.hpp"
#include "mast/tensor.hpp"

namespace mast {

/// Weights of the composite objective. defaults() derives lambda and lambda1
/// from the embedding width d and the mask count K.
struct LossCoefficients {
  double lambda = 0.0;   // masked Gaussian distance
  double lambda1 = 0.0;  // mask sparsity
  double lambda2 = 25.0; // symmetric KL
  double alpha = 25.0;   // variance hinge
  double beta = 1.0;     // covariance

  static LossCoefficients defaults(std::size_t d, std::size_t k);
  /// Mask-free reference weights: lambda = 25/d on the dimension-summed
  /// distance, i.e. 25 times the per-dimension mean squared error.
  static LossCoefficients baseline(std::size_t d);
  /// Multiplies lambda, lambda1 and lambda2 by s.
  LossCoefficients scaled(double s) const;
};

/// Scalar values of every term, detached. In baseline mode d_mg holds the
/// plain mean-embedding distance.
struct LossBreakdown {
  double d_mg = 0.0;
  double l_sp = 0.0;
  double l_kl = 0.0;
  double l_var = 0.0;
  double l_cov = 0.0;
  double total = 0.0;
  std::size_t degenerate_terms = 0;
};

struct LossResult {
  Tensor total;  // differentiable scalar
  LossBreakdown breakdown;
};

/// (1/n) sum_i ||z_i - z'_i||^2 over [n, d] batches.
Tensor invariance_distance(const Tensor& z, const Tensor& zp);

/// (1/n) sum_i sum_{k in active} ||(z_i - z'_i) * m_k||^2 with masks [d, K].
Tensor masked_distance(const Tensor& z, const Tensor& zp, const Tensor& masks,
                       std::span<const std::size_t> active);

/// L1 norm of the (nonnegative) mask matrix.
Tensor sparsity(const Tensor& masks);

/// Uncertainty-weighted masked distance:
/// (1/n) sum_i sum_k 2 ||mu~_ik - mu~'_ik||^2 / (tr S~_ik + tr S~'_ik).
/// Pairs whose denominator is below 1e-12 contribute 0 and are counted in
/// `degenerate` when given.
Tensor masked_gaussian_distance(const GaussianEmbedding& e, const GaussianEmbedding& ep,
                                const Tensor& masks, std::span<const std::size_t> active,
                                std::size_t* degenerate = nullptr);

/// KL(N || N') for diagonal Gaussians, averaged over the batch.
Tensor kl_divergence(const GaussianEmbedding& e, const GaussianEmbedding& ep);

/// Batch mean of KL(N||N') + KL(N'||N). The log terms cancel in the sum, so
/// the value is exactly symmetric.
Tensor symmetric_kl(const GaussianEmbedding& e, const GaussianEmbedding& ep);

inline constexpr double kVarianceTarget = 1.0;
inline constexpr double kVarianceEps = 1e-4;

/// Mean over both batches of (1/d) sum_j relu(gamma - sqrt(Var_j + eps)),
/// Var with the 1/(n-1) denominator.
Tensor variance_term(const Tensor& z, const Tensor& zp);

/// c(Z) + c(Z'), c(Z) = (1/d) sum of squared off-diagonal covariance entries.
Tensor covariance_term(const Tensor& z, const Tensor& zp);

/// Full objective with the mean embeddings feeding the variance and
/// covariance regularizers.
LossResult total_loss(const GaussianEmbedding& e, const GaussianEmbedding& ep, const Tensor& masks,
                      std::span<const std::size_t> active, const LossCoefficients& c);

/// Mask-free reference objective: lambda * D(mu, mu') + alpha * var + beta * cov.
LossResult baseline_loss(const GaussianEmbedding& e, const GaussianEmbedding& ep,
                         const LossCoefficients& c);

}  // namespace mast
