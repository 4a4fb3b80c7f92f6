#pragma once

// Test-only loss oracles written straight from the per-element definitions,
// shared by the unit tests and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "mast/loss.hpp"

namespace mast::testing {

using Rows = std::vector<std::vector<double>>;

inline Rows random_matrix(std::size_t r, std::size_t c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Rows m(r, std::vector<double>(c));
  for (auto& row : m)
    for (double& v : row) v = u(rng);
  return m;
}

inline Tensor to_tensor(const Rows& m) {
  std::vector<double> flat;
  for (const auto& row : m) flat.insert(flat.end(), row.begin(), row.end());
  return Tensor::from({m.size(), m[0].size()}, flat);
}

inline std::vector<std::size_t> all_columns(std::size_t k) {
  std::vector<std::size_t> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = i;
  return out;
}

inline double naive_masked_distance(const Rows& z, const Rows& zp, const Rows& m,
                             const std::vector<std::size_t>& active) {
  double total = 0;
  for (std::size_t i = 0; i < z.size(); ++i)
    for (std::size_t k : active)
      for (std::size_t j = 0; j < z[i].size(); ++j) {
        const double diff = z[i][j] * m[j][k] - zp[i][j] * m[j][k];
        total += diff * diff;
      }
  return total / static_cast<double>(z.size());
}

inline double naive_gaussian_distance(const Rows& mu, const Rows& mup, const Rows& var,
                               const Rows& varp, const Rows& m,
                               const std::vector<std::size_t>& active) {
  double total = 0;
  for (std::size_t i = 0; i < mu.size(); ++i)
    for (std::size_t k : active) {
      double dist = 0, tr = 0, trp = 0;
      for (std::size_t j = 0; j < mu[i].size(); ++j) {
        const double diff = mu[i][j] * m[j][k] - mup[i][j] * m[j][k];
        dist += diff * diff;
        tr += var[i][j] * m[j][k];
        trp += varp[i][j] * m[j][k];
      }
      if (tr + trp >= 1e-12) total += 2 * dist / (tr + trp);
    }
  return total / static_cast<double>(mu.size());
}

inline double naive_cov_part(const Rows& z) {
  const std::size_t n = z.size(), d = z[0].size();
  std::vector<double> means(d, 0.0);
  for (const auto& row : z)
    for (std::size_t j = 0; j < d; ++j) means[j] += row[j] / static_cast<double>(n);
  double total = 0;
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = 0; b < d; ++b) {
      if (a == b) continue;
      double cov = 0;
      for (std::size_t i = 0; i < n; ++i) cov += (z[i][a] - means[a]) * (z[i][b] - means[b]);
      cov /= static_cast<double>(n - 1);
      total += cov * cov;
    }
  return total / static_cast<double>(d);
}

inline double naive_var_part(const Rows& z) {
  const std::size_t n = z.size(), d = z[0].size();
  double total = 0;
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0, ss = 0;
    for (const auto& row : z) mean += row[j] / static_cast<double>(n);
    for (const auto& row : z) ss += (row[j] - mean) * (row[j] - mean);
    total += std::max(0.0, 1.0 - std::sqrt(ss / static_cast<double>(n - 1) + 1e-4));
  }
  return total / static_cast<double>(d);
}

// KL(N(m1,v1) || N(m2,v2)) by composite Simpson quadrature of p ln(p/q).
inline double quadrature_kl(double m1, double v1, double m2, double v2) {
  const double s1 = std::sqrt(v1);
  const double lo = m1 - 14 * s1, hi = m1 + 14 * s1;
  const std::size_t steps = 1000000;
  const double h = (hi - lo) / static_cast<double>(steps);
  auto f = [&](double x) {
    const double lp = -0.5 * std::log(2 * std::numbers::pi * v1) - (x - m1) * (x - m1) / (2 * v1);
    const double lq = -0.5 * std::log(2 * std::numbers::pi * v2) - (x - m2) * (x - m2) / (2 * v2);
    return std::exp(lp) * (lp - lq);
  };
  double acc = f(lo) + f(hi);
  for (std::size_t i = 1; i < steps; ++i) acc += f(lo + h * static_cast<double>(i)) * (i % 2 ? 4 : 2);
  return acc * h / 3;
}

inline GaussianEmbedding gaussian(const Rows& mu, const Rows& var) {
  return {to_tensor(mu), to_tensor(var)};
}

// Cosine similarity of every pair of mask columns; zero columns give 0.
inline Rows naive_mask_correlation(const Rows& m) {
  const std::size_t d = m.size(), k = m[0].size();
  Rows c(k, std::vector<double>(k, 0.0));
  for (std::size_t a = 0; a < k; ++a)
    for (std::size_t b = 0; b < k; ++b) {
      double ab = 0, aa = 0, bb = 0;
      for (std::size_t j = 0; j < d; ++j) {
        ab += m[j][a] * m[j][b];
        aa += m[j][a] * m[j][a];
        bb += m[j][b] * m[j][b];
      }
      c[a][b] = aa > 0 && bb > 0 ? ab / std::sqrt(aa * bb) : 0.0;
    }
  return c;
}

}  // namespace mast::testing
