#include "mast/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "mast/errors.hpp"
#include "mast/rng.hpp"

namespace mast {

namespace {

constexpr std::size_t kChunk = 256;
constexpr double kNormFloor = 1e-12;
const double kNaN = std::numeric_limits<double>::quiet_NaN();

Matrix to_matrix(const Tensor& t) {
  Matrix m(t.dim(0), t.dim(1));
  m.data = t.to_vector();
  return m;
}

void append_rows(Matrix& dst, const Matrix& src) {
  if (dst.rows == 0) dst.cols = src.cols;
  dst.data.insert(dst.data.end(), src.data.begin(), src.data.end());
  dst.rows += src.rows;
}

template <class F>
void for_chunks(const std::vector<Image>& images, const F& body) {
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    const std::size_t end = std::min(images.size(), start + kChunk);
    body(std::vector<Image>(images.begin() + static_cast<std::ptrdiff_t>(start),
                            images.begin() + static_cast<std::ptrdiff_t>(end)));
  }
}

std::vector<double> softmax(std::vector<double> z) {
  const double hi = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double& v : z) sum += (v = std::exp(v - hi));
  for (double& v : z) v /= sum;
  return z;
}

double dot(std::span<const double> a, std::span<const double> b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

Matrix select_rows(const Matrix& x, const std::vector<std::size_t>& rows) {
  Matrix out(rows.size(), x.cols);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy(x.row(rows[r]).begin(), x.row(rows[r]).end(), out.data.begin() + r * x.cols);
  }
  return out;
}

std::vector<std::size_t> select(std::span<const std::size_t> v, const std::vector<std::size_t>& idx) {
  std::vector<std::size_t> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(v[i]);
  return out;
}

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

Split holdout_split(std::size_t n, std::size_t every, std::size_t group = 1) {
  if (every < 2) throw ContractError("probe: holdout_every must be at least 2");
  Split s;
  for (std::size_t i = 0; i < n; ++i) ((i / group) % every == every - 1 ? s.test : s.train).push_back(i);
  if (s.train.empty() || s.test.empty()) throw ContractError("probe: too few samples for a train/test split");
  return s;
}

std::size_t class_count(std::span<const std::size_t> labels) {
  return labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
}

ProbeResult fit_and_evaluate(const Matrix& x, std::span<const std::size_t> labels, std::size_t classes,
                             const ProbeOptions& opt, const Split& split) {
  const Matrix train_x = select_rows(x, split.train);
  const auto train_y = select(labels, split.train);
  const LinearClassifier clf = fit_softmax(train_x, train_y, classes, opt);
  ProbeResult r = evaluate_classifier(clf, select_rows(x, split.test), select(labels, split.test));
  r.train_size = split.train.size();
  return r;
}

double far_end(const AugSpec& spec) {
  return std::abs(spec.range.high - spec.identity) >= std::abs(spec.range.low - spec.identity)
             ? spec.range.high
             : spec.range.low;
}

double at_strength(const AugSpec& spec, double t, double sign = 1.0) {
  const double far = far_end(spec);
  double m = spec.identity + t * (far - spec.identity);
  // Ranges symmetric about the identity (shear, translate, rotate) may go either way.
  if (spec.range.low < spec.identity && spec.range.high > spec.identity) m = spec.identity + sign * (m - spec.identity);
  if (spec.integral) m = std::round(m);
  return std::clamp(m, spec.valid.low, spec.valid.high);
}

double cosine(std::span<const double> a, std::span<const double> b, bool& degenerate) {
  const double na = std::sqrt(dot(a, a)), nb = std::sqrt(dot(b, b));
  degenerate = na < kNormFloor || nb < kNormFloor;
  return degenerate ? 0.0 : dot(a, b) / (na * nb);
}

std::vector<double> masked(std::span<const double> v, const Matrix& masks, std::size_t k) {
  std::vector<double> out(v.size());
  for (std::size_t j = 0; j < v.size(); ++j) out[j] = v[j] * masks(j, k);
  return out;
}

nlohmann::json matrix_json(const Matrix& m) {
  auto rows = nlohmann::json::array();
  for (std::size_t r = 0; r < m.rows; ++r) rows.push_back(std::vector<double>(m.row(r).begin(), m.row(r).end()));
  return rows;
}

}  // namespace

Matrix representations(const Model& model, const std::vector<Image>& images) {
  ScopedDType scope(model.dtype());
  NoGradGuard no_grad;
  Matrix out;
  for_chunks(images, [&](const std::vector<Image>& chunk) {
    append_rows(out, to_matrix(model.represent(images_to_tensor(chunk))));
  });
  return out;
}

EmbeddingBatch embeddings(const Model& model, const std::vector<Image>& images) {
  ScopedDType scope(model.dtype());
  NoGradGuard no_grad;
  EmbeddingBatch out;
  for_chunks(images, [&](const std::vector<Image>& chunk) {
    const ModelForward f = model.forward(images_to_tensor(chunk));
    append_rows(out.mu, to_matrix(f.emb.mu));
    append_rows(out.var, to_matrix(f.emb.var));
  });
  return out;
}

std::vector<double> LinearClassifier::logits(std::span<const double> x) const {
  if (x.size() != mean.size()) throw DimensionError("classifier: feature width mismatch");
  std::vector<double> z(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    double s = bias[c];
    for (std::size_t j = 0; j < x.size(); ++j) s += weight(c, j) * (x[j] - mean[j]) * scale[j];
    z[c] = s;
  }
  return z;
}

std::size_t LinearClassifier::predict(std::span<const double> x) const {
  const auto z = logits(x);
  return static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
}

LinearClassifier fit_softmax(const Matrix& x, std::span<const std::size_t> labels, std::size_t classes,
                             const ProbeOptions& opt) {
  if (labels.size() != x.rows) {
    throw ContractError("probe: " + std::to_string(labels.size()) + " labels for " +
                        std::to_string(x.rows) + " samples");
  }
  if (x.rows == 0) throw ContractError("probe: no training samples");
  if (classes == 0 || class_count(labels) > classes) throw ContractError("probe: label out of range");
  const std::size_t n = x.rows, d = x.cols;

  LinearClassifier clf;
  clf.classes = classes;
  clf.mean.assign(d, 0.0);
  clf.scale.assign(d, 1.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) clf.mean[j] += x(i, j) / static_cast<double>(n);
  for (std::size_t j = 0; j < d; ++j) {
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) ss += (x(i, j) - clf.mean[j]) * (x(i, j) - clf.mean[j]);
    const double sd = std::sqrt(ss / static_cast<double>(n));
    clf.scale[j] = sd > 1e-12 ? 1.0 / sd : 1.0;
  }
  Matrix z(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) z(i, j) = (x(i, j) - clf.mean[j]) * clf.scale[j];

  clf.weight = Matrix(classes, d);
  clf.bias.assign(classes, 0.0);
  Matrix vw(classes, d);
  std::vector<double> vb(classes, 0.0);
  const std::size_t bs = std::max<std::size_t>(1, std::min(opt.batch_size, n));
  const std::size_t steps_per_epoch = (n + bs - 1) / bs;
  const std::size_t total = steps_per_epoch * opt.epochs;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  std::size_t step = 0;
  Matrix gw(classes, d);
  std::vector<double> gb(classes);
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    Rng rng(split_seed(opt.seed, {epoch}));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += bs, ++step) {
      const std::size_t end = std::min(n, start + bs);
      std::fill(gw.data.begin(), gw.data.end(), 0.0);
      std::fill(gb.begin(), gb.end(), 0.0);
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t i = order[b];
        std::vector<double> logit(classes);
        for (std::size_t c = 0; c < classes; ++c) logit[c] = clf.bias[c] + dot(clf.weight.row(c), z.row(i));
        auto p = softmax(std::move(logit));
        p[labels[i]] -= 1.0;
        for (std::size_t c = 0; c < classes; ++c) {
          gb[c] += p[c];
          for (std::size_t j = 0; j < d; ++j) gw(c, j) += p[c] * z(i, j);
        }
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      const double lr = opt.lr * 0.5 *
                        (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
      for (std::size_t c = 0; c < classes; ++c) {
        for (std::size_t j = 0; j < d; ++j) {
          const double g = gw(c, j) * inv + opt.weight_decay * clf.weight(c, j);
          vw(c, j) = opt.momentum * vw(c, j) + g;
          clf.weight(c, j) -= lr * vw(c, j);
        }
        vb[c] = opt.momentum * vb[c] + gb[c] * inv;
        clf.bias[c] -= lr * vb[c];
      }
    }
  }
  return clf;
}

ProbeResult evaluate_classifier(const LinearClassifier& clf, const Matrix& x,
                                std::span<const std::size_t> labels) {
  if (labels.size() != x.rows) {
    throw ContractError("probe: " + std::to_string(labels.size()) + " labels for " +
                        std::to_string(x.rows) + " samples");
  }
  ProbeResult r;
  r.test_size = x.rows;
  r.confusion.assign(clf.classes, std::vector<std::size_t>(clf.classes, 0));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < x.rows; ++i) {
    if (labels[i] >= clf.classes) throw ContractError("probe: label out of range");
    const std::size_t pred = clf.predict(x.row(i));
    ++r.confusion[labels[i]][pred];
    hits += pred == labels[i];
  }
  r.top1 = x.rows ? static_cast<double>(hits) / static_cast<double>(x.rows) : kNaN;
  for (std::size_t c = 0; c < clf.classes; ++c) {
    const auto& row = r.confusion[c];
    const std::size_t total = std::accumulate(row.begin(), row.end(), std::size_t{0});
    r.per_class.push_back(total ? static_cast<double>(row[c]) / static_cast<double>(total) : kNaN);
  }
  return r;
}

ProbeResult probe_features(const Matrix& x, std::span<const std::size_t> labels, std::size_t classes,
                           const ProbeOptions& opt) {
  if (labels.size() != x.rows) {
    throw ContractError("probe: " + std::to_string(labels.size()) + " labels for " +
                        std::to_string(x.rows) + " samples");
  }
  return fit_and_evaluate(x, labels, classes, opt, holdout_split(x.rows, opt.holdout_every));
}

ProbeResult linear_probe(const Model& model, const std::vector<Image>& images,
                         std::span<const std::size_t> labels, const ProbeOptions& opt) {
  if (labels.size() != images.size()) {
    throw ContractError("linear_probe: " + std::to_string(labels.size()) + " labels for " +
                        std::to_string(images.size()) + " images");
  }
  return probe_features(representations(model, images), labels, class_count(labels), opt);
}

ProbeResult rotation_probe(const Model& model, const std::vector<Image>& images, const ProbeOptions& opt,
                           std::vector<int> quarter_turns) {
  if (quarter_turns.empty()) throw ContractError("rotation_probe: no rotations requested");
  std::vector<Image> rotated;
  std::vector<std::size_t> labels;
  rotated.reserve(images.size() * quarter_turns.size());
  for (const Image& img : images) {
    for (std::size_t t = 0; t < quarter_turns.size(); ++t) {
      rotated.push_back(rotate_quarter(img, quarter_turns[t]));
      labels.push_back(t);
    }
  }
  const Split split = holdout_split(rotated.size(), opt.holdout_every, quarter_turns.size());
  return fit_and_evaluate(representations(model, rotated), labels, quarter_turns.size(), opt, split);
}

std::vector<double> magnitude_grid(const AugSpec& spec, std::size_t points) {
  if (!spec.continuous) {
    throw ContractError("magnitude_grid: " + std::string(aug_name(spec.op)) + " has no magnitude axis");
  }
  if (points < 2) throw ContractError("magnitude_grid: need at least 2 points");
  std::vector<double> grid;
  for (std::size_t i = 0; i < points; ++i) {
    grid.push_back(at_strength(spec, static_cast<double>(i) / static_cast<double>(points - 1)));
  }
  return grid;
}

InvarianceCurve invariance_metric(const Model& model, const AugSpec& spec, std::span<const double> magnitudes,
                                  const std::vector<Image>& samples, std::uint64_t seed) {
  if (!spec.continuous) {
    throw ContractError("invariance_metric: " + std::string(aug_name(spec.op)) + " has no magnitude axis");
  }
  if (samples.empty()) throw ContractError("invariance_metric: no samples");
  const std::size_t k_count = model.bank.count();
  Matrix masks;
  if (k_count > 0) masks = to_matrix(model.bank.masks());

  InvarianceCurve curve;
  curve.op = spec.op;
  curve.magnitudes.assign(magnitudes.begin(), magnitudes.end());
  curve.subspace.assign(k_count, {});
  curve.skipped.assign(k_count, 0);
  const Matrix base = embeddings(model, samples).mu;

  for (double m : magnitudes) {
    std::vector<Image> aug;
    aug.reserve(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
      aug.push_back(apply(spec, AugParams{true, m, split_seed(seed, {i})}, samples[i]));
    }
    const Matrix mu = embeddings(model, aug).mu;

    double total = 0.0;
    std::size_t used = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      bool degenerate = false;
      const double c = cosine(mu.row(i), base.row(i), degenerate);
      if (!degenerate) total += c, ++used;
    }
    curve.unmasked.push_back(used ? total / static_cast<double>(used) : kNaN);

    for (std::size_t k = 0; k < k_count; ++k) {
      total = 0.0;
      used = 0;
      for (std::size_t i = 0; i < samples.size(); ++i) {
        bool degenerate = false;
        const double c = cosine(masked(mu.row(i), masks, k), masked(base.row(i), masks, k), degenerate);
        if (degenerate) {
          ++curve.skipped[k];
        } else {
          total += c, ++used;
        }
      }
      curve.subspace[k].push_back(used ? total / static_cast<double>(used) : kNaN);
    }
  }
  return curve;
}

MaskCorrelation mask_correlation(const Tensor& masks) {
  if (masks.rank() != 2) throw DimensionError("mask_correlation: masks must be d x K");
  const Matrix m = to_matrix(masks);
  const std::size_t k = m.cols;
  std::vector<double> norm(k, 0.0);
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t j = 0; j < m.rows; ++j) norm[c] += m(j, c) * m(j, c);
    norm[c] = std::sqrt(norm[c]);
  }
  MaskCorrelation out;
  out.c = Matrix(k, k);
  for (std::size_t a = 0; a < k; ++a) {
    if (norm[a] == 0.0) out.zero_columns.push_back(a);
    for (std::size_t b = a; b < k; ++b) {
      double v = 0.0;
      if (norm[a] > 0.0 && norm[b] > 0.0) {
        if (a == b) {
          v = 1.0;
        } else {
          for (std::size_t j = 0; j < m.rows; ++j) v += m(j, a) * m(j, b);
          v /= norm[a] * norm[b];
        }
      }
      out.c(a, b) = out.c(b, a) = v;
    }
  }
  return out;
}

UncertaintyScores rescale_traces(std::vector<double> traces) {
  if (traces.size() < 2) throw ContractError("uncertainty_score: need at least 2 images");
  UncertaintyScores out;
  const auto [lo, hi] = std::minmax_element(traces.begin(), traces.end());
  const double low = *lo, span = *hi - *lo;
  out.degenerate = !(span > 0.0);
  for (double t : traces) out.scores.push_back(out.degenerate ? 0.5 : (t - low) / span);
  out.traces = std::move(traces);
  return out;
}

UncertaintyScores uncertainty_score(const Model& model, const std::vector<Image>& images) {
  if (images.size() < 2) throw ContractError("uncertainty_score: need at least 2 images");
  const Matrix var = embeddings(model, images).var;
  std::vector<double> traces;
  for (std::size_t i = 0; i < var.rows; ++i) {
    traces.push_back(std::accumulate(var.row(i).begin(), var.row(i).end(), 0.0));
  }
  return rescale_traces(std::move(traces));
}

double permutation_p_value(std::span<const double> a, std::span<const double> b, std::uint64_t seed,
                           std::size_t permutations) {
  if (a.empty() || b.empty()) throw ContractError("permutation test: empty group");
  std::vector<double> pooled(a.begin(), a.end());
  pooled.insert(pooled.end(), b.begin(), b.end());
  const auto mean_diff = [&](const std::vector<double>& v) {
    const double sa = std::accumulate(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(a.size()), 0.0);
    const double sb = std::accumulate(v.begin() + static_cast<std::ptrdiff_t>(a.size()), v.end(), 0.0);
    return sa / static_cast<double>(a.size()) - sb / static_cast<double>(b.size());
  };
  const double observed = mean_diff(pooled);
  Rng rng(seed);
  std::size_t extreme = 0;
  for (std::size_t p = 0; p < permutations; ++p) {
    std::shuffle(pooled.begin(), pooled.end(), rng);
    extreme += mean_diff(pooled) >= observed - 1e-12;
  }
  return static_cast<double>(extreme + 1) / static_cast<double>(permutations + 1);
}

UncertaintyExperiment uncertainty_vs_strength(const Model& model, std::span<const AugSpec> specs,
                                              const std::vector<Image>& samples, std::uint64_t seed,
                                              std::size_t permutations) {
  const std::size_t n = samples.size();
  if (n < 8) throw ContractError("uncertainty_vs_strength: need at least 8 samples");
  UncertaintyExperiment out;
  // Evenly spaced strengths in a seeded order so the quartiles are balanced.
  out.strength.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.strength[i] = (static_cast<double>(i) + 0.5) / static_cast<double>(n);
  Rng order_rng(split_seed(seed, {0}));
  std::shuffle(out.strength.begin(), out.strength.end(), order_rng);

  std::vector<Image> views;
  views.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Image img = samples[i];
    Rng rng(split_seed(seed, {1, i}));
    for (const AugSpec& spec : specs) {
      if (!spec.continuous) continue;
      const double sign = uniform01(rng) < 0.5 ? -1.0 : 1.0;
      img = apply(spec, AugParams{true, at_strength(spec, out.strength[i], sign), rng()}, img);
    }
    views.push_back(std::move(img));
  }
  const UncertaintyScores scores = uncertainty_score(model, views);
  out.scores = scores.scores;
  out.degenerate = scores.degenerate;

  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return out.strength[a] < out.strength[b]; });
  const std::size_t q = n / 4;
  std::vector<double> weak, strong;
  for (std::size_t i = 0; i < q; ++i) {
    weak.push_back(out.scores[idx[i]]);
    strong.push_back(out.scores[idx[n - 1 - i]]);
  }
  out.weak_mean = std::accumulate(weak.begin(), weak.end(), 0.0) / static_cast<double>(q);
  out.strong_mean = std::accumulate(strong.begin(), strong.end(), 0.0) / static_cast<double>(q);
  out.p_value = permutation_p_value(strong, weak, split_seed(seed, {2}), permutations);
  return out;
}

SubspaceClassPrediction subspace_class_prediction(const Model& model, const std::vector<Image>& images,
                                                  std::span<const std::size_t> labels, const ProbeOptions& opt) {
  if (labels.size() != images.size()) {
    throw ContractError("subspace_class_prediction: " + std::to_string(labels.size()) + " labels for " +
                        std::to_string(images.size()) + " images");
  }
  const std::size_t classes = class_count(labels);
  const Matrix mu = embeddings(model, images).mu;
  const Split split = holdout_split(mu.rows, opt.holdout_every);
  const LinearClassifier clf = fit_softmax(select_rows(mu, split.train), select(labels, split.train), classes, opt);

  const std::size_t k_count = model.bank.count();
  SubspaceClassPrediction out;
  out.values = Matrix(k_count, classes, 0.0);
  if (k_count == 0) {
    out.warnings.push_back("model has no masks; nothing to attribute");
    return out;
  }
  const Matrix masks = to_matrix(model.bank.masks());
  std::vector<std::size_t> count(classes, 0);
  for (std::size_t i : split.test) {
    const std::size_t y = labels[i];
    if (clf.predict(mu.row(i)) != y) continue;
    ++out.correct;
    ++count[y];
    for (std::size_t k = 0; k < k_count; ++k) {
      double v = 0.0;
      for (std::size_t j = 0; j < mu.cols; ++j) v += clf.weight(y, j) * clf.scale[j] * mu(i, j) * masks(j, k);
      out.values(k, y) += v;
    }
  }
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t k = 0; k < k_count; ++k) out.values(k, c) = count[c] ? out.values(k, c) / static_cast<double>(count[c]) : kNaN;
  if (out.correct == 0) {
    out.values = Matrix();
    out.warnings.push_back("no held-out sample was classified correctly");
  }
  return out;
}

nlohmann::json to_json(const ProbeResult& r) {
  return {{"top1", r.top1}, {"per_class", r.per_class}, {"confusion", r.confusion},
          {"train_size", r.train_size}, {"test_size", r.test_size}};
}

nlohmann::json to_json(const InvarianceCurve& c) {
  return {{"op", std::string(aug_name(c.op))}, {"magnitudes", c.magnitudes}, {"subspace", c.subspace},
          {"unmasked", c.unmasked}, {"skipped", c.skipped}};
}

nlohmann::json to_json(const MaskCorrelation& m) {
  return {{"correlation", matrix_json(m.c)}, {"zero_columns", m.zero_columns}};
}

nlohmann::json to_json(const UncertaintyExperiment& e) {
  return {{"weak_mean", e.weak_mean}, {"strong_mean", e.strong_mean}, {"p_value", e.p_value},
          {"degenerate", e.degenerate}, {"samples", e.scores.size()}};
}

nlohmann::json to_json(const SubspaceClassPrediction& s) {
  return {{"values", matrix_json(s.values)}, {"correct", s.correct}, {"warnings", s.warnings}};
}

}  // namespace mast
