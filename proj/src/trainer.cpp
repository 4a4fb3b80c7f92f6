#include "mast/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <thread>

#include "mast/data.hpp"

namespace mast {

namespace {

// Keys separating the independent random streams of a run.
constexpr std::uint64_t kShuffleStream = 11;
constexpr std::uint64_t kPlanStream = 12;
constexpr std::uint64_t kViewStream = 13;

template <class F>
void parallel_for(std::size_t n, std::size_t threads, const F& body) {
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += threads) body(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::vector<Tensor> zero_momentum(Model& model) {
  std::vector<Tensor> out;
  for (const auto& p : model.parameters()) out.push_back(Tensor::zeros(p.tensor->shape(), p.tensor->dtype()));
  return out;
}

std::string epoch_checkpoint_name(std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "epoch_%03zu.ckpt", epoch);
  return buf;
}

}  // namespace

std::size_t k_effective(std::size_t epoch, std::size_t total_epochs, std::size_t k_max) {
  if (k_max == 0) throw ContractError("k_effective: k_max must be positive");
  const std::size_t half = total_epochs / 2;
  if (epoch < half) return 1;
  if (total_epochs <= half + 1) return k_max;
  const double progress =
      static_cast<double>(epoch - half) / static_cast<double>(total_epochs - half - 1);
  const double k = std::round(1.0 + static_cast<double>(k_max - 1) * progress);
  return static_cast<std::size_t>(std::clamp(k, 1.0, static_cast<double>(k_max)));
}

double lr_at(std::size_t step, std::size_t total_steps, double base_lr, bool warmup) {
  if (total_steps == 0) return base_lr;
  step = std::min(step, total_steps);
  double lr = base_lr * 0.5 *
              (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                              static_cast<double>(total_steps)));
  if (warmup) {
    const auto warm = static_cast<std::size_t>(std::ceil(0.02 * static_cast<double>(total_steps)));
    if (step < warm) lr *= static_cast<double>(step + 1) / static_cast<double>(warm);
  }
  return lr;
}

std::string metrics_line(const StepRecord& r) {
  nlohmann::json j;
  j["step"] = r.step;
  j["epoch"] = r.epoch;
  j["k_effective"] = r.k_effective;
  j["lr"] = r.lr;
  j["active"] = r.active;
  j["d_mg"] = r.loss.d_mg;
  j["l_sp"] = r.loss.l_sp;
  j["l_kl"] = r.loss.l_kl;
  j["l_var"] = r.loss.l_var;
  j["l_cov"] = r.loss.l_cov;
  j["total"] = r.loss.total;
  j["degenerate_terms"] = r.loss.degenerate_terms;
  return j.dump();
}

Trainer::Trainer(const TrainConfig& cfg, std::vector<Image> images)
    : cfg_(cfg),
      specs_(cfg.augmentation_specs()),
      coeffs_(cfg.loss_coefficients()),
      images_(std::move(images)),
      threads_(effective_threads(cfg.threads)) {
  cfg_.validate();
  if (images_.size() < 2) throw ContractError("trainer needs at least 2 images");
  ScopedDType scope(cfg_.dtype);
  model_ = Model(cfg_.model_config(), cfg_.seed);
  momentum_ = zero_momentum(model_);
}

Trainer::Trainer(Checkpoint ckpt, std::vector<Image> images)
    : cfg_(ckpt.config),
      specs_(ckpt.config.augmentation_specs()),
      coeffs_(ckpt.config.loss_coefficients()),
      model_(std::move(ckpt.model)),
      momentum_(std::move(ckpt.momentum)),
      images_(std::move(images)),
      epoch_(ckpt.epoch),
      step_(ckpt.step),
      threads_(effective_threads(ckpt.config.threads)) {
  if (images_.size() < 2) throw ContractError("trainer needs at least 2 images");
  if (momentum_.empty()) momentum_ = zero_momentum(model_);
}

std::size_t Trainer::batch_size() const { return std::min(cfg_.schedule.batch_size, images_.size()); }

std::size_t Trainer::steps_per_epoch() const { return images_.size() / batch_size(); }

StepRecord Trainer::train_step(const std::vector<Image>& batch) {
  if (batch.size() < 2) throw ContractError("train_step: batch needs at least 2 images");
  ScopedDType scope(cfg_.dtype);
  Graph::current().reset();

  StepRecord rec;
  rec.step = step_;
  rec.epoch = epoch_;
  rec.k_effective = k_effective(epoch_, cfg_.schedule.epochs, cfg_.k_max());
  rec.lr = lr_at(step_, total_steps(), cfg_.schedule.base_lr, cfg_.schedule.warmup);

  Rng plan_rng(split_seed(cfg_.seed, {kPlanStream, step_}));
  const CompositionPlan plan = sample_composition(plan_rng, specs_, rec.k_effective);
  rec.active = plan.selected;

  std::vector<Image> v(batch.size()), vp(batch.size());
  parallel_for(batch.size(), threads_, [&](std::size_t i) {
    Rng rng(split_seed(cfg_.seed, {kViewStream, step_, i}));
    const CompositionPlan own = draw_parameters(rng, specs_, plan.selected);
    std::tie(v[i], vp[i]) = make_views(batch[i], own, specs_);
  });

  const ModelForward f = model_.forward(images_to_tensor(v));
  const ModelForward fp = model_.forward(images_to_tensor(vp));
  LossResult loss = cfg_.baseline
                        ? baseline_loss(f.emb, fp.emb, coeffs_)
                        : total_loss(f.emb, fp.emb, model_.bank.masks(), plan.selected, coeffs_);
  rec.loss = loss.breakdown;
  if (!std::isfinite(loss.breakdown.total)) {
    Graph::current().reset();
    throw TrainingError("non-finite loss at step " + std::to_string(step_) + ": " + metrics_line(rec));
  }
  backward(loss.total);
  update(rec.lr);
  ++step_;
  return rec;
}

void Trainer::update(double lr) {
  auto params = model_.parameters();
  const double mom = cfg_.schedule.momentum;
  const double wd = cfg_.schedule.weight_decay;
  const auto is_mask = [](const NamedParameter& p) { return p.name == kMaskParameter; };

  double clip = 1.0;
  if (cfg_.schedule.grad_clip > 0) {
    double sq = 0.0;
    for (const auto& p : params) {
      if (is_mask(p) || !p.tensor->has_grad()) continue;
      dispatch(p.tensor->dtype(), [&]<class T>() {
        for (T g : p.tensor->grad_data<T>()) sq += static_cast<double>(g) * static_cast<double>(g);
      });
    }
    const double norm = std::sqrt(sq);
    if (norm > cfg_.schedule.grad_clip) clip = cfg_.schedule.grad_clip / norm;
  }

  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i].tensor;
    const bool mask = is_mask(params[i]);
    const double decay = params[i].decay ? wd : 0.0;
    const double step = mask ? lr * cfg_.schedule.mask_lr_scale : lr;
    const double scale = mask ? 1.0 : clip;
    dispatch(p.dtype(), [&]<class T>() {
      auto w = p.mutable_data<T>();
      auto buf = momentum_[i].mutable_data<T>();
      const bool has = p.has_grad();
      std::span<T> g = has ? p.grad_data<T>() : std::span<T>();
      for (std::size_t j = 0; j < w.size(); ++j) {
        const T grad = has ? static_cast<T>(scale) * g[j] : T(0);
        buf[j] = static_cast<T>(mom) * buf[j] + grad;
        w[j] -= static_cast<T>(step) * (buf[j] + static_cast<T>(decay) * w[j]);
      }
    });
    p.zero_grad();
  }
  model_.projector.clamp_exponents();
}

std::vector<StepRecord> Trainer::run_epoch(const std::function<void(const StepRecord&)>& on_step) {
  if (finished()) throw ContractError("run_epoch: training already finished");
  std::vector<std::size_t> order(images_.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(split_seed(cfg_.seed, {kShuffleStream, epoch_}));
  std::shuffle(order.begin(), order.end(), rng);

  const std::size_t bs = batch_size();
  std::vector<StepRecord> out;
  for (std::size_t b = step_ - epoch_ * steps_per_epoch(); b < steps_per_epoch(); ++b) {
    std::vector<Image> batch;
    batch.reserve(bs);
    for (std::size_t i = b * bs; i < (b + 1) * bs; ++i) batch.push_back(images_[order[i]]);
    out.push_back(train_step(batch));
    if (on_step) on_step(out.back());
  }
  ++epoch_;
  return out;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.config = cfg_;
  c.model = model_;
  // Deep copies so later steps do not alter a held checkpoint.
  for (auto& p : c.model.parameters()) {
    *p.tensor = p.tensor->detach();
    p.tensor->set_requires_grad(true);
  }
  for (const auto& m : momentum_) c.momentum.push_back(m.detach());
  c.epoch = epoch_;
  c.step = step_;
  return c;
}

PretrainOutputs pretrain(const TrainConfig& cfg, const std::optional<std::filesystem::path>& resume,
                         const std::function<void(const StepRecord&)>& on_step) {
  if (cfg.dataset.empty()) throw ConfigError("config field 'dataset': required for pretraining");
  Dataset data = load(cfg.dataset);
  std::unique_ptr<Trainer> trainer;
  if (resume) {
    Checkpoint ckpt = load_checkpoint(*resume);
    ckpt.config.out_dir = cfg.out_dir;
    trainer = std::make_unique<Trainer>(std::move(ckpt), data.images());
  } else {
    trainer = std::make_unique<Trainer>(cfg, data.images());
  }

  PretrainOutputs out;
  std::filesystem::create_directories(cfg.out_dir);
  out.metrics = cfg.out_dir / "metrics.ndjson";
  std::ofstream log(out.metrics, resume ? std::ios::app : std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write metrics log " + out.metrics.string());

  while (!trainer->finished()) {
    trainer->run_epoch([&](const StepRecord& r) {
      log << metrics_line(r) << '\n';
      if (on_step) on_step(r);
    });
    log.flush();
    const std::size_t done = trainer->epoch();
    if (cfg.ckpt_every > 0 && done % cfg.ckpt_every == 0 && !trainer->finished()) {
      save_checkpoint(trainer->checkpoint(), cfg.out_dir / epoch_checkpoint_name(done));
    }
  }
  if (!log) throw std::runtime_error("failed writing metrics log " + out.metrics.string());
  out.checkpoint = cfg.out_dir / "final.ckpt";
  save_checkpoint(trainer->checkpoint(), out.checkpoint);
  return out;
}

TrainConfig without_augmentation(const TrainConfig& cfg, AugOp op) {
  auto it = std::find(cfg.augmentations.begin(), cfg.augmentations.end(), op);
  if (it == cfg.augmentations.end()) {
    throw ContractError("leave_one_out: " + std::string(aug_name(op)) +
                        " is not in the configured augmentation set");
  }
  if (cfg.augmentations.size() == 1) {
    throw ContractError("leave_one_out: cannot remove the only augmentation");
  }
  TrainConfig out = cfg;
  out.augmentations.erase(out.augmentations.begin() + (it - cfg.augmentations.begin()));
  out.augmentation_name = "custom";
  return out;
}

PretrainOutputs leave_one_out(const TrainConfig& cfg, AugOp op) {
  TrainConfig reduced = without_augmentation(cfg, op);
  reduced.out_dir = cfg.out_dir / ("loo_" + std::string(aug_name(op)));
  return pretrain(reduced);
}

}  // namespace mast
