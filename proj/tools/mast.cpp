#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mast/checkpoint.hpp"
#include "mast/config.hpp"
#include "mast/data.hpp"
#include "mast/errors.hpp"
#include "mast/eval.hpp"
#include "mast/gradcheck.hpp"
#include "mast/report.hpp"
#include "mast/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kUsageError = 2;

// Raised for outputs that could not be written or validated.
struct OutputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_written(const std::vector<fs::path>& paths) {
  for (const auto& p : paths) {
    std::error_code ec;
    if (!fs::is_regular_file(p, ec) || fs::file_size(p, ec) == 0) {
      throw OutputError("output missing or empty: " + p.string());
    }
  }
}

// Flags shared by commands that build a training config.
struct ConfigFlags {
  std::string config;
  std::vector<std::string> set;
  std::string data, out, augmentations, dtype;
  std::optional<std::size_t> epochs, batch_size, embed_dim;
  std::optional<std::uint64_t> seed;
  std::optional<double> coeff_scale;
  bool baseline = false;

  void attach(CLI::App* app, bool config_required) {
    auto* c = app->add_option("--config", config, "JSON config file");
    if (config_required) c->required();
    c->check(CLI::ExistingFile);
    app->add_option("--set", set, "override one config key, KEY=VALUE (VALUE parsed as JSON)");
    app->add_option("--data", data, "dataset path (config key dataset)");
    app->add_option("--out", out, "output directory (config key out_dir)");
    app->add_option("--augmentations", augmentations, "mast5, mast15, mast19 or comma-separated operators");
    app->add_option("--dtype", dtype, "f32 or f64");
    app->add_option("--epochs", epochs);
    app->add_option("--batch-size", batch_size);
    app->add_option("--embed-dim", embed_dim);
    app->add_option("--seed", seed);
    app->add_option("--coeff-scale", coeff_scale);
    app->add_flag("--baseline", baseline, "masks disabled, plain invariance loss");
  }

  mast::TrainConfig build() const {
    mast::TrainConfig base;
    json patch = json::object();
    if (!config.empty()) {
      base = mast::load_config(config);
    }
    for (const auto& kv : set) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos || eq == 0) throw mast::ConfigError("--set expects KEY=VALUE, got '" + kv + "'");
      const std::string key = kv.substr(0, eq), value = kv.substr(eq + 1);
      json parsed = json::parse(value, nullptr, false);
      patch[key] = parsed.is_discarded() ? json(value) : parsed;
    }
    if (!data.empty()) patch["dataset"] = data;
    if (!out.empty()) patch["out_dir"] = out;
    if (!augmentations.empty()) {
      if (augmentations.rfind("mast", 0) == 0) {
        patch["augmentations"] = augmentations;
      } else {
        json ops = json::array();
        std::size_t start = 0;
        while (start <= augmentations.size()) {
          const auto comma = augmentations.find(',', start);
          const auto end = comma == std::string::npos ? augmentations.size() : comma;
          ops.push_back(augmentations.substr(start, end - start));
          start = end + 1;
        }
        patch["augmentations"] = ops;
      }
    }
    if (!dtype.empty()) patch["dtype"] = dtype;
    if (epochs) patch["epochs"] = *epochs;
    if (batch_size) patch["batch_size"] = *batch_size;
    if (embed_dim) patch["embed_dim"] = *embed_dim;
    if (seed) patch["seed"] = *seed;
    if (coeff_scale) patch["coeff_scale"] = *coeff_scale;
    if (baseline) patch["baseline"] = true;
    return mast::config_from_json(patch, base);
  }
};

mast::ProbeOptions probe_options(std::size_t epochs, std::uint64_t seed) {
  mast::ProbeOptions opt;
  opt.epochs = epochs;
  opt.seed = seed;
  return opt;
}

json probe_summary(const mast::ProbeResult& r) {
  return {{"top1", r.top1}, {"train_size", r.train_size}, {"test_size", r.test_size}};
}

std::vector<std::string> mask_labels(const mast::TrainConfig& cfg) {
  std::vector<std::string> out;
  for (mast::AugOp op : cfg.augmentations) out.emplace_back(mast::aug_name(op));
  return out;
}

// ---- gen-data --------------------------------------------------------------

struct GenDataArgs {
  std::string out;
  std::size_t n = 2000;
  std::size_t side = 32;
  std::string label_factor = "hue";
  std::uint64_t seed = 0;
  std::string format = "packed";
};

int run_gen_data(const GenDataArgs& a) {
  const auto factor = mast::factor_from_name(a.label_factor);
  if (!factor) throw mast::ConfigError("--label-factor: unknown factor '" + a.label_factor + "'");
  const auto ds = mast::generate({a.n, a.side, *factor}, a.seed);
  const auto format = a.format == "ppm" ? mast::DatasetFormat::ppm_dir : mast::DatasetFormat::packed;
  mast::write_dataset(ds, a.out, format);
  const fs::path manifest = format == mast::DatasetFormat::packed ? fs::path(a.out + ".json")
                                                                 : fs::path(a.out) / "manifest.json";
  if (format == mast::DatasetFormat::packed) {
    require_written({a.out, manifest});
  } else {
    require_written({manifest});
  }
  if (mast::read_manifest(a.out).count() != a.n) throw OutputError("dataset manifest count mismatch");
  std::cout << json{{"dataset", a.out}, {"samples", a.n}, {"classes", ds.num_classes()}}.dump() << "\n";
  return 0;
}

// ---- pretrain ----------------------------------------------------------------

int run_pretrain(const ConfigFlags& flags, const std::string& resume, bool quiet) {
  const auto cfg = flags.build();
  std::optional<fs::path> from;
  if (!resume.empty()) from = resume;
  const auto outputs = mast::pretrain(cfg, from, [&](const mast::StepRecord& r) {
    if (!quiet) std::cout << mast::metrics_line(r) << "\n";
  });
  require_written({outputs.checkpoint, outputs.metrics});
  mast::load_checkpoint(outputs.checkpoint);
  std::cerr << "checkpoint " << outputs.checkpoint.string() << "\n";
  return 0;
}

// ---- probe -------------------------------------------------------------------

struct ProbeArgs {
  std::string ckpt, data, out;
  bool rotation = false;
  std::size_t epochs = 100;
  std::uint64_t seed = 0;
};

int run_probe(const ProbeArgs& a) {
  const auto ckpt = mast::load_checkpoint(a.ckpt);
  const auto ds = mast::load(a.data);
  const auto opt = probe_options(a.epochs, a.seed);
  const auto result = a.rotation ? mast::rotation_probe(ckpt.model, ds.images(), opt)
                                 : mast::linear_probe(ckpt.model, ds.images(), ds.labels(), opt);
  json j = mast::to_json(result);
  j["task"] = a.rotation ? "rotation" : "linear";
  if (!a.out.empty()) {
    mast::write_json(a.out, j);
    require_written({a.out});
  }
  std::cout << j.dump() << "\n";
  return 0;
}

// ---- analyze -----------------------------------------------------------------

struct AnalyzeArgs {
  std::string ckpt, data, out = "analysis";
  std::size_t points = 5;
  std::size_t samples = 200;
  std::uint64_t seed = 0;
  std::size_t probe_epochs = 100;
};

std::vector<mast::Image> first_images(const mast::Dataset& ds, std::size_t count) {
  auto images = ds.images();
  if (images.size() > count) images.resize(count);
  return images;
}

int run_masks(const AnalyzeArgs& a) {
  const auto ckpt = mast::load_checkpoint(a.ckpt);
  const auto corr = mast::mask_correlation(ckpt.model);
  const auto labels = mask_labels(ckpt.config);
  const fs::path dir = a.out;
  mast::write_matrix_csv(dir / "mask_correlation.csv", corr.c, labels, labels);
  mast::render_heatmap_svg(dir / "mask_correlation.svg", corr.c, labels, 0.0, 1.0);
  mast::render_heatmap_ppm(dir / "mask_correlation.ppm", corr.c, 0.0, 1.0);
  json j = mast::to_json(corr);
  j["labels"] = labels;
  mast::write_json(dir / "mask_correlation.json", j);
  require_written({dir / "mask_correlation.csv", dir / "mask_correlation.svg", dir / "mask_correlation.ppm",
                   dir / "mask_correlation.json"});
  std::cout << j.dump() << "\n";
  return 0;
}

int run_invariance(const AnalyzeArgs& a) {
  const auto ckpt = mast::load_checkpoint(a.ckpt);
  const auto images = first_images(mast::load(a.data), a.samples);
  const auto labels = mask_labels(ckpt.config);
  const fs::path dir = a.out;
  json summary = json::array();
  std::vector<fs::path> written;
  for (const auto& spec : ckpt.config.augmentation_specs()) {
    if (!spec.continuous) continue;
    const auto grid = mast::magnitude_grid(spec, a.points);
    const auto curve = mast::invariance_metric(ckpt.model, spec, grid, images, a.seed);
    const std::string stem = "invariance_" + std::string(mast::aug_name(spec.op));
    std::vector<mast::Series> series{{"unmasked", curve.unmasked}};
    const auto& col_labels = ckpt.model.bank.count() ? labels : std::vector<std::string>{};
    for (std::size_t k = 0; k < curve.subspace.size(); ++k) series.push_back({col_labels[k], curve.subspace[k]});
    mast::write_curve_csv(dir / (stem + ".csv"), curve, col_labels);
    mast::render_curves_svg(dir / (stem + ".svg"), curve.magnitudes, series,
                            "invariance under " + std::string(mast::aug_name(spec.op)));
    written.push_back(dir / (stem + ".csv"));
    written.push_back(dir / (stem + ".svg"));
    summary.push_back(mast::to_json(curve));
  }
  mast::write_json(dir / "invariance.json", summary);
  written.push_back(dir / "invariance.json");
  require_written(written);
  std::cout << json{{"curves", summary.size()}, {"out", dir.string()}}.dump() << "\n";
  return 0;
}

int run_uncertainty(const AnalyzeArgs& a) {
  const auto ckpt = mast::load_checkpoint(a.ckpt);
  const auto images = first_images(mast::load(a.data), a.samples);
  const auto specs = ckpt.config.augmentation_specs();
  const auto exp = mast::uncertainty_vs_strength(ckpt.model, specs, images, a.seed);
  const fs::path dir = a.out;

  mast::Matrix table(exp.strength.size(), 2);
  std::vector<std::size_t> order(exp.strength.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](auto x, auto y) { return exp.strength[x] < exp.strength[y]; });
  std::vector<std::string> rows;
  for (std::size_t r = 0; r < order.size(); ++r) {
    table(r, 0) = exp.strength[order[r]];
    table(r, 1) = exp.scores[order[r]];
    rows.push_back(std::to_string(order[r]));
  }
  mast::write_matrix_csv(dir / "uncertainty.csv", table, rows, {"strength", "score"});

  constexpr std::size_t bins = 10;
  std::vector<double> x(bins), y(bins, 0.0), count(bins, 0.0);
  for (std::size_t b = 0; b < bins; ++b) x[b] = (static_cast<double>(b) + 0.5) / bins;
  for (std::size_t i = 0; i < exp.strength.size(); ++i) {
    const auto b = std::min(bins - 1, static_cast<std::size_t>(exp.strength[i] * bins));
    y[b] += exp.scores[i];
    count[b] += 1.0;
  }
  for (std::size_t b = 0; b < bins; ++b) y[b] = count[b] > 0 ? y[b] / count[b] : std::nan("");
  mast::render_curves_svg(dir / "uncertainty.svg", x, {{"mean score", y}}, "uncertainty vs augmentation strength");
  const json j = mast::to_json(exp);
  mast::write_json(dir / "uncertainty.json", j);
  require_written({dir / "uncertainty.csv", dir / "uncertainty.svg", dir / "uncertainty.json"});
  std::cout << json{{"weak_mean", exp.weak_mean}, {"strong_mean", exp.strong_mean}, {"p_value", exp.p_value}}.dump()
            << "\n";
  return 0;
}

int run_subspace_class(const AnalyzeArgs& a) {
  const auto ckpt = mast::load_checkpoint(a.ckpt);
  const auto ds = mast::load(a.data);
  const auto result =
      mast::subspace_class_prediction(ckpt.model, ds.images(), ds.labels(), probe_options(a.probe_epochs, a.seed));
  for (const auto& w : result.warnings) std::cerr << "warning: " << w << "\n";
  const fs::path dir = a.out;
  std::vector<std::string> classes;
  for (std::size_t c = 0; c < result.values.cols; ++c) classes.push_back("class" + std::to_string(c));
  const auto labels = result.values.rows ? mask_labels(ckpt.config) : std::vector<std::string>{};
  mast::write_matrix_csv(dir / "subspace_class.csv", result.values, labels, classes);
  double lo = 0.0, hi = 0.0;
  for (double v : result.values.data) {
    if (std::isfinite(v)) lo = std::min(lo, v), hi = std::max(hi, v);
  }
  mast::render_heatmap_ppm(dir / "subspace_class.ppm", result.values, lo, hi);
  mast::write_json(dir / "subspace_class.json", mast::to_json(result));
  std::vector<fs::path> written{dir / "subspace_class.csv", dir / "subspace_class.json"};
  if (result.values.rows) written.push_back(dir / "subspace_class.ppm");
  require_written(written);
  std::cout << json{{"correct", result.correct}, {"out", dir.string()}}.dump() << "\n";
  return 0;
}

// ---- ablate ------------------------------------------------------------------

struct AblateArgs {
  std::vector<std::string> ops;
  std::vector<double> scales{0.25, 0.5, 1.0, 2.0, 4.0};
  std::size_t probe_epochs = 100;
  bool rotation = false;
};

json probe_run(const mast::TrainConfig& cfg, const mast::PretrainOutputs& out, const mast::Dataset& ds,
               const AblateArgs& a) {
  const auto ckpt = mast::load_checkpoint(out.checkpoint);
  const auto opt = probe_options(a.probe_epochs, cfg.seed);
  const auto r = a.rotation ? mast::rotation_probe(ckpt.model, ds.images(), opt)
                            : mast::linear_probe(ckpt.model, ds.images(), ds.labels(), opt);
  json j = probe_summary(r);
  j["checkpoint"] = out.checkpoint.string();
  return j;
}

void write_table(const fs::path& dir, const std::string& stem, const json& rows) {
  mast::Matrix m(rows.size(), 1);
  std::vector<std::string> labels;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    labels.push_back(rows[i]["run"].get<std::string>());
    m(i, 0) = rows[i]["top1"].get<double>();
  }
  mast::write_matrix_csv(dir / (stem + ".csv"), m, labels, {"top1"});
  mast::write_json(dir / (stem + ".json"), rows);
  require_written({dir / (stem + ".csv"), dir / (stem + ".json")});
}

int run_leave_one_out(const ConfigFlags& flags, const AblateArgs& a) {
  const auto cfg = flags.build();
  const auto ds = mast::load(cfg.dataset);
  std::vector<mast::AugOp> ops;
  for (const auto& name : a.ops) {
    const auto op = mast::aug_from_name(name);
    if (!op) throw mast::ConfigError("--op: unknown operator '" + name + "'");
    ops.push_back(*op);
  }
  if (ops.empty()) ops = cfg.augmentations;
  json rows = json::array();
  auto full = cfg;
  full.out_dir = cfg.out_dir / "full";
  json row = probe_run(full, mast::pretrain(full), ds, a);
  row["run"] = "full";
  rows.push_back(row);
  for (mast::AugOp op : ops) {
    const auto reduced = mast::without_augmentation(cfg, op);
    row = probe_run(reduced, mast::leave_one_out(cfg, op), ds, a);
    row["run"] = "without_" + std::string(mast::aug_name(op));
    rows.push_back(row);
  }
  write_table(cfg.out_dir, "leave_one_out", rows);
  std::cout << rows.dump() << "\n";
  return 0;
}

int run_coeff_sweep(const ConfigFlags& flags, const AblateArgs& a) {
  const auto cfg = flags.build();
  const auto ds = mast::load(cfg.dataset);
  json rows = json::array();
  for (double s : a.scales) {
    if (!(s > 0.0)) throw mast::ConfigError("--scale: must be positive");
    auto run = cfg;
    run.coefficients.scale = s;
    std::ostringstream name;
    name << "s" << s;
    run.out_dir = cfg.out_dir / ("scale_" + name.str().substr(1));
    json row = probe_run(run, mast::pretrain(run), ds, a);
    row["run"] = name.str();
    row["scale"] = s;
    rows.push_back(row);
  }
  write_table(cfg.out_dir, "coeff_sweep", rows);
  std::cout << rows.dump() << "\n";
  return 0;
}

// ---- gradcheck ---------------------------------------------------------------

int run_gradcheck(std::uint64_t seed, const std::string& out) {
  const auto report = mast::gradcheck(seed);
  for (const auto& c : report.cases) {
    std::cout << (c.passed ? "PASS " : "FAIL ") << c.name << " max_rel_error=" << c.max_rel_error
              << " tolerance=" << c.tolerance << "\n";
  }
  std::cout << (report.passed() ? "PASS" : "FAIL") << " gradcheck (" << report.cases.size() << " cases, "
            << report.seconds << " s)\n";
  if (!out.empty()) {
    mast::write_json(out, mast::to_json(report));
    require_written({out});
  }
  return report.passed() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked augmentation subspace training lab"};
  app.require_subcommand(1);
  std::function<int()> action;

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate the synthetic factor dataset");
  gen_cmd->add_option("--out", gen.out, "packed file or PPM directory")->required();
  gen_cmd->add_option("--n", gen.n, "number of samples");
  gen_cmd->add_option("--side", gen.side, "image side in pixels");
  gen_cmd->add_option("--label-factor", gen.label_factor, "shape, hue, scale or position");
  gen_cmd->add_option("--seed", gen.seed);
  gen_cmd->add_option("--format", gen.format)->check(CLI::IsMember({"packed", "ppm"}));
  gen_cmd->callback([&] { action = [&] { return run_gen_data(gen); }; });

  ConfigFlags pre_flags;
  std::string resume;
  bool quiet = false;
  auto* pre_cmd = app.add_subcommand("pretrain", "self-supervised pretraining");
  pre_flags.attach(pre_cmd, false);
  pre_cmd->add_option("--resume", resume, "continue from a checkpoint")->check(CLI::ExistingFile);
  pre_cmd->add_flag("--quiet", quiet, "do not echo metrics to stdout");
  pre_cmd->callback([&] { action = [&] { return run_pretrain(pre_flags, resume, quiet); }; });

  ProbeArgs probe;
  auto* probe_cmd = app.add_subcommand("probe", "linear probe on frozen representations");
  probe_cmd->add_option("--ckpt", probe.ckpt)->required()->check(CLI::ExistingFile);
  probe_cmd->add_option("--data", probe.data)->required()->check(CLI::ExistingPath);
  probe_cmd->add_option("--out", probe.out, "write the result JSON here");
  probe_cmd->add_flag("--rotation", probe.rotation, "4-way rotation prediction instead of labels");
  probe_cmd->add_option("--epochs", probe.epochs, "probe training epochs");
  probe_cmd->add_option("--seed", probe.seed);
  probe_cmd->callback([&] { action = [&] { return run_probe(probe); }; });

  AnalyzeArgs an;
  auto* an_cmd = app.add_subcommand("analyze", "mask, invariance, uncertainty and class analyses");
  an_cmd->require_subcommand(1);
  const auto analysis = [&](const std::string& name, const std::string& help, bool needs_data, int (*fn)(const AnalyzeArgs&)) {
    auto* cmd = an_cmd->add_subcommand(name, help);
    cmd->add_option("--ckpt", an.ckpt)->required()->check(CLI::ExistingFile);
    auto* data = cmd->add_option("--data", an.data)->check(CLI::ExistingPath);
    if (needs_data) data->required();
    cmd->add_option("--out", an.out, "output directory");
    cmd->add_option("--seed", an.seed);
    cmd->add_option("--samples", an.samples, "images used by invariance and uncertainty");
    cmd->add_option("--points", an.points, "magnitude grid size");
    cmd->add_option("--probe-epochs", an.probe_epochs);
    cmd->callback([&, fn] { action = [&, fn] { return fn(an); }; });
  };
  analysis("masks", "pairwise cosine similarity of the mask columns", false, run_masks);
  analysis("invariance", "invariance metric per subspace and magnitude", true, run_invariance);
  analysis("uncertainty", "uncertainty score against augmentation strength", true, run_uncertainty);
  analysis("subspace-class", "per-subspace ground-truth class prediction", true, run_subspace_class);

  ConfigFlags ab_flags;
  AblateArgs ab;
  auto* ab_cmd = app.add_subcommand("ablate", "retrain-and-probe ablations");
  ab_cmd->require_subcommand(1);
  auto* loo_cmd = ab_cmd->add_subcommand("leave-one-out", "drop one augmentation at a time");
  ab_flags.attach(loo_cmd, false);
  loo_cmd->add_option("--op", ab.ops, "operator to remove (repeatable; default: each in turn)");
  loo_cmd->add_option("--probe-epochs", ab.probe_epochs);
  loo_cmd->add_flag("--rotation", ab.rotation, "probe rotation prediction instead of labels");
  loo_cmd->callback([&] { action = [&] { return run_leave_one_out(ab_flags, ab); }; });
  auto* sweep_cmd = ab_cmd->add_subcommand("coeff-sweep", "scale lambda, lambda1 and lambda2 together");
  ab_flags.attach(sweep_cmd, false);
  sweep_cmd->add_option("--scale", ab.scales, "multiplier (repeatable; default 0.25 0.5 1 2 4)");
  sweep_cmd->add_option("--probe-epochs", ab.probe_epochs);
  sweep_cmd->add_flag("--rotation", ab.rotation, "probe rotation prediction instead of labels");
  sweep_cmd->callback([&] { action = [&] { return run_coeff_sweep(ab_flags, ab); }; });

  std::uint64_t gc_seed = 0;
  std::string gc_out;
  auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference check of every primitive and the loss");
  gc_cmd->add_option("--seed", gc_seed);
  gc_cmd->add_option("--out", gc_out, "write the report JSON here");
  gc_cmd->callback([&] { action = [&] { return run_gradcheck(gc_seed, gc_out); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }
  try {
    return action();
  } catch (const mast::ConfigError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
