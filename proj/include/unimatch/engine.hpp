#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "unimatch/augment.hpp"
#include "unimatch/data.hpp"
#include "unimatch/datamodel.hpp"
#include "unimatch/eval.hpp"
#include "unimatch/frameworks.hpp"
#include "unimatch/model.hpp"
#include "unimatch/teacher.hpp"

namespace unimatch {

class ScheduleError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// Training stopped on a non-finite loss or parameter; `dump` holds the
/// diagnostic file.
class NumericalAbort : public std::runtime_error {
 public:
  NumericalAbort(const std::string& what, std::filesystem::path dump)
      : std::runtime_error(what), dump_path(std::move(dump)) {}
  std::filesystem::path dump_path;
};

/// base * (1 - iter/total)^power
inline double poly_lr(double base, std::size_t iter, std::size_t total, double power) {
  if (total == 0) throw ScheduleError("poly_lr: total must be > 0");
  if (power <= 0.0) throw ScheduleError("poly_lr: power must be > 0");
  if (iter > total) throw ScheduleError("poly_lr: iter " + std::to_string(iter) + " > total " + std::to_string(total));
  return base * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(total), power);
}

struct Schedule {
  double encoder_base = 5e-6;
  double decoder_base = 2e-4;
  double power = 0.9;
  std::size_t total = 1;

  static Schedule from(const TrainConfig& c, std::size_t total) {
    return {c.lr, c.lr * c.decoder_lr_mult, c.lr_power, total};
  }
  double encoder(std::size_t iter) const { return poly_lr(encoder_base, iter, total, power); }
  double decoder(std::size_t iter) const { return poly_lr(decoder_base, iter, total, power); }
};

/// Adam moments with decoupled weight decay.
class AdamW {
 public:
  explicit AdamW(double weight_decay = 0.01, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

  /// One optimizer step over both groups.
  void step(const ParameterGroups& groups, double lr_encoder, double lr_decoder) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (auto* p : groups.encoder) update(*p, lr_encoder, c1, c2);
    for (auto* p : groups.decoder) update(*p, lr_decoder, c1, c2);
  }

  std::size_t steps() const { return t_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };

  void update(Parameter& p, double lr, double c1, double c2) {
    auto& st = state_[&p];
    if (st.m.empty()) st.m.assign(p.value.size(), 0.0), st.v.assign(p.value.size(), 0.0);
    float* w = p.value.data();
    const float* g = p.grad.data();
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      st.m[i] = b1_ * st.m[i] + (1 - b1_) * g[i];
      st.v[i] = b2_ * st.v[i] + (1 - b2_) * static_cast<double>(g[i]) * g[i];
      const double upd = (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + eps_);
      w[i] = static_cast<float>(w[i] - lr * wd_ * w[i] - lr * upd);
    }
  }

  double wd_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::unordered_map<const Parameter*, Moments> state_;
};

// ---------------------------------------------------------------------------
// Data preparation and batch composition

struct TrainData {
  DatasetHandle train;
  DatasetHandle eval;
  SplitManifest manifest;
};

inline SyntheticSpec synthetic_spec(const DataConfig& d, bool held_out) {
  SyntheticSpec s;
  s.num_samples = held_out ? d.eval_samples : d.num_samples;
  s.image_size = d.image_size;
  s.num_classes = d.num_classes;
  s.shapes_min = d.shapes_min;
  s.shapes_max = d.shapes_max;
  s.noise = d.noise;
  s.seed = held_out ? derive_seed(d.seed, "eval") : d.seed;
  s.id_prefix = held_out ? "eval" : "syn";
  return s;
}

inline SplitManifest read_manifest(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError("cannot read manifest " + p.string());
  try {
    return json::parse(in).get<SplitManifest>();
  } catch (const json::exception& e) {
    throw ConfigError("malformed manifest " + p.string() + ": " + e.what());
  }
}

/// Builds or loads the training set, the held-out set and the split.
inline TrainData prepare_data(const TrainConfig& cfg) {
  TrainData d;
  const auto& dc = cfg.data;
  if (dc.kind == "synthetic") {
    d.train = generate_synthetic(synthetic_spec(dc, false));
    d.eval = generate_synthetic(synthetic_spec(dc, true));
  } else {
    d.train = load_dataset({dc.root, dc.num_classes, dc.ignore_value});
    d.eval = dc.eval_root.empty() ? d.train : load_dataset({dc.eval_root, dc.num_classes, dc.ignore_value});
  }
  d.manifest = dc.manifest.empty() ? make_split(d.train, Ratio::parse(dc.split_ratio), dc.seed)
                                   : read_manifest(dc.manifest);
  check_manifest(d.manifest, d.train);
  return d;
}

/// Deterministic batch factory. Every batch is a pure function of the seed
/// tree and the step coordinates, so batches never depend on call order.
class BatchSource {
 public:
  BatchSource(const TrainConfig& cfg, const DatasetHandle& ds, const SplitManifest& m, const SeedTree& seeds)
      : cfg_(cfg), ds_(ds), m_(m), seeds_(seeds), mean_(ds.mean()), sd_(ds.stddev()) {}

  std::size_t steps_per_epoch() const {
    return std::max<std::size_t>(1, m_.unlabeled_ids.size() / static_cast<std::size_t>(cfg_.batch_unlabeled));
  }
  const std::array<float, 3>& mean() const { return mean_; }
  const std::array<float, 3>& stddev() const { return sd_; }

  /// B^l labeled samples drawn with replacement, weakly augmented.
  LabeledBatch labeled(std::size_t step) const {
    Rng pick = seeds_.stream("data.labeled", step);
    Rng aug = seeds_.stream("augment", step, 0);
    const auto crop = static_cast<std::size_t>(cfg_.crop_size);
    std::vector<FloatTensor> imgs;
    std::vector<IndexTensor> masks;
    for (int i = 0; i < cfg_.batch_labeled; ++i) {
      const auto& s = ds_.get(m_.labeled_ids[pick.below(m_.labeled_ids.size())]);
      auto w = weak_augment(s.image, s.mask, crop, weak_params(cfg_.augment), aug, mean_, cfg_.data.ignore_value);
      imgs.push_back(std::move(w.image));
      masks.push_back(std::move(*w.mask));
    }
    return {normalize({stack_images(imgs), false}, mean_, sd_),
            {stack_masks(masks), cfg_.data.num_classes, cfg_.data.ignore_value}};
  }

  /// Slot `slot` of epoch `epoch`'s unlabeled permutation.
  UnlabeledBatch unlabeled(std::size_t epoch, std::size_t slot, std::size_t step) const {
    std::vector<std::size_t> order(m_.unlabeled_ids.size());
    std::iota(order.begin(), order.end(), 0);
    Rng perm = seeds_.stream("data.order", epoch);
    perm.shuffle(order.begin(), order.end());

    Rng aug = seeds_.stream("augment", step, 1);
    const auto crop = static_cast<std::size_t>(cfg_.crop_size);
    const auto B = static_cast<std::size_t>(cfg_.batch_unlabeled);
    const auto sp = strong_params(cfg_.augment);
    std::vector<FloatTensor> weak, s1, s2;
    std::vector<IndexTensor> pad;
    for (std::size_t i = 0; i < B; ++i) {
      const auto& s = ds_.get(m_.unlabeled_ids[order[(slot * B + i) % order.size()]]);
      auto w = weak_augment(s.image, std::nullopt, crop, weak_params(cfg_.augment), aug, mean_);
      pad.push_back(replay_weak_mask(w.record, IndexTensor(s.mask.shape(), 0), 1));
      s1.push_back(strong_photometric(w.image, sp, aug));
      s2.push_back(strong_photometric(w.image, sp, aug));
      weak.push_back(std::move(w.image));
    }
    const CutMixParams cp{cfg_.augment.cutmix_p, cfg_.augment.cutmix_area_min, cfg_.augment.cutmix_area_max};
    Rng cm1 = seeds_.stream("cutmix", step, 1), cm2 = seeds_.stream("cutmix", step, 2);
    auto mixed1 = cutmix_batch(stack_images(s1), cm1, cp);
    auto mixed2 = cutmix_batch(stack_images(s2), cm2, cp);

    UnlabeledBatch u;
    u.weak = normalize({stack_images(weak), false}, mean_, sd_);
    u.strong1 = normalize({std::move(mixed1.images), false}, mean_, sd_);
    u.strong2 = normalize({std::move(mixed2.images), false}, mean_, sd_);
    u.mix1 = std::move(mixed1.record);
    u.mix2 = std::move(mixed2.record);
    const IndexTensor p = stack_masks(pad);
    u.ignore = ByteTensor(p.shape());
    for (std::size_t i = 0; i < p.size(); ++i) u.ignore[i] = p[i] != 0;
    return u;
  }

 private:
  const TrainConfig& cfg_;
  const DatasetHandle& ds_;
  const SplitManifest& m_;
  const SeedTree& seeds_;
  std::array<float, 3> mean_, sd_;
};

// ---------------------------------------------------------------------------
// Evaluation over a dataset

template <typename Model>
MiouResult evaluate(const Model& model, const DatasetHandle& ds, const TrainConfig& cfg,
                    const std::array<float, 3>& mean, const std::array<float, 3>& sd,
                    ConfusionMatrix* cm_out = nullptr) {
  ConfusionMatrix cm(static_cast<std::size_t>(cfg.data.num_classes));
  constexpr std::size_t chunk = 16;
  for (std::size_t start = 0; start < ds.size(); start += chunk) {
    std::vector<FloatTensor> imgs;
    std::vector<IndexTensor> masks;
    for (std::size_t i = start; i < std::min(ds.size(), start + chunk); ++i) {
      imgs.push_back(ds.at(i).image);
      masks.push_back(ds.at(i).mask);
    }
    bool uniform = true;
    for (const auto& im : imgs) uniform = uniform && im.shape() == imgs.front().shape();
    auto run = [&](const std::vector<FloatTensor>& xs, const std::vector<IndexTensor>& ys) {
      const ImageBatch b = normalize({stack_images(xs), false}, mean, sd);
      const Logits logits = cfg.eval.mode == "sliding"
                                ? sliding_window_predict(model, b.data, static_cast<std::size_t>(cfg.eval.window),
                                                         static_cast<std::size_t>(cfg.eval.stride))
                                : whole_image_predict(model, b.data);
      const LabelMask pred = argmax(logits, static_cast<std::size_t>(cfg.data.num_classes));
      accumulate(cm, pred, {stack_masks(ys), cfg.data.num_classes, cfg.data.ignore_value});
    };
    if (uniform) {
      run(imgs, masks);
    } else {
      for (std::size_t i = 0; i < imgs.size(); ++i) run({imgs[i]}, {masks[i]});
    }
  }
  if (cm_out) *cm_out = cm;
  return miou(cm);
}

inline json miou_json(const MiouResult& r) {
  json per = json::array();
  for (double v : r.per_class) per.push_back(std::isnan(v) ? json(nullptr) : json(v));
  return {{"miou", r.defined ? json(r.mean) : json(nullptr)}, {"per_class", per}};
}

/// Plain-text per-class IoU table.
inline std::string format_miou(const MiouResult& r, const std::string& title) {
  std::string s = title + "\n";
  char buf[96];
  for (std::size_t k = 0; k < r.per_class.size(); ++k) {
    if (std::isnan(r.per_class[k]))
      std::snprintf(buf, sizeof(buf), "  class %2zu   n/a\n", k);
    else
      std::snprintf(buf, sizeof(buf), "  class %2zu  %6.2f\n", k, 100.0 * r.per_class[k]);
    s += buf;
  }
  std::snprintf(buf, sizeof(buf), "  mean      %6.2f\n", r.defined ? 100.0 * r.mean : std::nan(""));
  return s + buf;
}

// ---------------------------------------------------------------------------
// Training loop

struct RunOptions {
  std::filesystem::path run_dir;
  bool write_checkpoints = true;
  std::ostream* progress = nullptr;
};

struct RunArtifacts {
  std::filesystem::path run_dir;
  std::filesystem::path metrics_log;
  std::filesystem::path student_checkpoint;
  std::filesystem::path teacher_checkpoint;
  std::filesystem::path best_teacher_checkpoint;
  std::filesystem::path config_snapshot;
  double final_teacher_miou = 0.0;
  double final_student_miou = 0.0;
  double best_teacher_miou = 0.0;
  std::size_t steps = 0;
};

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline json checkpoint_meta(const TrainConfig& cfg, std::size_t iteration, const char* role) {
  return {{"role", role},
          {"iteration", iteration},
          {"config_hash", hex64(config_hash(cfg))},
          {"spec", toy_spec(cfg)},
          {"config", cfg}};
}

namespace detail {

template <ParameterTree Model>
std::vector<std::string> non_finite_parameters(const Model& m) {
  std::vector<std::string> bad;
  for (const auto* p : m.parameters())
    if (!all_finite(p->value)) bad.push_back(p->name);
  return bad;
}

inline json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace detail

/// Runs the configured framework for cfg.epochs passes over the unlabeled
/// set and writes metrics.jsonl, checkpoints and config.json to run_dir.
inline RunArtifacts train(const TrainConfig& cfg, const SplitManifest& manifest, const DatasetHandle& ds,
                          const DatasetHandle& eval_ds, const RunOptions& opt) {
  if (auto errs = validate_config(cfg); !errs.empty()) throw ConfigError("invalid config: " + errs.front());
  check_manifest(manifest, ds);
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(opt.run_dir, ec);
  if (ec) throw std::runtime_error("cannot create run directory " + opt.run_dir.string() + ": " + ec.message());

  RunArtifacts art;
  art.run_dir = opt.run_dir;
  art.metrics_log = opt.run_dir / "metrics.jsonl";
  art.config_snapshot = opt.run_dir / "config.json";
  art.student_checkpoint = opt.run_dir / "student.ckpt";
  art.teacher_checkpoint = opt.run_dir / "teacher.ckpt";
  art.best_teacher_checkpoint = opt.run_dir / "teacher_best.ckpt";
  {
    std::ofstream snap(art.config_snapshot);
    snap << json{{"config_hash", hex64(config_hash(cfg))}, {"config", cfg}, {"manifest", manifest}}.dump(2) << "\n";
    if (!snap) throw std::runtime_error("cannot write " + art.config_snapshot.string());
  }
  std::ofstream log(art.metrics_log);
  if (!log) throw std::runtime_error("cannot write " + art.metrics_log.string());

  SeedTree seeds(cfg.seed);
  Rng init = seeds.stream("init");
  ToyModel student = build_toy_model(toy_spec(cfg), init);
  set_frozen(student.encoder, cfg.freeze_encoder);
  auto ema = init_teacher(student, cfg.teacher.ema_cap);
  const ParameterGroups groups = parameter_groups(student);
  AdamW opt_w(cfg.engine.weight_decay);

  BatchSource source(cfg, ds, manifest, seeds);
  const std::size_t per_epoch = source.steps_per_epoch();
  const std::size_t total = per_epoch * static_cast<std::size_t>(cfg.epochs);
  const Schedule sched = Schedule::from(cfg, total);
  const bool needs_unlabeled = cfg.framework != Framework::labeled_only;

  auto abort_run = [&](const std::string& why, std::size_t step, const LossBreakdown& l) -> NumericalAbort {
    const fs::path dump = opt.run_dir / "nan_dump.json";
    std::ofstream out(dump);
    out << json{{"reason", why},
                {"step", step},
                {"loss",
                 {{"supervised", detail::finite_or_null(l.supervised)},
                  {"unsupervised", detail::finite_or_null(l.unsupervised)},
                  {"total", detail::finite_or_null(l.total)}}},
                {"lr_encoder", sched.encoder(step)},
                {"lr_decoder", sched.decoder(step)},
                {"non_finite_parameters", detail::non_finite_parameters(student)},
                {"config_hash", hex64(config_hash(cfg))}}
               .dump(2)
        << "\n";
    return NumericalAbort(why + " at step " + std::to_string(step), dump);
  };

  double best = -1.0;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < static_cast<std::size_t>(cfg.epochs); ++epoch) {
    for (std::size_t slot = 0; slot < per_epoch; ++slot, ++step) {
      zero_grad(student);
      const LabeledBatch bl = source.labeled(step);
      std::optional<UnlabeledBatch> bu;
      if (needs_unlabeled) bu = source.unlabeled(epoch, slot, step);
      Rng drop = seeds.stream("dropout", step);
      StepContext ctx{cfg, drop, nullptr};
      const ToyModel& teacher = cfg.teacher.use_student ? student : ema.teacher;
      StepOutput out;
      try {
        out = framework_step(bl, bu ? &*bu : nullptr, student, teacher, ctx);
      } catch (const ContractError& e) {
        if (!detail::non_finite_parameters(student).empty()) throw abort_run(e.what(), step, out.loss);
        throw;
      }
      if (!std::isfinite(out.loss.total)) throw abort_run("non-finite loss", step, out.loss);

      const double lr_e = sched.encoder(step), lr_d = sched.decoder(step);
      opt_w.step(groups, lr_e, lr_d);
      if (!detail::non_finite_parameters(student).empty())
        throw abort_run("non-finite parameters after update", step, out.loss);
      ema_update(ema, student);

      json rec{{"type", "step"},
               {"step", step},
               {"epoch", epoch},
               {"lr_encoder", lr_e},
               {"lr_decoder", lr_d},
               {"loss_supervised", out.loss.supervised},
               {"loss_unsupervised", out.loss.unsupervised},
               {"loss_total", out.loss.total},
               {"kept_fraction", out.diagnostics.kept_fraction},
               {"stream_losses", out.diagnostics.stream_losses}};
      if (out.diagnostics.agreement >= 0.0) rec["agreement"] = out.diagnostics.agreement;
      log << rec.dump() << "\n";
    }

    const bool last = epoch + 1 == static_cast<std::size_t>(cfg.epochs);
    if (!last && (epoch + 1) % static_cast<std::size_t>(cfg.eval.every_epochs) != 0) continue;
    const auto t = evaluate(ema.teacher, eval_ds, cfg, source.mean(), source.stddev());
    const auto s = evaluate(student, eval_ds, cfg, source.mean(), source.stddev());
    log << json{{"type", "eval"}, {"epoch", epoch}, {"step", step}, {"teacher", miou_json(t)}, {"student", miou_json(s)}}
               .dump()
        << "\n";
    art.final_teacher_miou = t.defined ? t.mean : 0.0;
    art.final_student_miou = s.defined ? s.mean : 0.0;
    if (art.final_teacher_miou > best) {
      best = art.final_teacher_miou;
      if (opt.write_checkpoints)
        save_checkpoint(art.best_teacher_checkpoint, ema.teacher, checkpoint_meta(cfg, ema.iteration, "teacher"));
    }
    if (opt.progress)
      *opt.progress << "epoch " << epoch + 1 << "/" << cfg.epochs << "  teacher mIoU " << 100.0 * art.final_teacher_miou
                    << "  student mIoU " << 100.0 * art.final_student_miou << "\n";
  }
  art.best_teacher_miou = best;
  art.steps = step;
  if (opt.write_checkpoints) {
    save_checkpoint(art.student_checkpoint, student, checkpoint_meta(cfg, ema.iteration, "student"));
    save_checkpoint(art.teacher_checkpoint, ema.teacher, checkpoint_meta(cfg, ema.iteration, "teacher"));
  }
  log.flush();
  if (!log) throw std::runtime_error("failed writing " + art.metrics_log.string());
  return art;
}

}  // namespace unimatch
