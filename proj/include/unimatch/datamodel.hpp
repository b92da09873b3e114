#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "unimatch/rng.hpp"
#include "unimatch/tensor.hpp"

namespace unimatch {

using json = nlohmann::json;

inline constexpr std::int32_t kIgnoreValue = 255;
inline constexpr int kSchemaVersion = 1;

/// (B, 3, H, W) image tensor. Values live in [0,1] until normalized.
struct ImageBatch {
  FloatTensor data;
  bool normalized = false;

  std::size_t batch() const { return data.dim(0); }
  std::size_t height() const { return data.dim(2); }
  std::size_t width() const { return data.dim(3); }
};

/// (B, H, W) integer class map; `ignore_value` marks pixels excluded from
/// every loss and metric.
struct LabelMask {
  IndexTensor data;
  int num_classes = 0;
  std::int32_t ignore_value = kIgnoreValue;
};

using Logits = FloatTensor;

/// Multi-level encoder output. `perturbed` records that a feature dropout
/// already ran on this volume; a second application is rejected.
struct FeatureVolume {
  std::vector<FloatTensor> levels;
  bool perturbed = false;

  std::size_t batch() const { return levels.empty() ? 0 : levels.front().dim(0); }
};

inline void check_label_mask(const LabelMask& m) {
  for (auto v : m.data.values()) {
    if (v != m.ignore_value && (v < 0 || v >= m.num_classes))
      throw ContractError("label value " + std::to_string(v) + " outside [0," +
                          std::to_string(m.num_classes) + ") and not ignore");
  }
}

inline void check_image_batch(const ImageBatch& b) {
  require(b.data.rank() == 4 && b.data.dim(0) >= 1 && b.data.dim(1) == 3,
          "ImageBatch must be (B>=1, 3, H, W)");
  require(all_finite(b.data), "ImageBatch contains non-finite values");
}

// ---------------------------------------------------------------------------
// Rational split ratio, persisted as "num/den".

struct Ratio {
  std::int64_t num = 1;
  std::int64_t den = 16;

  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  std::string str() const { return std::to_string(num) + "/" + std::to_string(den); }

  static Ratio parse(const std::string& s) {
    Ratio r;
    const auto slash = s.find('/');
    try {
      if (slash == std::string::npos) {
        // decimal form, e.g. "0.5" -> 1/2 with a fixed 10^6 denominator
        const double v = std::stod(s);
        r.den = 1000000;
        r.num = static_cast<std::int64_t>(std::llround(v * 1e6));
      } else {
        r.num = std::stoll(s.substr(0, slash));
        r.den = std::stoll(s.substr(slash + 1));
      }
    } catch (const std::exception&) {
      throw ConfigError("invalid ratio '" + s + "'");
    }
    if (r.den <= 0) throw ConfigError("invalid ratio '" + s + "': denominator must be positive");
    return r;
  }
  friend bool operator==(const Ratio&, const Ratio&) = default;
};

// ---------------------------------------------------------------------------
// SplitManifest

struct SplitManifest {
  std::string dataset_id;
  std::vector<std::string> labeled_ids;
  std::vector<std::string> unlabeled_ids;
  Ratio ratio;
  std::uint64_t seed = 0;

  friend bool operator==(const SplitManifest&, const SplitManifest&) = default;
};

inline void to_json(json& j, const SplitManifest& m) {
  j = json{{"schema_version", kSchemaVersion}, {"dataset_id", m.dataset_id},
           {"ratio", m.ratio.str()},           {"seed", m.seed},
           {"labeled_ids", m.labeled_ids},     {"unlabeled_ids", m.unlabeled_ids}};
}

inline void from_json(const json& j, SplitManifest& m) {
  if (j.value("schema_version", 0) != kSchemaVersion)
    throw ConfigError("split manifest: unsupported schema_version");
  m.dataset_id = j.at("dataset_id").get<std::string>();
  m.ratio = Ratio::parse(j.at("ratio").get<std::string>());
  m.seed = j.at("seed").get<std::uint64_t>();
  m.labeled_ids = j.at("labeled_ids").get<std::vector<std::string>>();
  m.unlabeled_ids = j.at("unlabeled_ids").get<std::vector<std::string>>();
}

// ---------------------------------------------------------------------------
// TrainConfig

enum class Framework { labeled_only, fixmatch, unimatch_v1, unimatch_v2, variant_a, variant_b, variant_c };
enum class DropoutPosition { encoder_decoder, decoder_classifier };

NLOHMANN_JSON_SERIALIZE_ENUM(Framework, {{Framework::labeled_only, "labeled_only"},
                                         {Framework::fixmatch, "fixmatch"},
                                         {Framework::unimatch_v1, "unimatch_v1"},
                                         {Framework::unimatch_v2, "unimatch_v2"},
                                         {Framework::variant_a, "variant_a"},
                                         {Framework::variant_b, "variant_b"},
                                         {Framework::variant_c, "variant_c"}})

NLOHMANN_JSON_SERIALIZE_ENUM(DropoutPosition,
                             {{DropoutPosition::encoder_decoder, "encoder_decoder"},
                              {DropoutPosition::decoder_classifier, "decoder_classifier"}})

inline std::string to_string(Framework f) { return json(f).get<std::string>(); }

inline Framework parse_framework(const std::string& s) {
  static const std::map<std::string, Framework> names = {
      {"labeled_only", Framework::labeled_only}, {"fixmatch", Framework::fixmatch},
      {"unimatch_v1", Framework::unimatch_v1},   {"unimatch_v2", Framework::unimatch_v2},
      {"variant_a", Framework::variant_a},       {"variant_b", Framework::variant_b},
      {"variant_c", Framework::variant_c}};
  auto it = names.find(s);
  if (it == names.end()) throw ConfigError("unknown framework '" + s + "'");
  return it->second;
}

inline DropoutPosition parse_position(const std::string& s) {
  if (s == "encoder_decoder") return DropoutPosition::encoder_decoder;
  if (s == "decoder_classifier") return DropoutPosition::decoder_classifier;
  throw ConfigError("unknown dropout position '" + s + "'");
}

struct AugmentConfig {
  double scale_min = 0.5;
  double scale_max = 2.0;
  double flip_p = 0.5;
  double p_jitter = 0.8;
  double brightness = 0.5;
  double contrast = 0.5;
  double saturation = 0.5;
  double hue = 0.25;
  double p_gray = 0.2;
  double p_blur = 0.5;
  double blur_sigma_min = 0.1;
  double blur_sigma_max = 2.0;
  double cutmix_p = 0.5;
  double cutmix_area_min = 0.25;
  double cutmix_area_max = 0.5;
  friend bool operator==(const AugmentConfig&, const AugmentConfig&) = default;
};

struct PerturbConfig {
  double dropout_p = 0.5;
  DropoutPosition position = DropoutPosition::encoder_decoder;
  bool exact_half = false;
  bool share_across_levels = false;
  friend bool operator==(const PerturbConfig&, const PerturbConfig&) = default;
};

struct TeacherConfig {
  double ema_cap = 0.996;
  bool use_student = false;
  friend bool operator==(const TeacherConfig&, const TeacherConfig&) = default;
};

struct LossConfig {
  bool use_ohem = false;
  double ohem_thresh = 0.7;
  double ohem_min_kept_fraction = 1.0 / 16.0;
  bool normalize_by_valid = false;
  friend bool operator==(const LossConfig&, const LossConfig&) = default;
};

struct ModelConfig {
  std::vector<int> widths = {16, 32, 64};
  int decoder_width = 16;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct DataConfig {
  std::string kind = "synthetic";  // "synthetic" | "disk"
  std::string root;                // disk: directory with images/ and masks/
  std::string eval_root;           // disk: held-out directory (optional)
  std::string manifest;            // optional pre-computed split manifest path
  int num_samples = 200;
  int eval_samples = 100;
  int image_size = 64;
  int num_classes = 3;
  int shapes_min = 1;
  int shapes_max = 3;
  double noise = 0.08;
  std::uint64_t seed = 7;
  std::string split_ratio = "1/16";
  std::int32_t ignore_value = kIgnoreValue;
  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct EvalConfig {
  std::string mode = "whole";  // "whole" | "sliding"
  int window = 64;
  int stride = 0;              // 0: two thirds of the window
  int every_epochs = 1;
  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

struct EngineConfig {
  bool deterministic = true;
  bool log_agreement = true;
  double weight_decay = 0.01;
  friend bool operator==(const EngineConfig&, const EngineConfig&) = default;
};

struct TrainConfig {
  Framework framework = Framework::unimatch_v2;
  double tau = 0.95;
  double lambda_u = 1.0;
  int batch_labeled = 8;
  int batch_unlabeled = 8;
  int crop_size = 64;
  int epochs = 40;
  double lr = 5e-6;               // encoder base learning rate
  double decoder_lr_mult = 40.0;  // decoder base = lr * decoder_lr_mult
  double lr_power = 0.9;
  bool freeze_encoder = false;
  std::uint64_t seed = 0;

  AugmentConfig augment;
  PerturbConfig perturb;
  TeacherConfig teacher;
  LossConfig loss;
  ModelConfig model;
  DataConfig data;
  EvalConfig eval;
  EngineConfig engine;

  /// Input spatial dims must be multiples of this.
  int granularity() const { return 1 << static_cast<int>(model.widths.size()); }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline void to_json(json& j, const TrainConfig& c) {
  const auto& a = c.augment;
  j = json{
      {"schema_version", kSchemaVersion},
      {"framework", c.framework},
      {"tau", c.tau},
      {"lambda_u", c.lambda_u},
      {"batch_labeled", c.batch_labeled},
      {"batch_unlabeled", c.batch_unlabeled},
      {"crop_size", c.crop_size},
      {"epochs", c.epochs},
      {"lr", c.lr},
      {"decoder_lr_mult", c.decoder_lr_mult},
      {"lr_power", c.lr_power},
      {"freeze_encoder", c.freeze_encoder},
      {"seed", c.seed},
      {"augment",
       {{"scale_min", a.scale_min},
        {"scale_max", a.scale_max},
        {"flip_p", a.flip_p},
        {"p_jitter", a.p_jitter},
        {"brightness", a.brightness},
        {"contrast", a.contrast},
        {"saturation", a.saturation},
        {"hue", a.hue},
        {"p_gray", a.p_gray},
        {"p_blur", a.p_blur},
        {"blur_sigma_min", a.blur_sigma_min},
        {"blur_sigma_max", a.blur_sigma_max},
        {"cutmix_p", a.cutmix_p},
        {"cutmix_area_min", a.cutmix_area_min},
        {"cutmix_area_max", a.cutmix_area_max}}},
      {"perturb",
       {{"dropout_p", c.perturb.dropout_p},
        {"position", c.perturb.position},
        {"exact_half", c.perturb.exact_half},
        {"share_across_levels", c.perturb.share_across_levels}}},
      {"teacher", {{"ema_cap", c.teacher.ema_cap}, {"use_student", c.teacher.use_student}}},
      {"loss",
       {{"use_ohem", c.loss.use_ohem},
        {"ohem_thresh", c.loss.ohem_thresh},
        {"ohem_min_kept_fraction", c.loss.ohem_min_kept_fraction},
        {"normalize_by_valid", c.loss.normalize_by_valid}}},
      {"model", {{"widths", c.model.widths}, {"decoder_width", c.model.decoder_width}}},
      {"data",
       {{"kind", c.data.kind},
        {"root", c.data.root},
        {"eval_root", c.data.eval_root},
        {"manifest", c.data.manifest},
        {"num_samples", c.data.num_samples},
        {"eval_samples", c.data.eval_samples},
        {"image_size", c.data.image_size},
        {"num_classes", c.data.num_classes},
        {"shapes_min", c.data.shapes_min},
        {"shapes_max", c.data.shapes_max},
        {"noise", c.data.noise},
        {"seed", c.data.seed},
        {"split_ratio", c.data.split_ratio},
        {"ignore_value", c.data.ignore_value}}},
      {"eval",
       {{"mode", c.eval.mode},
        {"window", c.eval.window},
        {"stride", c.eval.stride},
        {"every_epochs", c.eval.every_epochs}}},
      {"engine",
       {{"deterministic", c.engine.deterministic},
        {"log_agreement", c.engine.log_agreement},
        {"weight_decay", c.engine.weight_decay}}},
  };
}

inline void from_json(const json& j, TrainConfig& c) {
  if (j.value("schema_version", kSchemaVersion) != kSchemaVersion)
    throw ConfigError("train config: unsupported schema_version");
  c.framework = parse_framework(j.at("framework").get<std::string>());
  j.at("tau").get_to(c.tau);
  j.at("lambda_u").get_to(c.lambda_u);
  j.at("batch_labeled").get_to(c.batch_labeled);
  j.at("batch_unlabeled").get_to(c.batch_unlabeled);
  j.at("crop_size").get_to(c.crop_size);
  j.at("epochs").get_to(c.epochs);
  j.at("lr").get_to(c.lr);
  j.at("decoder_lr_mult").get_to(c.decoder_lr_mult);
  j.at("lr_power").get_to(c.lr_power);
  j.at("freeze_encoder").get_to(c.freeze_encoder);
  j.at("seed").get_to(c.seed);

  const auto& a = j.at("augment");
  auto& ca = c.augment;
  a.at("scale_min").get_to(ca.scale_min);
  a.at("scale_max").get_to(ca.scale_max);
  a.at("flip_p").get_to(ca.flip_p);
  a.at("p_jitter").get_to(ca.p_jitter);
  a.at("brightness").get_to(ca.brightness);
  a.at("contrast").get_to(ca.contrast);
  a.at("saturation").get_to(ca.saturation);
  a.at("hue").get_to(ca.hue);
  a.at("p_gray").get_to(ca.p_gray);
  a.at("p_blur").get_to(ca.p_blur);
  a.at("blur_sigma_min").get_to(ca.blur_sigma_min);
  a.at("blur_sigma_max").get_to(ca.blur_sigma_max);
  a.at("cutmix_p").get_to(ca.cutmix_p);
  a.at("cutmix_area_min").get_to(ca.cutmix_area_min);
  a.at("cutmix_area_max").get_to(ca.cutmix_area_max);

  const auto& p = j.at("perturb");
  p.at("dropout_p").get_to(c.perturb.dropout_p);
  c.perturb.position = parse_position(p.at("position").get<std::string>());
  p.at("exact_half").get_to(c.perturb.exact_half);
  p.at("share_across_levels").get_to(c.perturb.share_across_levels);

  const auto& t = j.at("teacher");
  t.at("ema_cap").get_to(c.teacher.ema_cap);
  t.at("use_student").get_to(c.teacher.use_student);

  const auto& l = j.at("loss");
  l.at("use_ohem").get_to(c.loss.use_ohem);
  l.at("ohem_thresh").get_to(c.loss.ohem_thresh);
  l.at("ohem_min_kept_fraction").get_to(c.loss.ohem_min_kept_fraction);
  l.at("normalize_by_valid").get_to(c.loss.normalize_by_valid);

  const auto& m = j.at("model");
  m.at("widths").get_to(c.model.widths);
  m.at("decoder_width").get_to(c.model.decoder_width);

  const auto& d = j.at("data");
  d.at("kind").get_to(c.data.kind);
  d.at("root").get_to(c.data.root);
  d.at("eval_root").get_to(c.data.eval_root);
  d.at("manifest").get_to(c.data.manifest);
  d.at("num_samples").get_to(c.data.num_samples);
  d.at("eval_samples").get_to(c.data.eval_samples);
  d.at("image_size").get_to(c.data.image_size);
  d.at("num_classes").get_to(c.data.num_classes);
  d.at("shapes_min").get_to(c.data.shapes_min);
  d.at("shapes_max").get_to(c.data.shapes_max);
  d.at("noise").get_to(c.data.noise);
  d.at("seed").get_to(c.data.seed);
  d.at("split_ratio").get_to(c.data.split_ratio);
  d.at("ignore_value").get_to(c.data.ignore_value);

  const auto& e = j.at("eval");
  e.at("mode").get_to(c.eval.mode);
  e.at("window").get_to(c.eval.window);
  e.at("stride").get_to(c.eval.stride);
  e.at("every_epochs").get_to(c.eval.every_epochs);

  const auto& g = j.at("engine");
  g.at("deterministic").get_to(c.engine.deterministic);
  g.at("log_agreement").get_to(c.engine.log_agreement);
  g.at("weight_decay").get_to(c.engine.weight_decay);
}

/// Reports every violated invariant as "<field> <rule>". Never throws.
inline std::vector<std::string> validate_config(const TrainConfig& c) {
  std::vector<std::string> v;
  auto rule = [&v](bool ok, const char* msg) {
    if (!ok) v.emplace_back(msg);
  };
  rule(c.tau >= 0.0 && c.tau <= 1.0, "tau out of [0,1]");
  rule(c.lambda_u >= 0.0, "lambda_u must be >= 0");
  rule(c.batch_labeled >= 1, "batch_labeled must be >= 1");
  rule(c.batch_unlabeled >= 1, "batch_unlabeled must be >= 1");
  rule(c.epochs >= 1, "epochs must be >= 1");
  rule(c.lr > 0.0, "lr must be > 0");
  rule(c.decoder_lr_mult > 0.0, "decoder_lr_mult must be > 0");
  rule(c.lr_power > 0.0, "lr_power must be > 0");
  rule(c.teacher.ema_cap > 0.0 && c.teacher.ema_cap < 1.0, "teacher.ema_cap out of (0,1)");
  rule(c.perturb.dropout_p >= 0.0 && c.perturb.dropout_p < 1.0, "perturb.dropout_p out of [0,1)");
  rule(!c.model.widths.empty(), "model.widths must be non-empty");
  bool widths_ok = c.model.decoder_width >= 4;
  for (int w : c.model.widths) widths_ok = widths_ok && w >= 4;
  rule(widths_ok, "model.widths must all be >= 4");
  rule(c.crop_size > 0 && c.crop_size % c.granularity() == 0,
       "crop_size must be a positive multiple of the model granularity");
  rule(c.augment.scale_min > 0.0 && c.augment.scale_min <= c.augment.scale_max,
       "augment.scale range invalid");
  rule(c.augment.cutmix_area_min > 0.0 && c.augment.cutmix_area_min <= c.augment.cutmix_area_max &&
           c.augment.cutmix_area_max <= 1.0,
       "augment.cutmix_area range invalid");
  rule(c.loss.ohem_thresh > 0.0 && c.loss.ohem_thresh <= 1.0, "loss.ohem_thresh out of (0,1]");
  rule(c.loss.ohem_min_kept_fraction > 0.0 && c.loss.ohem_min_kept_fraction < 1.0,
       "loss.ohem_min_kept_fraction out of (0,1)");
  rule(c.data.num_classes >= 2, "data.num_classes must be >= 2");
  rule(c.data.kind == "synthetic" || c.data.kind == "disk", "data.kind must be synthetic or disk");
  rule(c.eval.mode == "whole" || c.eval.mode == "sliding", "eval.mode must be whole or sliding");
  rule(c.eval.every_epochs >= 1, "eval.every_epochs must be >= 1");
  return v;
}

// ---------------------------------------------------------------------------
// Dotted-key overrides: "augment.p_gray=0.1". Unknown keys are errors.

inline json parse_override_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error&) {
    return json(text);
  }
}

inline void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  json value = parse_override_value(assignment.substr(eq + 1));

  json::json_pointer ptr;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    ptr /= key.substr(start, dot - start);
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (!doc.contains(ptr) || doc.at(ptr).is_object())
    throw ConfigError("unknown config key '" + key + "'");
  json& slot = doc.at(ptr);
  // "1/16" style strings stay strings; numeric slots accept numbers only.
  if (slot.is_string() && !value.is_string()) value = json(assignment.substr(eq + 1));
  if (slot.is_number() && !value.is_number())
    throw ConfigError("config key '" + key + "' expects a number");
  if (slot.is_boolean() && !value.is_boolean())
    throw ConfigError("config key '" + key + "' expects true/false");
  slot = std::move(value);
}

/// Recursively overlay `patch` onto `base`, rejecting keys `base` lacks.
inline void merge_known(json& base, const json& patch, const std::string& prefix = "") {
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    if (base[it.key()].is_object() && it.value().is_object())
      merge_known(base[it.key()], it.value(), key);
    else
      base[it.key()] = it.value();
  }
}

/// Defaults, overlaid with a (possibly partial) document, then overrides.
inline TrainConfig resolve_config(const json& file_doc, const std::vector<std::string>& overrides) {
  json doc = TrainConfig{};
  if (!file_doc.is_null()) merge_known(doc, file_doc);
  for (const auto& o : overrides) apply_override(doc, o);
  try {
    return doc.get<TrainConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
}

inline std::uint64_t config_hash(const TrainConfig& c) { return fnv1a(json(c).dump()); }

}  // namespace unimatch
