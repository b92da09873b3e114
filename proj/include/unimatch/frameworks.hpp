#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "unimatch/augment.hpp"
#include "unimatch/datamodel.hpp"
#include "unimatch/loss.hpp"
#include "unimatch/model.hpp"
#include "unimatch/perturb.hpp"
#include "unimatch/teacher.hpp"

namespace unimatch {

struct LabeledBatch {
  ImageBatch images;  // normalized (B,3,H,W)
  LabelMask labels;   // (B,H,W)
};

/// One unlabeled batch: the weak view and two strong views derived from it.
/// Strong views are normalized and already CutMixed with `mix1` / `mix2`.
struct UnlabeledBatch {
  ImageBatch weak;
  ImageBatch strong1, strong2;
  CutMixRecord mix1, mix2;
  ByteTensor ignore;  // (B,H,W) weak-view padding, or empty

  std::size_t size() const { return weak.data.dim(0); }
};

/// Test seams. Forced pairs replace sampled complementary masks (V2) or the
/// two independent masks of variant c (mask for stream 1, complement for
/// stream 2).
struct StepHooks {
  std::optional<std::vector<ComplementaryPair>> forced_pairs;
};

struct StepContext {
  const TrainConfig& cfg;
  Rng& dropout_rng;
  const StepHooks* hooks = nullptr;
};

struct StepDiagnostics {
  double kept_fraction = 0.0;
  std::vector<double> stream_losses;
  double agreement = -1.0;  // -1 when not computed
};

/// Targets actually fed to each unlabeled stream, exposed for inspection.
struct StreamTargets {
  PseudoLabel shared;  // from the teacher on the weak view, before mixing
  std::vector<PseudoLabel> per_stream;
};

struct StepOutput {
  LossBreakdown loss;
  StepDiagnostics diagnostics;
  StreamTargets targets;
};

// ---------------------------------------------------------------------------
// Stream forward/backward with an optional feature perturbation.

/// Maps unperturbed features to perturbed ones and records the per-level
/// channel scales used, so the backward pass can apply them again.
using Perturbation = std::function<FeatureVolume(const FeatureVolume&, std::vector<ChannelScales>&)>;

template <typename Model>
struct StreamCache {
  EncoderCache enc;
  DecoderCache dec;
  DropoutSite site = DropoutSite::encoder_output;
  std::vector<ChannelScales> scales;  // empty: unperturbed
};

template <typename Model>
Logits forward_stream(const Model& model, const FloatTensor& x, DropoutSite site, const Perturbation& perturb,
                      StreamCache<Model>& c) {
  c.site = site;
  c.scales.clear();
  FeatureVolume fv = model.encoder.forward(x, &c.enc);
  if (perturb && site == DropoutSite::encoder_output) fv = perturb(fv, c.scales);
  FloatTensor act = model.decoder.features(fv, &c.dec);
  if (perturb && site == DropoutSite::decoder_activation) {
    FeatureVolume single;
    single.levels.push_back(std::move(act));
    act = std::move(perturb(single, c.scales).levels.front());
  }
  return model.decoder.classify(act, x.dim(2), x.dim(3), &c.dec);
}

template <typename Model>
void backward_stream(Model& model, StreamCache<Model>& c, const Logits& dlogits) {
  FloatTensor dact = model.decoder.backward_classify(c.dec, dlogits);
  if (!c.scales.empty() && c.site == DropoutSite::decoder_activation)
    dact = apply_channel_scales(dact, c.scales.front());
  FeatureVolume dfv = model.decoder.backward_features(c.dec, std::move(dact));
  if (!c.scales.empty() && c.site == DropoutSite::encoder_output)
    for (std::size_t l = 0; l < dfv.levels.size(); ++l) dfv.levels[l] = apply_channel_scales(dfv.levels[l], c.scales[l]);
  model.encoder.backward(c.enc, dfv);
}

inline bool all_zero(const FloatTensor& t) {
  for (float v : t.values())
    if (v != 0.0f) return false;
  return true;
}

/// Independent channel dropout with probability p.
inline Perturbation independent_dropout(double p, Rng& rng) {
  return [p, &rng](const FeatureVolume& fv, std::vector<ChannelScales>& scales) {
    return channel_dropout(fv, p, rng, &scales);
  };
}

/// Complementary dropout on a fused (2B, ...) volume: rows [0,B) get 2M,
/// rows [B,2B) get 2(1-M). `pairs_out` receives the pairs used.
inline Perturbation fused_complementary(Rng& rng, const PerturbConfig& pc, const StepHooks* hooks,
                                        std::vector<ComplementaryPair>* pairs_out) {
  return [&rng, pc, hooks, pairs_out](const FeatureVolume& fv, std::vector<ChannelScales>& scales) {
    require(!fv.perturbed, "complementary dropout: features were already perturbed in this forward");
    require(fv.levels.front().dim(0) % 2 == 0, "complementary dropout: fused batch must be even");
    FeatureVolume half;
    const std::size_t B = fv.levels.front().dim(0) / 2;
    for (const auto& l : fv.levels) half.levels.push_back(slice_batch(l, 0, B));
    std::vector<ComplementaryPair> pairs;
    if (hooks && hooks->forced_pairs)
      pairs = *hooks->forced_pairs;
    else
      pairs = sample_level_pairs(half, rng, pc.exact_half, pc.share_across_levels);
    require(pairs.size() == fv.levels.size(), "complementary dropout: one mask pair per level");
    FeatureVolume out;
    out.perturbed = true;
    scales.clear();
    for (std::size_t l = 0; l < fv.levels.size(); ++l) {
      scales.push_back(fused_complementary_scales(pairs[l]));
      out.levels.push_back(apply_channel_scales(fv.levels[l], scales.back()));
    }
    if (pairs_out) *pairs_out = std::move(pairs);
    return out;
  };
}

/// Variant c with forced pairs: the two streams take M and 1-M as two
/// "independent" keep masks, rescaled by 1/(1-p).
inline Perturbation fused_forced_independent(double p, const std::vector<ComplementaryPair>& pairs) {
  return [p, pairs](const FeatureVolume& fv, std::vector<ChannelScales>& scales) {
    require(!fv.perturbed, "channel_dropout: features were already perturbed in this forward");
    require(pairs.size() == fv.levels.size(), "forced masks: one pair per level");
    const float s = static_cast<float>(1.0 / (1.0 - p));
    FeatureVolume out;
    out.perturbed = true;
    scales.clear();
    for (std::size_t l = 0; l < fv.levels.size(); ++l) {
      scales.push_back(concat_batch(mask_scales(pairs[l].mask, s), mask_scales(pairs[l].complement, s)));
      out.levels.push_back(apply_channel_scales(fv.levels[l], scales.back()));
    }
    return out;
  };
}

// ---------------------------------------------------------------------------

namespace detail {

/// Supervised part: forward, loss, backward into the student.
template <typename Model>
double supervised_part(Model& student, const LabeledBatch& bl, const TrainConfig& cfg) {
  require(bl.images.normalized, "labeled batch must be normalized");
  StreamCache<Model> c;
  const Logits logits = forward_stream(student, bl.images.data, DropoutSite::encoder_output, nullptr, c);
  FloatTensor grad(logits.shape());
  const float ls = cfg.loss.use_ohem
                       ? ohem_supervised_loss(logits, bl.labels, cfg.loss.ohem_thresh,
                                              cfg.loss.ohem_min_kept_fraction, &grad)
                       : supervised_loss(logits, bl.labels, &grad);
  backward_stream(student, c, grad);
  return ls;
}

inline PseudoLabel teacher_targets(const Logits& teacher_logits, const UnlabeledBatch& bu, double tau) {
  PseudoLabel pl = make_pseudo_labels(teacher_logits, tau);
  if (!bu.ignore.empty()) {
    require_same_shape(bu.ignore, pl.valid, "unlabeled ignore mask");
    pl.ignore = bu.ignore;
  }
  return pl;
}

/// Fraction of non-ignore weak-view pixels where teacher and student argmax agree.
template <typename Model>
double agreement(const Model& student, const UnlabeledBatch& bu, const PseudoLabel& teacher_pl) {
  const Logits s = student.forward(bu.weak.data);
  const std::size_t B = s.dim(0), K = s.dim(1), P = s.dim(2) * s.dim(3);
  std::size_t same = 0, total = 0;
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t p = 0; p < P; ++p) {
      const std::size_t i = n * P + p;
      if (teacher_pl.ignored(i)) continue;
      std::size_t best = 0;
      for (std::size_t k = 1; k < K; ++k)
        if (s[(n * K + k) * P + p] > s[(n * K + best) * P + p]) best = k;
      same += static_cast<std::int32_t>(best) == teacher_pl.hard_labels[i];
      ++total;
    }
  return total ? static_cast<double>(same) / static_cast<double>(total) : 0.0;
}

/// Masked loss on one stream; backprops scale * dL/dlogits when nonzero.
template <typename Model>
UnsupLoss<float> unsup_stream(Model& student, StreamCache<Model>& c, const Logits& logits,
                              const PseudoLabel& pl, float scale, const TrainConfig& cfg) {
  FloatTensor grad(logits.shape());
  auto r = masked_unsup_loss(logits, pl, &grad, scale, cfg.loss.normalize_by_valid);
  if (scale != 0.0f && !all_zero(grad)) backward_stream(student, c, grad);
  return r;
}

/// Fused dual-stream forward/backward: concat(s1, s2), one pass, loss
/// (l1 + l2) / 2.
template <typename Model>
std::pair<UnsupLoss<float>, UnsupLoss<float>> fused_dual(Model& student, const UnlabeledBatch& bu,
                                                         const PseudoLabel& pl1, const PseudoLabel& pl2,
                                                         DropoutSite site, const Perturbation& perturb,
                                                         const TrainConfig& cfg) {
  const std::size_t B = bu.size();
  StreamCache<Model> c;
  const Logits fused =
      forward_stream(student, concat_batch(bu.strong1.data, bu.strong2.data), site, perturb, c);
  const Logits p1 = slice_batch(fused, 0, B), p2 = slice_batch(fused, B, 2 * B);
  FloatTensor g1(p1.shape()), g2(p2.shape());
  const float scale = static_cast<float>(cfg.lambda_u);
  auto r1 = masked_unsup_loss(p1, pl1, &g1, 0.5f * scale, cfg.loss.normalize_by_valid);
  auto r2 = masked_unsup_loss(p2, pl2, &g2, 0.5f * scale, cfg.loss.normalize_by_valid);
  FloatTensor g = concat_batch(g1, g2);
  if (scale != 0.0f && !all_zero(g)) backward_stream(student, c, g);
  return {r1, r2};
}

inline void finish(StepOutput& out, double ls, double lu, double lambda_u) {
  out.loss.supervised = ls;
  out.loss.unsupervised = lu;
  out.loss.total = ls + lambda_u * lu;
  out.loss.kept_fraction = out.diagnostics.kept_fraction;
}

inline double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace detail

/// Gradients accumulate into `student`; callers zero them beforehand.
template <typename Model>
StepOutput labeled_only_step(const LabeledBatch& bl, Model& student) {
  StepOutput out;
  const TrainConfig cfg;
  detail::finish(out, detail::supervised_part(student, bl, cfg), 0.0, 0.0);
  return out;
}

template <typename Model>
StepOutput labeled_only_step(const LabeledBatch& bl, Model& student, const TrainConfig& cfg) {
  StepOutput out;
  detail::finish(out, detail::supervised_part(student, bl, cfg), 0.0, 0.0);
  return out;
}

template <typename Model>
StepOutput fixmatch_step(const LabeledBatch& bl, const UnlabeledBatch& bu, Model& student, const Model& teacher,
                         StepContext& ctx) {
  const auto& cfg = ctx.cfg;
  StepOutput out;
  const double ls = detail::supervised_part(student, bl, cfg);
  out.targets.shared = detail::teacher_targets(teacher.forward(bu.weak.data), bu, cfg.tau);
  out.targets.per_stream = {mix_pseudo_labels(out.targets.shared, bu.mix1)};
  StreamCache<Model> c;
  const Logits p = forward_stream(student, bu.strong1.data, DropoutSite::encoder_output, nullptr, c);
  const auto r = detail::unsup_stream(student, c, p, out.targets.per_stream[0], static_cast<float>(cfg.lambda_u), cfg);
  out.diagnostics.stream_losses = {r.loss};
  out.diagnostics.kept_fraction = r.kept_fraction;
  if (cfg.engine.log_agreement) out.diagnostics.agreement = detail::agreement(student, bu, out.targets.shared);
  detail::finish(out, ls, r.loss, cfg.lambda_u);
  return out;
}

/// Three streams: feature-perturbed weak view (weight 1/2) and two strong
/// image views (1/4 each), each run as its own forward.
template <typename Model>
StepOutput unimatch_v1_step(const LabeledBatch& bl, const UnlabeledBatch& bu, Model& student,
                            const Model& teacher, StepContext& ctx) {
  const auto& cfg = ctx.cfg;
  StepOutput out;
  const double ls = detail::supervised_part(student, bl, cfg);
  out.targets.shared = detail::teacher_targets(teacher.forward(bu.weak.data), bu, cfg.tau);
  out.targets.per_stream = {out.targets.shared, mix_pseudo_labels(out.targets.shared, bu.mix1),
                            mix_pseudo_labels(out.targets.shared, bu.mix2)};
  const DropoutSite site = position_dispatch(cfg.perturb.position);
  const float lam = static_cast<float>(cfg.lambda_u);

  StreamCache<Model> cf, c1, c2;
  const Logits pf = forward_stream(student, bu.weak.data, site, independent_dropout(cfg.perturb.dropout_p, ctx.dropout_rng), cf);
  const auto rf = detail::unsup_stream(student, cf, pf, out.targets.per_stream[0], 0.5f * lam, cfg);
  const Logits p1 = forward_stream(student, bu.strong1.data, site, nullptr, c1);
  const auto r1 = detail::unsup_stream(student, c1, p1, out.targets.per_stream[1], 0.25f * lam, cfg);
  const Logits p2 = forward_stream(student, bu.strong2.data, site, nullptr, c2);
  const auto r2 = detail::unsup_stream(student, c2, p2, out.targets.per_stream[2], 0.25f * lam, cfg);

  out.diagnostics.stream_losses = {rf.loss, r1.loss, r2.loss};
  out.diagnostics.kept_fraction = detail::mean({rf.kept_fraction, r1.kept_fraction, r2.kept_fraction});
  if (cfg.engine.log_agreement) out.diagnostics.agreement = detail::agreement(student, bu, out.targets.shared);
  detail::finish(out, ls, 0.5 * rf.loss + 0.25 * r1.loss + 0.25 * r2.loss, cfg.lambda_u);
  return out;
}

/// Dual strong streams in one fused forward, complementary channel dropout
/// on the encoder features, loss (l1 + l2) / 2.
template <typename Model>
StepOutput unimatch_v2_step(const LabeledBatch& bl, const UnlabeledBatch& bu, Model& student,
                            const Model& teacher, StepContext& ctx,
                            std::vector<ComplementaryPair>* pairs_used = nullptr) {
  const auto& cfg = ctx.cfg;
  StepOutput out;
  const double ls = detail::supervised_part(student, bl, cfg);
  out.targets.shared = detail::teacher_targets(teacher.forward(bu.weak.data), bu, cfg.tau);
  out.targets.per_stream = {mix_pseudo_labels(out.targets.shared, bu.mix1),
                            mix_pseudo_labels(out.targets.shared, bu.mix2)};
  const auto [r1, r2] = detail::fused_dual(student, bu, out.targets.per_stream[0], out.targets.per_stream[1],
                                           position_dispatch(cfg.perturb.position),
                                           fused_complementary(ctx.dropout_rng, cfg.perturb, ctx.hooks, pairs_used), cfg);
  out.diagnostics.stream_losses = {r1.loss, r2.loss};
  out.diagnostics.kept_fraction = detail::mean({r1.kept_fraction, r2.kept_fraction});
  if (cfg.engine.log_agreement) out.diagnostics.agreement = detail::agreement(student, bu, out.targets.shared);
  detail::finish(out, ls, (r1.loss + r2.loss) / 2.0, cfg.lambda_u);
  return out;
}

/// Stream-choice variants: (a) one strong view with independent dropout;
/// (b) two strong views, no feature perturbation; (c) two strong views
/// with two independent dropouts.
template <typename Model>
StepOutput variant_step(char kind, const LabeledBatch& bl, const UnlabeledBatch& bu, Model& student,
                        const Model& teacher, StepContext& ctx) {
  if (kind != 'a' && kind != 'b' && kind != 'c') throw ConfigError(std::string("unknown variant '") + kind + "'");
  const auto& cfg = ctx.cfg;
  StepOutput out;
  const double ls = detail::supervised_part(student, bl, cfg);
  out.targets.shared = detail::teacher_targets(teacher.forward(bu.weak.data), bu, cfg.tau);
  const DropoutSite site = position_dispatch(cfg.perturb.position);
  double lu = 0.0;
  if (kind == 'a') {
    out.targets.per_stream = {mix_pseudo_labels(out.targets.shared, bu.mix1)};
    StreamCache<Model> c;
    const Logits p =
        forward_stream(student, bu.strong1.data, site, independent_dropout(cfg.perturb.dropout_p, ctx.dropout_rng), c);
    const auto r = detail::unsup_stream(student, c, p, out.targets.per_stream[0], static_cast<float>(cfg.lambda_u), cfg);
    out.diagnostics.stream_losses = {r.loss};
    out.diagnostics.kept_fraction = r.kept_fraction;
    lu = r.loss;
  } else {
    out.targets.per_stream = {mix_pseudo_labels(out.targets.shared, bu.mix1),
                              mix_pseudo_labels(out.targets.shared, bu.mix2)};
    Perturbation perturb;
    if (kind == 'c')
      perturb = ctx.hooks && ctx.hooks->forced_pairs
                    ? fused_forced_independent(cfg.perturb.dropout_p, *ctx.hooks->forced_pairs)
                    : independent_dropout(cfg.perturb.dropout_p, ctx.dropout_rng);
    const auto [r1, r2] =
        detail::fused_dual(student, bu, out.targets.per_stream[0], out.targets.per_stream[1], site, perturb, cfg);
    out.diagnostics.stream_losses = {r1.loss, r2.loss};
    out.diagnostics.kept_fraction = detail::mean({r1.kept_fraction, r2.kept_fraction});
    lu = (r1.loss + r2.loss) / 2.0;
  }
  if (cfg.engine.log_agreement) out.diagnostics.agreement = detail::agreement(student, bu, out.targets.shared);
  detail::finish(out, ls, lu, cfg.lambda_u);
  return out;
}

/// Dispatches on cfg.framework. `bu` may be null for labeled_only.
template <typename Model>
StepOutput framework_step(const LabeledBatch& bl, const UnlabeledBatch* bu, Model& student, const Model& teacher,
                          StepContext& ctx) {
  const Framework f = ctx.cfg.framework;
  if (f == Framework::labeled_only) return labeled_only_step(bl, student, ctx.cfg);
  require(bu != nullptr, "framework step needs an unlabeled batch");
  switch (f) {
    case Framework::fixmatch: return fixmatch_step(bl, *bu, student, teacher, ctx);
    case Framework::unimatch_v1: return unimatch_v1_step(bl, *bu, student, teacher, ctx);
    case Framework::unimatch_v2: return unimatch_v2_step(bl, *bu, student, teacher, ctx);
    case Framework::variant_a: return variant_step('a', bl, *bu, student, teacher, ctx);
    case Framework::variant_b: return variant_step('b', bl, *bu, student, teacher, ctx);
    case Framework::variant_c: return variant_step('c', bl, *bu, student, teacher, ctx);
    default: break;
  }
  throw ConfigError("unsupported framework");
}

}  // namespace unimatch
