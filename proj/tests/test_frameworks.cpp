#include <gtest/gtest.h>

#include "support.hpp"

using namespace unimatch;
using namespace testing_support;

namespace {

struct Fixture {
  ToyModel student = tiny_model(11);
  ToyModel teacher = tiny_model(12);
  LabeledBatch bl;
  UnlabeledBatch bu;

  explicit Fixture(std::uint64_t seed = 1, bool cutmix = true) {
    Rng rng(seed);
    bl = random_labeled(rng, 2, 8, 3);
    bu = random_unlabeled(rng, 2, 8, cutmix);
  }
};

TrainConfig base_cfg(Framework f, double tau = 0.0) {
  TrainConfig c;
  c.framework = f;
  c.tau = tau;
  c.engine.log_agreement = false;
  return c;
}

std::vector<FloatTensor> step_grads(Fixture& fx, const TrainConfig& cfg, std::uint64_t dropout_seed = 3,
                                    const StepHooks* hooks = nullptr, StepOutput* out = nullptr) {
  zero_grad(fx.student);
  Rng rng(dropout_seed);
  StepContext ctx{cfg, rng, hooks};
  auto o = framework_step(fx.bl, &fx.bu, fx.student, fx.teacher, ctx);
  if (out) *out = std::move(o);
  return grads_of(fx.student);
}

}  // namespace

TEST(Reductions, LambdaZeroMatchesLabeledOnly) {
  for (Framework f : {Framework::fixmatch, Framework::unimatch_v1, Framework::unimatch_v2, Framework::variant_a,
                      Framework::variant_b, Framework::variant_c}) {
    Fixture fx;
    auto cfg = base_cfg(f);
    cfg.lambda_u = 0.0;
    StepOutput out;
    const auto g = step_grads(fx, cfg, 3, nullptr, &out);
    const auto ref = step_grads(fx, base_cfg(Framework::labeled_only));
    EXPECT_EQ(max_abs_diff(g, ref), 0.0) << to_string(f);
    EXPECT_DOUBLE_EQ(out.loss.total, out.loss.supervised);
  }
}

TEST(Reductions, NoConfidentPixelsMatchesLabeledOnly) {
  for (Framework f : {Framework::fixmatch, Framework::unimatch_v1, Framework::unimatch_v2}) {
    Fixture fx;
    StepOutput out;
    const auto g = step_grads(fx, base_cfg(f, 1.01), 3, nullptr, &out);
    EXPECT_EQ(max_abs_diff(g, step_grads(fx, base_cfg(Framework::labeled_only))), 0.0) << to_string(f);
    EXPECT_EQ(out.loss.unsupervised, 0.0);
    EXPECT_EQ(out.diagnostics.kept_fraction, 0.0);
  }
}

TEST(Teacher, ReceivesNoGradientAndStaysFixed) {
  for (Framework f : {Framework::fixmatch, Framework::unimatch_v1, Framework::unimatch_v2}) {
    Fixture fx;
    const ToyModel before = fx.teacher;
    step_grads(fx, base_cfg(f));
    const auto tp = std::as_const(fx.teacher).parameters();
    const auto bp = before.parameters();
    for (std::size_t i = 0; i < tp.size(); ++i) {
      EXPECT_EQ(tp[i]->value, bp[i]->value);
      for (float v : tp[i]->grad.values()) ASSERT_EQ(v, 0.0f);
    }
  }
}

TEST(Targets, StreamsShareOnePreMixTarget) {
  Fixture fx;
  StepOutput out;
  step_grads(fx, base_cfg(Framework::unimatch_v2, 0.5), 3, nullptr, &out);
  const auto& shared = out.targets.shared;
  const auto expected = make_pseudo_labels(fx.teacher.forward(fx.bu.weak.data), 0.5);
  EXPECT_EQ(shared.hard_labels, expected.hard_labels);
  EXPECT_EQ(shared.confidence, expected.confidence);
  ASSERT_EQ(out.targets.per_stream.size(), 2u);
  EXPECT_EQ(out.targets.per_stream[0].hard_labels, mix_pseudo_labels(shared, fx.bu.mix1).hard_labels);
  EXPECT_EQ(out.targets.per_stream[1].hard_labels, mix_pseudo_labels(shared, fx.bu.mix2).hard_labels);
}

TEST(UniMatchV1, StreamWeights) {
  Fixture fx;
  StepOutput out;
  step_grads(fx, base_cfg(Framework::unimatch_v1, 0.3), 3, nullptr, &out);
  const auto& s = out.diagnostics.stream_losses;
  ASSERT_EQ(s.size(), 3u);
  EXPECT_NEAR(out.loss.unsupervised, 0.5 * s[0] + 0.25 * s[1] + 0.25 * s[2], 1e-6);
  EXPECT_NEAR(out.loss.total, out.loss.supervised + out.loss.unsupervised, 1e-6);
}

TEST(UniMatchV2, FusedForwardMatchesSeparateStreams) {
  Fixture fx;
  auto cfg = base_cfg(Framework::unimatch_v2, 0.3);
  cfg.lambda_u = 2.0;
  StepOutput out;
  std::vector<ComplementaryPair> pairs;
  zero_grad(fx.student);
  Rng rng(3);
  StepContext ctx{cfg, rng, nullptr};
  out = unimatch_v2_step(fx.bl, fx.bu, fx.student, fx.teacher, ctx, &pairs);
  const auto fused = grads_of(fx.student);
  ASSERT_EQ(pairs.size(), 2u);

  // oracle: labeled step, then each stream separately with its half of the pair
  ToyModel m = fx.student;
  zero_grad(m);
  labeled_only_step(fx.bl, m, cfg);
  for (int s = 0; s < 2; ++s) {
    Perturbation fixed = [&](const FeatureVolume& f, std::vector<ChannelScales>& scales) {
      FeatureVolume o;
      o.perturbed = true;
      scales.clear();
      for (std::size_t l = 0; l < f.levels.size(); ++l) {
        scales.push_back(mask_scales(s == 0 ? pairs[l].mask : pairs[l].complement, 2.0f));
        o.levels.push_back(apply_channel_scales(f.levels[l], scales.back()));
      }
      return o;
    };
    StreamCache<ToyModel> c;
    const auto& x = s == 0 ? fx.bu.strong1.data : fx.bu.strong2.data;
    const Logits p = forward_stream(m, x, DropoutSite::encoder_output, fixed, c);
    FloatTensor g(p.shape());
    const auto r = masked_unsup_loss(p, out.targets.per_stream[s], &g, 0.5f * 2.0f);
    EXPECT_NEAR(r.loss, out.diagnostics.stream_losses[s], 1e-5);
    backward_stream(m, c, g);
  }
  EXPECT_LT(max_abs_diff(fused, grads_of(m)), 1e-5);
  EXPECT_NEAR(out.loss.unsupervised, (out.diagnostics.stream_losses[0] + out.diagnostics.stream_losses[1]) / 2, 1e-6);
}

TEST(UniMatchV2, SwappingStreamsAndMasksIsSymmetric) {
  Fixture fx(2);
  auto cfg = base_cfg(Framework::unimatch_v2, 0.3);
  Rng mask_rng(9);
  StepHooks hooks;
  hooks.forced_pairs = std::vector<ComplementaryPair>{sample_complementary_masks(2, 4, mask_rng),
                                                      sample_complementary_masks(2, 8, mask_rng)};
  StepOutput a, b;
  const auto ga = step_grads(fx, cfg, 3, &hooks, &a);

  std::swap(fx.bu.strong1, fx.bu.strong2);
  std::swap(fx.bu.mix1, fx.bu.mix2);
  for (auto& p : *hooks.forced_pairs) std::swap(p.mask.data, p.complement.data);
  const auto gb = step_grads(fx, cfg, 3, &hooks, &b);
  EXPECT_NEAR(a.loss.total, b.loss.total, 1e-6);
  EXPECT_LT(max_abs_diff(ga, gb), 1e-5);
}

TEST(Variants, ForcedVariantCAtHalfEqualsV2) {
  Fixture fx(3);
  Rng mask_rng(4);
  StepHooks hooks;
  hooks.forced_pairs = std::vector<ComplementaryPair>{sample_complementary_masks(2, 4, mask_rng),
                                                      sample_complementary_masks(2, 8, mask_rng)};
  StepOutput v2, vc;
  const auto g2 = step_grads(fx, base_cfg(Framework::unimatch_v2, 0.3), 3, &hooks, &v2);
  const auto gc = step_grads(fx, base_cfg(Framework::variant_c, 0.3), 3, &hooks, &vc);
  EXPECT_EQ(max_abs_diff(g2, gc), 0.0);
  EXPECT_EQ(v2.loss.total, vc.loss.total);
}

TEST(Variants, StreamCountsAndDeterminism) {
  Fixture fx(4);
  StepOutput a, b, c;
  step_grads(fx, base_cfg(Framework::variant_a, 0.3), 3, nullptr, &a);
  EXPECT_EQ(a.diagnostics.stream_losses.size(), 1u);
  // variant b has no feature perturbation, so the dropout stream is unused
  const auto g1 = step_grads(fx, base_cfg(Framework::variant_b, 0.3), 3, nullptr, &b);
  const auto g2 = step_grads(fx, base_cfg(Framework::variant_b, 0.3), 99, nullptr, &b);
  EXPECT_EQ(max_abs_diff(g1, g2), 0.0);
  EXPECT_EQ(b.diagnostics.stream_losses.size(), 2u);
  step_grads(fx, base_cfg(Framework::variant_c, 0.3), 3, nullptr, &c);
  EXPECT_EQ(c.diagnostics.stream_losses.size(), 2u);
}

TEST(Variants, UnknownKindRejected) {
  Fixture fx;
  const auto cfg = base_cfg(Framework::variant_a);
  Rng rng(0);
  StepContext ctx{cfg, rng, nullptr};
  EXPECT_THROW(variant_step('d', fx.bl, fx.bu, fx.student, fx.teacher, ctx), ConfigError);
}

TEST(Perturbation, DoubleApplicationGuard) {
  Rng rng(5);
  FeatureVolume fv;
  fv.levels.push_back(FloatTensor({4, 4, 2, 2}, 1.0f));
  std::vector<ChannelScales> scales;
  const auto once = fused_complementary(rng, PerturbConfig{}, nullptr, nullptr)(fv, scales);
  EXPECT_TRUE(once.perturbed);
  EXPECT_THROW(fused_complementary(rng, PerturbConfig{}, nullptr, nullptr)(once, scales), ContractError);
  EXPECT_THROW(independent_dropout(0.5, rng)(once, scales), ContractError);
}

TEST(Perturbation, DecoderPositionPerturbsClassifierInput) {
  Fixture fx(6);
  auto cfg = base_cfg(Framework::unimatch_v2, 0.3);
  cfg.perturb.position = DropoutPosition::decoder_classifier;
  std::vector<ComplementaryPair> pairs;
  zero_grad(fx.student);
  Rng rng(3);
  StepContext ctx{cfg, rng, nullptr};
  unimatch_v2_step(fx.bl, fx.bu, fx.student, fx.teacher, ctx, &pairs);
  ASSERT_EQ(pairs.size(), 1u);
  EXPECT_EQ(pairs[0].mask.channels(), static_cast<std::size_t>(tiny_spec().decoder_width));
}

TEST(IgnoreMap, PaddedPixelsNeverTrain) {
  // every pixel ignored: only the supervised gradient remains
  Fixture fx(7);
  fx.bu.ignore = ByteTensor({2, 8, 8}, 1);
  StepOutput out;
  const auto g = step_grads(fx, base_cfg(Framework::unimatch_v2, 0.0), 3, nullptr, &out);
  EXPECT_EQ(max_abs_diff(g, step_grads(fx, base_cfg(Framework::labeled_only))), 0.0);
  EXPECT_EQ(out.loss.unsupervised, 0.0);
}

TEST(Diagnostics, AgreementIsAFraction) {
  Fixture fx(8);
  auto cfg = base_cfg(Framework::fixmatch, 0.5);
  cfg.engine.log_agreement = true;
  StepOutput out;
  step_grads(fx, cfg, 3, nullptr, &out);
  EXPECT_GE(out.diagnostics.agreement, 0.0);
  EXPECT_LE(out.diagnostics.agreement, 1.0);
  // a teacher identical to the student agrees everywhere
  fx.teacher = fx.student;
  step_grads(fx, cfg, 3, nullptr, &out);
  EXPECT_DOUBLE_EQ(out.diagnostics.agreement, 1.0);
}
