#pragma once

#include <algorithm>
#include <numeric>
#include <utility>
#include <vector>

#include "unimatch/datamodel.hpp"
#include "unimatch/rng.hpp"

namespace unimatch {

/// Binary (B, C) channel mask. `complement` marks the 1 - M half of a pair.
struct ChannelMask {
  ByteTensor data;
  bool complement = false;

  std::size_t batch() const { return data.dim(0); }
  std::size_t channels() const { return data.dim(1); }
};

/// Per-(item, channel) multiplier applied to a feature level; the same
/// scales are applied to the incoming gradient on the way back.
using ChannelScales = FloatTensor;

inline ChannelMask complement_of(const ChannelMask& m) {
  ChannelMask c{m.data, !m.complement};
  for (auto& v : c.data.values()) v = static_cast<std::uint8_t>(1 - v);
  return c;
}

inline ChannelScales mask_scales(const ChannelMask& m, float scale) {
  ChannelScales s(m.data.shape());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = m.data[i] ? scale : 0.0f;
  return s;
}

/// feat (B,C,H,W) * scales (B,C) broadcast over space.
inline FloatTensor apply_channel_scales(const FloatTensor& feat, const ChannelScales& scales) {
  require(feat.rank() == 4 && scales.rank() == 2 && feat.dim(0) == scales.dim(0) &&
              feat.dim(1) == scales.dim(1),
          "apply_channel_scales: scales must be (B,C) matching features");
  FloatTensor out = feat;
  const std::size_t P = feat.dim(2) * feat.dim(3);
  for (std::size_t bc = 0; bc < scales.size(); ++bc) {
    const float s = scales[bc];
    float* p = out.data() + bc * P;
    for (std::size_t i = 0; i < P; ++i) p[i] *= s;
  }
  return out;
}

/// Keep mask with each entry kept independently with probability 1 - p.
inline ChannelMask sample_keep_mask(std::size_t batch, std::size_t channels, double p, Rng& rng) {
  ChannelMask m{ByteTensor({batch, channels}), false};
  for (auto& v : m.data.values()) v = rng.bernoulli(p) ? 0 : 1;
  return m;
}

// ---------------------------------------------------------------------------
// Standard channel-wise dropout

/// Zeroes each channel of each level with probability p and rescales the
/// survivors by 1/(1-p). `scales_out`, when given, receives the per-level
/// multipliers for the backward pass.
inline FeatureVolume channel_dropout(const FeatureVolume& feat, double p, Rng& rng,
                                     std::vector<ChannelScales>* scales_out = nullptr) {
  require(p >= 0.0 && p < 1.0, "channel_dropout: p must lie in [0,1)");
  require(!feat.perturbed, "channel_dropout: features were already perturbed in this forward");
  FeatureVolume out;
  out.perturbed = true;
  if (scales_out) scales_out->clear();
  const float keep_scale = static_cast<float>(1.0 / (1.0 - p));
  for (const auto& level : feat.levels) {
    const auto mask = sample_keep_mask(level.dim(0), level.dim(1), p, rng);
    auto scales = mask_scales(mask, keep_scale);
    out.levels.push_back(apply_channel_scales(level, scales));
    if (scales_out) scales_out->push_back(std::move(scales));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Complementary channel-wise dropout

struct ComplementaryPair {
  ChannelMask mask;        // M
  ChannelMask complement;  // 1 - M
};

/// M ~ Bernoulli(0.5) per (item, channel); with `exact_half`, each row keeps
/// exactly floor(C/2) channels chosen uniformly instead.
inline ComplementaryPair sample_complementary_masks(std::size_t batch, std::size_t channels, Rng& rng,
                                                    bool exact_half = false) {
  require(channels >= 1, "sample_complementary_masks: C must be >= 1");
  ChannelMask m{ByteTensor({batch, channels}), false};
  if (!exact_half) {
    for (auto& v : m.data.values()) v = rng.bernoulli(0.5) ? 1 : 0;
  } else {
    std::vector<std::size_t> idx(channels);
    for (std::size_t b = 0; b < batch; ++b) {
      std::iota(idx.begin(), idx.end(), 0);
      rng.shuffle(idx.begin(), idx.end());
      for (std::size_t k = 0; k < channels / 2; ++k) m.data(b, idx[k]) = 1;
    }
  }
  return {m, complement_of(m)};
}

/// One pair per feature level, or a single pair reused on every level when
/// `share_across_levels` is set (all levels must then share C).
inline std::vector<ComplementaryPair> sample_level_pairs(const FeatureVolume& feat, Rng& rng,
                                                         bool exact_half, bool share_across_levels) {
  std::vector<ComplementaryPair> pairs;
  for (std::size_t l = 0; l < feat.levels.size(); ++l) {
    const auto& level = feat.levels[l];
    if (share_across_levels && l > 0) {
      require(level.dim(1) == pairs.front().mask.channels(),
              "shared complementary masks need equal channel counts across levels");
      pairs.push_back(pairs.front());
    } else {
      pairs.push_back(sample_complementary_masks(level.dim(0), level.dim(1), rng, exact_half));
    }
  }
  return pairs;
}

/// e1 * M * 2 and e2 * (1 - M) * 2, level by level.
inline std::pair<FeatureVolume, FeatureVolume> apply_complementary_dropout(
    const FeatureVolume& e1, const FeatureVolume& e2, const std::vector<ComplementaryPair>& masks) {
  require(!e1.perturbed && !e2.perturbed,
          "apply_complementary_dropout: features were already perturbed in this forward");
  require(e1.levels.size() == e2.levels.size() && e1.levels.size() == masks.size(),
          "apply_complementary_dropout: level count mismatch");
  std::pair<FeatureVolume, FeatureVolume> out;
  out.first.perturbed = out.second.perturbed = true;
  for (std::size_t l = 0; l < masks.size(); ++l) {
    require_same_shape(e1.levels[l], e2.levels[l], "apply_complementary_dropout");
    out.first.levels.push_back(apply_channel_scales(e1.levels[l], mask_scales(masks[l].mask, 2.0f)));
    out.second.levels.push_back(
        apply_channel_scales(e2.levels[l], mask_scales(masks[l].complement, 2.0f)));
  }
  return out;
}

/// Scales for a fused (2B, C) forward where rows [0,B) carry stream 1 and
/// rows [B,2B) carry stream 2.
inline ChannelScales fused_complementary_scales(const ComplementaryPair& pair) {
  return concat_batch(mask_scales(pair.mask, 2.0f), mask_scales(pair.complement, 2.0f));
}

// ---------------------------------------------------------------------------
// Insertion point

enum class DropoutSite { encoder_output, decoder_activation };

inline DropoutSite position_dispatch(DropoutPosition p) {
  switch (p) {
    case DropoutPosition::encoder_decoder: return DropoutSite::encoder_output;
    case DropoutPosition::decoder_classifier: return DropoutSite::decoder_activation;
  }
  throw ConfigError("unknown dropout position");
}

}  // namespace unimatch
