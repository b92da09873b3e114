#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <vector>

#include "unimatch/color.hpp"
#include "unimatch/datamodel.hpp"
#include "unimatch/rng.hpp"

namespace unimatch {

/// Replayable weak (spatial) augmentation decisions for one sample.
struct AugRecord {
  double scale = 1.0;
  std::size_t resized_h = 0, resized_w = 0;  // after resize, before padding
  std::size_t crop_top = 0, crop_left = 0;
  std::size_t crop_size = 0;
  bool flip = false;
  friend bool operator==(const AugRecord&, const AugRecord&) = default;
};

struct WeakParams {
  double scale_min = 0.5;
  double scale_max = 2.0;
  double flip_p = 0.5;
};

struct StrongParams {
  double p_jitter = 0.8;
  double brightness = 0.5;
  double contrast = 0.5;
  double saturation = 0.5;
  double hue = 0.25;
  double p_gray = 0.2;
  double p_blur = 0.5;
  double blur_sigma_min = 0.1;
  double blur_sigma_max = 2.0;
};

inline WeakParams weak_params(const AugmentConfig& a) { return {a.scale_min, a.scale_max, a.flip_p}; }
inline StrongParams strong_params(const AugmentConfig& a) {
  return {a.p_jitter, a.brightness, a.contrast, a.saturation, a.hue,
          a.p_gray,   a.p_blur,     a.blur_sigma_min, a.blur_sigma_max};
}

inline AugRecord sample_weak_record(std::size_t h, std::size_t w, std::size_t crop_size,
                                    const WeakParams& p, Rng& rng) {
  AugRecord r;
  r.scale = rng.uniform(p.scale_min, p.scale_max);
  r.resized_h = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(h * r.scale)));
  r.resized_w = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(w * r.scale)));
  const std::size_t ph = std::max(r.resized_h, crop_size), pw = std::max(r.resized_w, crop_size);
  r.crop_size = crop_size;
  r.crop_top = static_cast<std::size_t>(rng.below(ph - crop_size + 1));
  r.crop_left = static_cast<std::size_t>(rng.below(pw - crop_size + 1));
  r.flip = rng.bernoulli(p.flip_p);
  return r;
}

namespace detail {

/// Bilinear (half-pixel centers) resize of a (C,H,W) tensor.
inline FloatTensor resize_bilinear(const FloatTensor& src, std::size_t oh, std::size_t ow) {
  const std::size_t C = src.dim(0), H = src.dim(1), W = src.dim(2);
  if (oh == H && ow == W) return src;
  FloatTensor out({C, oh, ow});
  const double sy = static_cast<double>(H) / oh, sx = static_cast<double>(W) / ow;
  for (std::size_t y = 0; y < oh; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(H - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy), y1 = std::min(y0 + 1, H - 1);
    const float wy = static_cast<float>(fy - y0);
    for (std::size_t x = 0; x < ow; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(W - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx), x1 = std::min(x0 + 1, W - 1);
      const float wx = static_cast<float>(fx - x0);
      for (std::size_t c = 0; c < C; ++c) {
        const float* p = src.data() + c * H * W;
        const float top = p[y0 * W + x0] * (1 - wx) + p[y0 * W + x1] * wx;
        const float bot = p[y1 * W + x0] * (1 - wx) + p[y1 * W + x1] * wx;
        out[(c * oh + y) * ow + x] = top * (1 - wy) + bot * wy;
      }
    }
  }
  return out;
}

/// Nearest-neighbour resize of an (H,W) mask.
inline IndexTensor resize_nearest(const IndexTensor& src, std::size_t oh, std::size_t ow) {
  const std::size_t H = src.dim(0), W = src.dim(1);
  if (oh == H && ow == W) return src;
  IndexTensor out({oh, ow});
  for (std::size_t y = 0; y < oh; ++y) {
    const std::size_t sy = std::min(H - 1, static_cast<std::size_t>((y + 0.5) * H / oh));
    for (std::size_t x = 0; x < ow; ++x) {
      const std::size_t sx = std::min(W - 1, static_cast<std::size_t>((x + 0.5) * W / ow));
      out(y, x) = src(sy, sx);
    }
  }
  return out;
}

/// Pad (bottom/right) to at least `crop`, crop the record's window, flip.
template <typename T, typename PadFn>
Tensor<T> pad_crop_flip(const Tensor<T>& src, std::size_t channels, const AugRecord& r, PadFn pad) {
  const std::size_t H = r.resized_h, W = r.resized_w, S = r.crop_size;
  const std::size_t ph = std::max(H, S), pw = std::max(W, S);
  if (r.crop_top + S > ph || r.crop_left + S > pw)
    throw ContractError("weak_augment: crop window outside padded image");
  Shape shape = channels ? Shape{channels, S, S} : Shape{S, S};
  Tensor<T> out(shape);
  const std::size_t C = channels ? channels : 1;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x) {
        const std::size_t sy = r.crop_top + y, sx = r.crop_left + x;
        const T v = (sy < H && sx < W) ? src[(c * H + sy) * W + sx] : pad(c);
        const std::size_t ox = r.flip ? S - 1 - x : x;
        out[(c * S + y) * S + ox] = v;
      }
  return out;
}

}  // namespace detail

/// Replays a weak record on a (3,H,W) image; padding uses `pad_color`.
inline FloatTensor replay_weak_image(const AugRecord& r, const FloatTensor& image,
                                     const std::array<float, 3>& pad_color) {
  const auto resized = detail::resize_bilinear(image, r.resized_h, r.resized_w);
  return detail::pad_crop_flip(resized, 3, r, [&](std::size_t c) { return pad_color[c]; });
}

/// Replays a weak record on an (H,W) mask; padding uses `ignore_value`.
inline IndexTensor replay_weak_mask(const AugRecord& r, const IndexTensor& mask,
                                    std::int32_t ignore_value = kIgnoreValue) {
  const auto resized = detail::resize_nearest(mask, r.resized_h, r.resized_w);
  return detail::pad_crop_flip(resized, 0, r, [&](std::size_t) { return ignore_value; });
}

struct WeakResult {
  FloatTensor image;
  std::optional<IndexTensor> mask;
  AugRecord record;
};

/// Random resize in [scale_min, scale_max], pad, crop to `crop_size`, flip.
inline WeakResult weak_augment(const FloatTensor& image, const std::optional<IndexTensor>& mask,
                               std::size_t crop_size, const WeakParams& params, Rng& rng,
                               const std::array<float, 3>& pad_color = {0.5f, 0.5f, 0.5f},
                               std::int32_t ignore_value = kIgnoreValue) {
  require(image.rank() == 3 && image.dim(0) == 3, "weak_augment: image must be (3,H,W)");
  if (mask)
    require(mask->rank() == 2 && mask->dim(0) == image.dim(1) && mask->dim(1) == image.dim(2),
            "weak_augment: mask shape must match image");
  WeakResult out;
  out.record = sample_weak_record(image.dim(1), image.dim(2), crop_size, params, rng);
  out.image = replay_weak_image(out.record, image, pad_color);
  if (mask) out.mask = replay_weak_mask(out.record, *mask, ignore_value);
  return out;
}

// ---------------------------------------------------------------------------
// Photometric strong augmentation

namespace detail {

inline void gaussian_blur(FloatTensor& img, double sigma) {
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<float> k(2 * radius + 1);
  double total = 0;
  for (int i = -radius; i <= radius; ++i) total += k[i + radius] = static_cast<float>(std::exp(-0.5 * i * i / (sigma * sigma)));
  for (auto& v : k) v = static_cast<float>(v / total);
  auto reflect = [](long i, long n) {
    if (n == 1) return 0L;
    while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
    return i;
  };
  std::vector<float> tmp(H * W);
  for (std::size_t c = 0; c < C; ++c) {
    float* p = img.data() + c * H * W;
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        float acc = 0;
        for (int i = -radius; i <= radius; ++i)
          acc += k[i + radius] * p[y * W + reflect(static_cast<long>(x) + i, static_cast<long>(W))];
        tmp[y * W + x] = acc;
      }
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        float acc = 0;
        for (int i = -radius; i <= radius; ++i)
          acc += k[i + radius] * tmp[reflect(static_cast<long>(y) + i, static_cast<long>(H)) * W + x];
        p[y * W + x] = acc;
      }
  }
}

}  // namespace detail

/// Color jitter (brightness, contrast, saturation, hue in that order),
/// grayscale and gaussian blur on a (3,H,W) image in [0,1]. Geometry is
/// never changed.
inline FloatTensor strong_photometric(const FloatTensor& image, const StrongParams& p, Rng& rng) {
  require(image.rank() == 3 && image.dim(0) == 3, "strong_photometric: image must be (3,H,W)");
  FloatTensor out = image;
  const std::size_t P = image.dim(1) * image.dim(2);
  float* r = out.data();
  float* g = r + P;
  float* b = g + P;

  if (rng.bernoulli(p.p_jitter)) {
    const float fb = static_cast<float>(rng.uniform(std::max(0.0, 1 - p.brightness), 1 + p.brightness));
    const float fc = static_cast<float>(rng.uniform(std::max(0.0, 1 - p.contrast), 1 + p.contrast));
    const float fs = static_cast<float>(rng.uniform(std::max(0.0, 1 - p.saturation), 1 + p.saturation));
    const float fh = static_cast<float>(rng.uniform(-p.hue, p.hue));
    for (auto& v : out.values()) v = std::clamp(v * fb, 0.0f, 1.0f);
    double mean_luma = 0;
    for (std::size_t i = 0; i < P; ++i) mean_luma += detail::luma(r[i], g[i], b[i]);
    const float m = static_cast<float>(mean_luma / static_cast<double>(P));
    for (auto& v : out.values()) v = std::clamp(m + fc * (v - m), 0.0f, 1.0f);
    for (std::size_t i = 0; i < P; ++i) {
      const float l = detail::luma(r[i], g[i], b[i]);
      r[i] = std::clamp(l + fs * (r[i] - l), 0.0f, 1.0f);
      g[i] = std::clamp(l + fs * (g[i] - l), 0.0f, 1.0f);
      b[i] = std::clamp(l + fs * (b[i] - l), 0.0f, 1.0f);
    }
    if (fh != 0.0f) {
      for (std::size_t i = 0; i < P; ++i) {
        float h, s, v;
        detail::rgb_to_hsv(r[i], g[i], b[i], h, s, v);
        const auto rgb = detail::hsv_to_rgb(h + fh, s, v);
        r[i] = rgb[0], g[i] = rgb[1], b[i] = rgb[2];
      }
    }
  }
  if (rng.bernoulli(p.p_gray)) {
    for (std::size_t i = 0; i < P; ++i) r[i] = g[i] = b[i] = detail::luma(r[i], g[i], b[i]);
  }
  if (rng.bernoulli(p.p_blur)) detail::gaussian_blur(out, rng.uniform(p.blur_sigma_min, p.blur_sigma_max));
  for (auto& v : out.values()) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

// ---------------------------------------------------------------------------
// CutMix

struct Box {
  std::size_t top = 0, left = 0, height = 0, width = 0;
  bool contains(std::size_t y, std::size_t x) const {
    return y >= top && y < top + height && x >= left && x < left + width;
  }
  friend bool operator==(const Box&, const Box&) = default;
};

struct CutMixItem {
  std::size_t source = 0;
  Box box;
  bool applied = false;
  friend bool operator==(const CutMixItem&, const CutMixItem&) = default;
};

/// Per batch item: which other item the box is copied from, and where.
struct CutMixRecord {
  std::vector<CutMixItem> items;
  friend bool operator==(const CutMixRecord&, const CutMixRecord&) = default;

  static CutMixRecord identity(std::size_t batch) {
    CutMixRecord r;
    r.items.resize(batch);
    for (std::size_t i = 0; i < batch; ++i) r.items[i].source = i;
    return r;
  }
};

struct CutMixParams {
  double apply_p = 0.5;
  double area_min = 0.25;
  double area_max = 0.5;
};

inline CutMixRecord sample_cutmix(std::size_t batch, std::size_t h, std::size_t w,
                                  const CutMixParams& p, Rng& rng) {
  CutMixRecord rec = CutMixRecord::identity(batch);
  if (batch < 2) return rec;
  for (std::size_t i = 0; i < batch; ++i) {
    auto& it = rec.items[i];
    it.applied = rng.bernoulli(p.apply_p);
    // uniform over the other items
    std::size_t src = static_cast<std::size_t>(rng.below(batch - 1));
    it.source = src >= i ? src + 1 : src;
    const double area = rng.uniform(p.area_min, p.area_max) * static_cast<double>(h * w);
    const std::size_t min_h = std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(area / w)), 1, h);
    it.box.height = static_cast<std::size_t>(rng.between(static_cast<std::int64_t>(min_h), static_cast<std::int64_t>(h)));
    it.box.width = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(area / it.box.height)), 1, w);
    it.box.top = static_cast<std::size_t>(rng.below(h - it.box.height + 1));
    it.box.left = static_cast<std::size_t>(rng.below(w - it.box.width + 1));
  }
  return rec;
}

/// Applies a CutMix record to any (B,H,W) or (B,C,H,W) tensor. Boxes are
/// copied from the unmixed source items.
template <typename T>
Tensor<T> replay_cutmix(const Tensor<T>& t, const CutMixRecord& rec) {
  require(t.rank() == 3 || t.rank() == 4, "replay_cutmix: tensor must be rank 3 or 4");
  require(rec.items.size() == t.dim(0), "replay_cutmix: record batch size mismatch");
  const std::size_t B = t.dim(0), C = t.rank() == 4 ? t.dim(1) : 1;
  const std::size_t H = t.dim(t.rank() - 2), W = t.dim(t.rank() - 1);
  Tensor<T> out = t;
  for (std::size_t i = 0; i < B; ++i) {
    const auto& it = rec.items[i];
    if (!it.applied) continue;
    require(it.source < B && it.source != i, "replay_cutmix: invalid source index");
    require(it.box.top + it.box.height <= H && it.box.left + it.box.width <= W,
            "replay_cutmix: box outside image");
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = it.box.top; y < it.box.top + it.box.height; ++y)
        for (std::size_t x = it.box.left; x < it.box.left + it.box.width; ++x)
          out[((i * C + c) * H + y) * W + x] = t[((it.source * C + c) * H + y) * W + x];
  }
  return out;
}

struct CutMixResult {
  FloatTensor images;
  CutMixRecord record;
};

inline CutMixResult cutmix_batch(const FloatTensor& images, Rng& rng, const CutMixParams& p = {}) {
  require(images.rank() == 4, "cutmix_batch: images must be (B,C,H,W)");
  CutMixResult out;
  out.record = sample_cutmix(images.dim(0), images.dim(2), images.dim(3), p, rng);
  out.images = replay_cutmix(images, out.record);
  return out;
}

struct MixedTargets {
  IndexTensor labels;
  FloatTensor confidence;
};

/// Mixes hard labels and confidences with the same boxes as the images.
inline MixedTargets apply_cutmix_to_targets(const IndexTensor& labels, const FloatTensor& confidence,
                                            const CutMixRecord& rec) {
  require_same_shape(labels, confidence, "apply_cutmix_to_targets");
  return {replay_cutmix(labels, rec), replay_cutmix(confidence, rec)};
}

// ---------------------------------------------------------------------------

/// Per-channel (x - mean) / std on a (B,3,H,W) batch in [0,1].
inline ImageBatch normalize(ImageBatch b, const std::array<float, 3>& mean, const std::array<float, 3>& sd) {
  require(!b.normalized, "normalize: batch already normalized");
  const std::size_t B = b.data.dim(0), P = b.data.dim(2) * b.data.dim(3);
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t c = 0; c < 3; ++c) {
      float* p = b.data.data() + (n * 3 + c) * P;
      for (std::size_t i = 0; i < P; ++i) p[i] = (p[i] - mean[c]) / sd[c];
    }
  b.normalized = true;
  return b;
}

/// Stacks (3,H,W) images into a (B,3,H,W) batch.
inline FloatTensor stack_images(const std::vector<FloatTensor>& imgs) {
  require(!imgs.empty(), "stack_images: empty");
  Shape s{imgs.size()};
  s.insert(s.end(), imgs[0].shape().begin(), imgs[0].shape().end());
  std::vector<float> data;
  data.reserve(Tensor<float>::count(s));
  for (const auto& im : imgs) {
    require(im.shape() == imgs[0].shape(), "stack_images: shape mismatch");
    data.insert(data.end(), im.values().begin(), im.values().end());
  }
  return FloatTensor(std::move(s), std::move(data));
}

inline IndexTensor stack_masks(const std::vector<IndexTensor>& masks) {
  require(!masks.empty(), "stack_masks: empty");
  Shape s{masks.size(), masks[0].dim(0), masks[0].dim(1)};
  std::vector<std::int32_t> data;
  data.reserve(Tensor<std::int32_t>::count(s));
  for (const auto& m : masks) {
    require(m.shape() == masks[0].shape(), "stack_masks: shape mismatch");
    data.insert(data.end(), m.values().begin(), m.values().end());
  }
  return IndexTensor(std::move(s), std::move(data));
}

}  // namespace unimatch
