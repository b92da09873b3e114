#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <vector>

#include "unimatch/datamodel.hpp"
#include "unimatch/nn.hpp"

namespace unimatch {

/// K x K counts; rows are ground truth, columns are predictions.
struct ConfusionMatrix {
  std::size_t num_classes = 0;
  std::vector<std::uint64_t> counts;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t k) : num_classes(k), counts(k * k, 0) {}

  std::uint64_t& at(std::size_t gt, std::size_t pred) { return counts[gt * num_classes + pred]; }
  std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts[gt * num_classes + pred]; }
  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts) t += c;
    return t;
  }

  ConfusionMatrix& merge(const ConfusionMatrix& o) {
    require(o.num_classes == num_classes, "ConfusionMatrix::merge: class count mismatch");
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
    return *this;
  }
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

/// counts[gt, pred] += 1 wherever gt is not the ignore value.
inline ConfusionMatrix& accumulate(ConfusionMatrix& cm, const LabelMask& pred, const LabelMask& gt) {
  require_same_shape(pred.data, gt.data, "accumulate");
  const auto K = static_cast<std::int32_t>(cm.num_classes);
  for (std::size_t i = 0; i < gt.data.size(); ++i) {
    const auto g = gt.data[i];
    if (g == gt.ignore_value) continue;
    const auto p = pred.data[i];
    if (g < 0 || g >= K || p < 0 || p >= K) throw ContractError("accumulate: class index out of range");
    ++cm.at(static_cast<std::size_t>(g), static_cast<std::size_t>(p));
  }
  return cm;
}

struct MiouResult {
  std::vector<double> per_class;  // NaN for classes with zero union
  double mean = 0.0;
  bool defined = true;            // false when every class has zero union
};

/// IoU_k = diag / (row + col - diag); zero-union classes are left out of the mean.
inline MiouResult miou(const ConfusionMatrix& cm) {
  MiouResult r;
  const std::size_t K = cm.num_classes;
  r.per_class.assign(K, std::numeric_limits<double>::quiet_NaN());
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < K; ++k) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t j = 0; j < K; ++j) row += cm.at(k, j), col += cm.at(j, k);
    const std::uint64_t uni = row + col - cm.at(k, k);
    if (uni == 0) continue;
    r.per_class[k] = static_cast<double>(cm.at(k, k)) / static_cast<double>(uni);
    sum += r.per_class[k];
    ++n;
  }
  if (n == 0) {
    r.defined = false;
    r.mean = std::numeric_limits<double>::quiet_NaN();
  } else {
    r.mean = sum / static_cast<double>(n);
  }
  return r;
}

inline LabelMask argmax(const Logits& logits, std::size_t num_classes) {
  require(logits.rank() == 4, "argmax: logits must be (B,K,H,W)");
  const std::size_t B = logits.dim(0), K = logits.dim(1), P = logits.dim(2) * logits.dim(3);
  LabelMask out{IndexTensor({B, logits.dim(2), logits.dim(3)}), static_cast<int>(num_classes)};
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t p = 0; p < P; ++p) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < K; ++k)
        if (logits[(n * K + k) * P + p] > logits[(n * K + best) * P + p]) best = k;
      out.data[n * P + p] = static_cast<std::int32_t>(best);
    }
  return out;
}

/// Window origins along one axis: stride steps, last window flush with the edge.
inline std::vector<std::size_t> window_origins(std::size_t extent, std::size_t window, std::size_t stride) {
  require(window >= 1 && stride >= 1 && stride <= window, "window_origins: need 1 <= stride <= window");
  std::vector<std::size_t> o;
  if (extent <= window) return {0};
  for (std::size_t s = 0; s + window < extent; s += stride) o.push_back(s);
  o.push_back(extent - window);
  return o;
}

/// Per-pixel count of windows covering it.
inline std::vector<std::uint32_t> window_coverage(std::size_t h, std::size_t w, std::size_t window,
                                                  std::size_t stride) {
  std::vector<std::uint32_t> cov(h * w, 0);
  const std::size_t wh = std::min(window, h), ww = std::min(window, w);
  for (auto y0 : window_origins(h, wh, std::min(stride, wh)))
    for (auto x0 : window_origins(w, ww, std::min(stride, ww)))
      for (std::size_t y = y0; y < y0 + wh; ++y)
        for (std::size_t x = x0; x < x0 + ww; ++x) ++cov[y * w + x];
  return cov;
}

/// Whole-image inference: bilinear resize to the model granularity when
/// needed, forward, and resize the logits back.
template <typename Model>
Logits whole_image_predict(const Model& model, const FloatTensor& image) {
  const std::size_t g = model.granularity();
  const std::size_t H = image.dim(2), W = image.dim(3);
  const std::size_t h2 = std::max(g, (H + g / 2) / g * g), w2 = std::max(g, (W + g / 2) / g * g);
  if (h2 == H && w2 == W) return model.forward(image);
  const FloatTensor resized = nn::BilinearResize(H, W, h2, w2).forward(image);
  const Logits out = model.forward(resized);
  return nn::BilinearResize(h2, w2, H, W).forward(out);
}

/// Logits averaged over overlapping windows. Windows larger than the image
/// shrink to it. `stride` 0 means two thirds of the window.
template <typename Model>
Logits sliding_window_predict(const Model& model, const FloatTensor& image, std::size_t window,
                              std::size_t stride = 0) {
  require(image.rank() == 4, "sliding_window_predict: image must be (B,3,H,W)");
  require(window >= 1, "sliding_window_predict: window must be >= 1");
  if (stride == 0) stride = std::max<std::size_t>(1, window * 2 / 3);
  require(stride <= window, "sliding_window_predict: stride must be <= window");
  const std::size_t B = image.dim(0), C = image.dim(1), H = image.dim(2), W = image.dim(3);
  const std::size_t wh = std::min(window, H), ww = std::min(window, W);
  Logits acc;
  std::vector<float> cov(H * W, 0.0f);
  FloatTensor crop({B, C, wh, ww});
  for (auto y0 : window_origins(H, wh, std::min(stride, wh)))
    for (auto x0 : window_origins(W, ww, std::min(stride, ww))) {
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t y = 0; y < wh; ++y)
            std::copy_n(image.data() + ((n * C + c) * H + y0 + y) * W + x0, ww,
                        crop.data() + ((n * C + c) * wh + y) * ww);
      const Logits out = whole_image_predict(model, crop);
      const std::size_t K = out.dim(1);
      if (acc.empty()) acc = Logits({B, K, H, W});
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t k = 0; k < K; ++k)
          for (std::size_t y = 0; y < wh; ++y) {
            const float* src = out.data() + ((n * K + k) * wh + y) * ww;
            float* dst = acc.data() + ((n * K + k) * H + y0 + y) * W + x0;
            for (std::size_t x = 0; x < ww; ++x) dst[x] += src[x];
          }
      for (std::size_t y = 0; y < wh; ++y)
        for (std::size_t x = 0; x < ww; ++x) cov[(y0 + y) * W + x0 + x] += 1.0f;
    }
  const std::size_t K = acc.dim(1), P = H * W;
  for (std::size_t nk = 0; nk < B * K; ++nk)
    for (std::size_t p = 0; p < P; ++p) acc[nk * P + p] /= cov[p];
  return acc;
}

}  // namespace unimatch
