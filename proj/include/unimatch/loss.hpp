#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "unimatch/datamodel.hpp"
#include "unimatch/teacher.hpp"

namespace unimatch {

/// Losses are templated on the logit scalar so the same code runs in float
/// for training and in double for finite-difference checks. Every loss
/// optionally accumulates `scale * dLoss/dlogits` into `grad`.

struct LossBreakdown {
  double supervised = 0.0;
  double unsupervised = 0.0;
  double total = 0.0;
  double kept_fraction = 0.0;
};

namespace detail {

/// Cross-entropy of one pixel (class stride P) against `target`; adds
/// g * (softmax - onehot) into `grad` when given.
template <typename T>
T pixel_ce(const T* x, std::size_t K, std::size_t P, std::size_t target, T* grad, T g) {
  T mx = x[0];
  for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, x[k * P]);
  T sum = 0;
  for (std::size_t k = 0; k < K; ++k) sum += std::exp(x[k * P] - mx);
  const T lse = mx + std::log(sum);
  if (grad) {
    for (std::size_t k = 0; k < K; ++k) grad[k * P] += g * std::exp(x[k * P] - lse);
    grad[target * P] -= g;
  }
  return lse - x[target * P];
}

template <typename T>
void check_logits(const Tensor<T>& logits, std::size_t B, std::size_t H, std::size_t W, const char* who) {
  require(logits.rank() == 4 && logits.dim(0) == B && logits.dim(2) == H && logits.dim(3) == W,
          std::string(who) + ": logits/targets shape mismatch");
}

template <typename T>
void check_grad(const Tensor<T>& logits, const Tensor<T>* grad, const char* who) {
  if (grad) require_same_shape(logits, *grad, who);
}

}  // namespace detail

/// Mean per-pixel cross-entropy over non-ignore pixels (0 when none).
template <typename T>
T supervised_loss(const Tensor<T>& logits, const LabelMask& labels, Tensor<T>* grad = nullptr,
                  T scale = T{1}) {
  const auto& y = labels.data;
  detail::check_logits(logits, y.dim(0), y.dim(1), y.dim(2), "supervised_loss");
  detail::check_grad(logits, grad, "supervised_loss");
  const std::size_t B = y.dim(0), K = logits.dim(1), P = y.dim(1) * y.dim(2);
  std::size_t count = 0;
  for (auto v : y.values()) count += v != labels.ignore_value;
  if (count == 0) return T{0};
  const T g = scale / static_cast<T>(count);
  T total = 0;
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t p = 0; p < P; ++p) {
      const auto t = y[n * P + p];
      if (t == labels.ignore_value) continue;
      require(t >= 0 && static_cast<std::size_t>(t) < K, "supervised_loss: label out of range");
      const std::size_t off = n * K * P + p;
      total += detail::pixel_ce(logits.data() + off, K, P, static_cast<std::size_t>(t),
                                grad ? grad->data() + off : nullptr, g);
    }
  return total / static_cast<T>(count);
}

template <typename T>
struct UnsupLoss {
  T loss{};
  double kept_fraction = 0.0;
};

/// Confidence-masked cross-entropy against hard pseudo-labels. Pixels below
/// tau contribute 0 to the numerator; the denominator counts all non-ignore
/// pixels, or only the confident ones with `normalize_by_valid`.
template <typename T>
UnsupLoss<T> masked_unsup_loss(const Tensor<T>& logits, const PseudoLabel& pl, Tensor<T>* grad = nullptr,
                               T scale = T{1}, bool normalize_by_valid = false) {
  const auto& y = pl.hard_labels;
  detail::check_logits(logits, y.dim(0), y.dim(1), y.dim(2), "masked_unsup_loss");
  detail::check_grad(logits, grad, "masked_unsup_loss");
  require_same_shape(y, pl.valid, "masked_unsup_loss");
  const std::size_t B = y.dim(0), K = logits.dim(1), P = y.dim(1) * y.dim(2);
  std::size_t counted = 0, kept = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (pl.ignored(i)) continue;
    ++counted;
    kept += pl.valid[i] != 0;
  }
  UnsupLoss<T> out;
  out.kept_fraction = counted ? static_cast<double>(kept) / static_cast<double>(counted) : 0.0;
  const std::size_t denom = normalize_by_valid ? kept : counted;
  if (denom == 0 || kept == 0) return out;
  const T g = scale / static_cast<T>(denom);
  T total = 0;
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t p = 0; p < P; ++p) {
      const std::size_t i = n * P + p;
      if (pl.ignored(i) || !pl.valid[i]) continue;
      const std::size_t off = n * K * P + p;
      total += detail::pixel_ce(logits.data() + off, K, P, static_cast<std::size_t>(y[i]),
                                grad ? grad->data() + off : nullptr, g);
    }
  out.loss = total / static_cast<T>(denom);
  return out;
}

/// Three-stream unlabeled loss: feature stream weight 1/2, each image
/// stream 1/4. Each stream may carry its own (CutMix-mixed) targets.
template <typename T>
T v1_unlabeled_loss(const Tensor<T>& p_f, const Tensor<T>& p_s1, const Tensor<T>& p_s2,
                    const PseudoLabel& pl_f, const PseudoLabel& pl_s1, const PseudoLabel& pl_s2,
                    Tensor<T>* g_f = nullptr, Tensor<T>* g_s1 = nullptr, Tensor<T>* g_s2 = nullptr,
                    T scale = T{1}, bool normalize_by_valid = false) {
  const T lf = masked_unsup_loss(p_f, pl_f, g_f, scale * T(0.5), normalize_by_valid).loss;
  const T l1 = masked_unsup_loss(p_s1, pl_s1, g_s1, scale * T(0.25), normalize_by_valid).loss;
  const T l2 = masked_unsup_loss(p_s2, pl_s2, g_s2, scale * T(0.25), normalize_by_valid).loss;
  return T(0.5) * (lf + (l1 + l2) / T(2));
}

template <typename T>
T v1_unlabeled_loss(const Tensor<T>& p_f, const Tensor<T>& p_s1, const Tensor<T>& p_s2,
                    const PseudoLabel& pl) {
  return v1_unlabeled_loss(p_f, p_s1, p_s2, pl, pl, pl);
}

/// Dual-stream unlabeled loss: mean of the two stream losses.
template <typename T>
T v2_unlabeled_loss(const Tensor<T>& p_sf1, const Tensor<T>& p_sf2, const PseudoLabel& pl1,
                    const PseudoLabel& pl2, Tensor<T>* g1 = nullptr, Tensor<T>* g2 = nullptr,
                    T scale = T{1}, bool normalize_by_valid = false) {
  const T l1 = masked_unsup_loss(p_sf1, pl1, g1, scale * T(0.5), normalize_by_valid).loss;
  const T l2 = masked_unsup_loss(p_sf2, pl2, g2, scale * T(0.5), normalize_by_valid).loss;
  return (l1 + l2) / T(2);
}

template <typename T>
T v2_unlabeled_loss(const Tensor<T>& p_sf1, const Tensor<T>& p_sf2, const PseudoLabel& pl) {
  return v2_unlabeled_loss(p_sf1, p_sf2, pl, pl);
}

template <typename T>
T total_loss(T supervised, T unsupervised, T lambda_u) {
  require(lambda_u >= T{0}, "total_loss: lambda must be >= 0");
  return supervised + lambda_u * unsupervised;
}

/// Online hard example mining: mean cross-entropy over pixels whose
/// true-class probability is below `conf_thresh`, topped up by descending
/// loss to at least ceil(min_kept_fraction * valid pixels).
template <typename T>
T ohem_supervised_loss(const Tensor<T>& logits, const LabelMask& labels, double conf_thresh,
                       double min_kept_fraction, Tensor<T>* grad = nullptr, T scale = T{1}) {
  const auto& y = labels.data;
  detail::check_logits(logits, y.dim(0), y.dim(1), y.dim(2), "ohem_supervised_loss");
  detail::check_grad(logits, grad, "ohem_supervised_loss");
  const std::size_t B = y.dim(0), K = logits.dim(1), P = y.dim(1) * y.dim(2);

  struct Px {
    T loss;
    std::size_t off, target;
  };
  std::vector<Px> px;
  px.reserve(y.size());
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t p = 0; p < P; ++p) {
      const auto t = y[n * P + p];
      if (t == labels.ignore_value) continue;
      require(t >= 0 && static_cast<std::size_t>(t) < K, "ohem_supervised_loss: label out of range");
      const std::size_t off = n * K * P + p;
      px.push_back({detail::pixel_ce<T>(logits.data() + off, K, P, static_cast<std::size_t>(t), nullptr, T{0}),
                    off, static_cast<std::size_t>(t)});
    }
  if (px.empty()) return T{0};

  std::size_t hard = 0;
  for (const auto& q : px)
    if (conf_thresh >= 1.0 || std::exp(-static_cast<double>(q.loss)) < conf_thresh) ++hard;
  const auto min_kept = static_cast<std::size_t>(std::ceil(min_kept_fraction * static_cast<double>(px.size())));
  const std::size_t keep = std::min(px.size(), std::max({hard, min_kept, std::size_t{1}}));
  // hard pixels are exactly the highest-loss ones, so one ordering covers both rules
  std::stable_sort(px.begin(), px.end(), [](const Px& a, const Px& b) { return a.loss > b.loss; });

  T total = 0;
  const T g = scale / static_cast<T>(keep);
  for (std::size_t i = 0; i < keep; ++i) {
    total += px[i].loss;
    if (grad) detail::pixel_ce(logits.data() + px[i].off, K, P, px[i].target, grad->data() + px[i].off, g);
  }
  return total / static_cast<T>(keep);
}

}  // namespace unimatch
