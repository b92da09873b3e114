#pragma once

// Shared fixtures and independent scalar-loop oracles for the test suites.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "unimatch/unimatch.hpp"

namespace testing_support {

using namespace unimatch;

template <typename T>
Tensor<T> random_logits(Rng& rng, Shape shape, double scale = 2.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(scale * rng.normal());
  return t;
}

inline LabelMask random_labels(Rng& rng, std::size_t B, std::size_t H, std::size_t W, int K,
                               double ignore_p = 0.1) {
  LabelMask m{IndexTensor({B, H, W}), K, kIgnoreValue};
  for (auto& v : m.data.values())
    v = rng.bernoulli(ignore_p) ? kIgnoreValue : static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(K)));
  return m;
}

/// Random pseudo-label with independent labels, confidences in [1/K, 1],
/// valid = confidence >= tau, and an optional random ignore map.
inline PseudoLabel random_pseudo_label(Rng& rng, std::size_t B, std::size_t H, std::size_t W, int K, double tau,
                                       double ignore_p = 0.0) {
  PseudoLabel pl{IndexTensor({B, H, W}), FloatTensor({B, H, W}), ByteTensor({B, H, W}), {}};
  for (std::size_t i = 0; i < pl.hard_labels.size(); ++i) {
    pl.hard_labels[i] = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(K)));
    pl.confidence[i] = static_cast<float>(rng.uniform(1.0 / K, 1.0));
    pl.valid[i] = pl.confidence[i] >= tau;
  }
  if (ignore_p > 0.0) {
    pl.ignore = ByteTensor({B, H, W});
    for (auto& v : pl.ignore.values()) v = rng.bernoulli(ignore_p);
  }
  return pl;
}

// ---------------------------------------------------------------------------
// Oracles: direct per-pixel formulas in long double.

/// -log softmax(x)[t] with x gathered at pixel (n, y, x).
template <typename T>
long double oracle_pixel_ce(const Tensor<T>& logits, std::size_t n, std::size_t y, std::size_t x, std::size_t t) {
  const std::size_t K = logits.dim(1);
  long double denom = 0;
  for (std::size_t k = 0; k < K; ++k) denom += std::exp(static_cast<long double>(logits(n, k, y, x)));
  return -std::log(std::exp(static_cast<long double>(logits(n, t, y, x))) / denom);
}

template <typename T>
long double oracle_supervised(const Tensor<T>& logits, const LabelMask& labels) {
  long double sum = 0;
  std::size_t cnt = 0;
  for (std::size_t n = 0; n < logits.dim(0); ++n)
    for (std::size_t y = 0; y < logits.dim(2); ++y)
      for (std::size_t x = 0; x < logits.dim(3); ++x) {
        const auto t = labels.data(n, y, x);
        if (t == labels.ignore_value) continue;
        sum += oracle_pixel_ce(logits, n, y, x, static_cast<std::size_t>(t));
        ++cnt;
      }
  return cnt ? sum / cnt : 0.0L;
}

/// Masked unlabeled loss, recomputing validity from confidence and tau.
template <typename T>
long double oracle_masked(const Tensor<T>& logits, const PseudoLabel& pl, double tau, bool by_valid = false) {
  long double sum = 0;
  std::size_t counted = 0, kept = 0;
  const std::size_t H = logits.dim(2), W = logits.dim(3);
  for (std::size_t n = 0; n < logits.dim(0); ++n)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t i = (n * H + y) * W + x;
        if (!pl.ignore.empty() && pl.ignore[i]) continue;
        ++counted;
        if (!(pl.confidence[i] >= tau)) continue;
        ++kept;
        sum += oracle_pixel_ce(logits, n, y, x, static_cast<std::size_t>(pl.hard_labels[i]));
      }
  const std::size_t d = by_valid ? kept : counted;
  return d ? sum / d : 0.0L;
}

/// Sort-based OHEM: order pixels by true-class probability, keep those
/// below the threshold, at least ceil(frac * N) of them.
template <typename T>
long double oracle_ohem(const Tensor<T>& logits, const LabelMask& labels, double thresh, double frac) {
  std::vector<std::pair<long double, long double>> px;  // (p_true, ce)
  for (std::size_t n = 0; n < logits.dim(0); ++n)
    for (std::size_t y = 0; y < logits.dim(2); ++y)
      for (std::size_t x = 0; x < logits.dim(3); ++x) {
        const auto t = labels.data(n, y, x);
        if (t == labels.ignore_value) continue;
        const long double ce = oracle_pixel_ce(logits, n, y, x, static_cast<std::size_t>(t));
        px.emplace_back(std::exp(-ce), ce);
      }
  if (px.empty()) return 0.0L;
  std::sort(px.begin(), px.end());
  std::size_t hard = 0;
  for (const auto& p : px) hard += p.first < thresh;
  const auto min_kept = static_cast<std::size_t>(std::ceil(frac * static_cast<double>(px.size())));
  const std::size_t keep = std::min(px.size(), std::max({hard, min_kept, std::size_t{1}}));
  long double sum = 0;
  for (std::size_t i = 0; i < keep; ++i) sum += px[i].second;
  return sum / keep;
}

// ---------------------------------------------------------------------------
// Finite differences

/// Largest relative error between `analytic` and central differences of f.
inline double max_fd_rel_error(Tensor<double> x, const Tensor<double>& analytic,
                               const std::function<double(const Tensor<double>&)>& f, double h = 1e-6,
                               double floor = 1e-7) {
  double worst = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = x[i];
    x[i] = x0 + h;
    const double fp = f(x);
    x[i] = x0 - h;
    const double fm = f(x);
    x[i] = x0;
    const double num = (fp - fm) / (2 * h);
    const double err = std::abs(num - analytic[i]) / std::max({std::abs(num), std::abs(analytic[i]), floor});
    if (std::abs(num - analytic[i]) > 1e-9) worst = std::max(worst, err);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Small models and batches

inline ToyNetSpec tiny_spec(int K = 3) { return {{4, 8}, 4, K}; }

inline ToyModel tiny_model(std::uint64_t seed = 1, int K = 3) {
  Rng rng(seed);
  return build_toy_model(tiny_spec(K), rng);
}

inline FloatTensor random_images(Rng& rng, std::size_t B, std::size_t H, std::size_t W) {
  FloatTensor t({B, 3, H, W});
  for (auto& v : t.values()) v = static_cast<float>(rng.normal());
  return t;
}

inline LabeledBatch random_labeled(Rng& rng, std::size_t B, std::size_t S, int K) {
  return {{random_images(rng, B, S, S), true}, random_labels(rng, B, S, S, K, 0.05)};
}

/// Unlabeled batch with random views and CutMix records sampled on the
/// strong views.
inline UnlabeledBatch random_unlabeled(Rng& rng, std::size_t B, std::size_t S, bool with_cutmix = true) {
  UnlabeledBatch u;
  u.weak = {random_images(rng, B, S, S), true};
  const CutMixParams cp{with_cutmix ? 1.0 : 0.0, 0.25, 0.5};
  auto m1 = cutmix_batch(random_images(rng, B, S, S), rng, cp);
  auto m2 = cutmix_batch(random_images(rng, B, S, S), rng, cp);
  u.strong1 = {m1.images, true};
  u.strong2 = {m2.images, true};
  u.mix1 = m1.record;
  u.mix2 = m2.record;
  return u;
}

template <ParameterTree M>
std::vector<FloatTensor> grads_of(const M& m) {
  std::vector<FloatTensor> g;
  for (const auto* p : m.parameters()) g.push_back(p->grad);
  return g;
}

inline double max_abs_diff(const std::vector<FloatTensor>& a, const std::vector<FloatTensor>& b) {
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < a[i].size(); ++k) d = std::max(d, std::abs(double(a[i][k]) - double(b[i][k])));
  return d;
}

template <ParameterTree M>
double grad_norm(const M& m, ParamGroup g) {
  double s = 0;
  for (const auto* p : m.parameters())
    if (p->group == g)
      for (float v : p->grad.values()) s += double(v) * v;
  return std::sqrt(s);
}

}  // namespace testing_support
