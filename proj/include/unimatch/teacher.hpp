#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "unimatch/augment.hpp"
#include "unimatch/datamodel.hpp"
#include "unimatch/params.hpp"

namespace unimatch {

/// Detached teacher targets for an unlabeled batch. `ignore` (optional,
/// same shape) flags pixels that lie outside the source image, e.g. weak
/// augmentation padding; those pixels are left out of every loss term.
struct PseudoLabel {
  IndexTensor hard_labels;  // (B,H,W) in [0,K)
  FloatTensor confidence;   // (B,H,W) max softmax probability
  ByteTensor valid;         // (B,H,W) confidence >= tau
  ByteTensor ignore;        // (B,H,W) or empty

  bool has_ignore() const { return !ignore.empty(); }
  bool ignored(std::size_t i) const { return has_ignore() && ignore[i] != 0; }
};

/// Softmax over the class axis, argmax labels, max-probability confidence
/// and the tau indicator. Computed in double; outputs are plain values with
/// no link to any gradient path.
inline PseudoLabel make_pseudo_labels(const Logits& logits, double tau) {
  require(logits.rank() == 4, "make_pseudo_labels: logits must be (B,K,H,W)");
  require(tau >= 0.0, "make_pseudo_labels: tau must be >= 0");
  if (!all_finite(logits)) throw ContractError("make_pseudo_labels: non-finite logits");
  const std::size_t B = logits.dim(0), K = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  const std::size_t P = H * W;
  PseudoLabel pl{IndexTensor({B, H, W}), FloatTensor({B, H, W}), ByteTensor({B, H, W}), {}};
  for (std::size_t n = 0; n < B; ++n) {
    const float* base = logits.data() + n * K * P;
    for (std::size_t p = 0; p < P; ++p) {
      std::size_t best = 0;
      double mx = base[p];
      for (std::size_t k = 1; k < K; ++k)
        if (base[k * P + p] > mx) mx = base[k * P + p], best = k;
      double denom = 0;
      for (std::size_t k = 0; k < K; ++k) denom += std::exp(static_cast<double>(base[k * P + p]) - mx);
      const double conf = 1.0 / denom;
      pl.hard_labels[n * P + p] = static_cast<std::int32_t>(best);
      pl.confidence[n * P + p] = static_cast<float>(conf);
      pl.valid[n * P + p] = conf >= tau ? 1 : 0;
    }
  }
  return pl;
}

/// Mixes every target field of `pl` with the boxes of a CutMix record.
inline PseudoLabel mix_pseudo_labels(const PseudoLabel& pl, const CutMixRecord& rec) {
  auto mixed = apply_cutmix_to_targets(pl.hard_labels, pl.confidence, rec);
  PseudoLabel out{std::move(mixed.labels), std::move(mixed.confidence), replay_cutmix(pl.valid, rec), {}};
  if (pl.has_ignore()) out.ignore = replay_cutmix(pl.ignore, rec);
  return out;
}

// ---------------------------------------------------------------------------
// EMA teacher

/// Teacher weights theta_t, optimizer-step counter and decay cap.
template <ParameterTree Model>
struct EmaState {
  Model teacher;
  std::size_t iteration = 0;
  double gamma_max = 0.996;
};

/// min(1 - 1/(iter+1), gamma_max)
inline double ema_gamma(std::size_t iteration, double gamma_max = 0.996) {
  return std::min(1.0 - 1.0 / (static_cast<double>(iteration) + 1.0), gamma_max);
}

template <ParameterTree Model>
EmaState<Model> init_teacher(const Model& student, double gamma_max = 0.996) {
  EmaState<Model> s{student, 0, gamma_max};
  for (auto* p : s.teacher.parameters()) {
    p->zero_grad();
    p->trainable = false;
  }
  return s;
}

/// theta_t <- g * theta_t + (1 - g) * theta_s, buffers copied; returns g.
template <ParameterTree Model>
double ema_update(EmaState<Model>& state, const Model& student) {
  if (!same_structure(state.teacher, student))
    throw ContractError("ema_update: teacher and student parameter trees differ");
  const double g = ema_gamma(state.iteration, state.gamma_max);
  auto tp = state.teacher.parameters();
  const auto sp = student.parameters();
  for (std::size_t i = 0; i < tp.size(); ++i) {
    auto& t = tp[i]->value;
    const auto& s = sp[i]->value;
    if (tp[i]->kind == ParamKind::buffer) {
      t = s;
      continue;
    }
    using V = typename std::remove_reference_t<decltype(t)>::value_type;
    const V gv = static_cast<V>(g), hv = static_cast<V>(1.0 - g);
    for (std::size_t k = 0; k < t.size(); ++k) t[k] = gv * t[k] + hv * s[k];
  }
  ++state.iteration;
  return g;
}

}  // namespace unimatch
