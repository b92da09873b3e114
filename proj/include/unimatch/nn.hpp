#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "unimatch/params.hpp"
#include "unimatch/rng.hpp"
#include "unimatch/tensor.hpp"

// Layers with explicit forward/backward. Forward passes take an optional
// cache; when given, it receives whatever backward needs, so several
// forwards of one layer can be in flight (one cache each). Backward
// accumulates parameter gradients unless the parameters are frozen.
namespace unimatch::nn {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

// ---------------------------------------------------------------------------

struct ConvCache {
  Shape in_shape;
  std::vector<float> col;  // (Cin*k*k) x (B*Ho*Wo), row-major
};

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, ParamGroup group, std::size_t cin, std::size_t cout, std::size_t kernel,
         std::size_t stride, std::size_t pad, Rng& rng)
      : cin_(cin), cout_(cout), k_(kernel), stride_(stride), pad_(pad),
        weight_(name + ".weight", group, FloatTensor({cout, cin, kernel, kernel})),
        bias_(name + ".bias", group, FloatTensor({cout})) {
    const double sd = std::sqrt(2.0 / static_cast<double>(cin * kernel * kernel));
    for (auto& w : weight_.value.values()) w = static_cast<float>(sd * rng.normal());
  }

  std::size_t out_size(std::size_t in) const { return (in + 2 * pad_ - k_) / stride_ + 1; }

  FloatTensor forward(const FloatTensor& x, ConvCache* cache) const {
    require(x.rank() == 4 && x.dim(1) == cin_, "Conv2d " + weight_.name + ": bad input " + shape_str(x.shape()));
    const std::size_t B = x.dim(0), H = x.dim(2), W = x.dim(3);
    const std::size_t Ho = out_size(H), Wo = out_size(W), P = Ho * Wo, N = B * P;
    const std::size_t R = cin_ * k_ * k_;
    std::vector<float> col(R * N, 0.0f);
    im2col(x, col, Ho, Wo);
    RowMat out = ConstMatMap(weight_.value.data(), static_cast<Eigen::Index>(cout_), static_cast<Eigen::Index>(R)) *
                 ConstMatMap(col.data(), static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(N));
    FloatTensor y({B, cout_, Ho, Wo});
    for (std::size_t n = 0; n < B; ++n)
      for (std::size_t co = 0; co < cout_; ++co) {
        const float b = bias_.value[co];
        const float* src = out.data() + co * N + n * P;
        float* dst = y.data() + (n * cout_ + co) * P;
        for (std::size_t p = 0; p < P; ++p) dst[p] = src[p] + b;
      }
    if (cache) {
      cache->in_shape = x.shape();
      cache->col = std::move(col);
    }
    return y;
  }

  /// Returns dL/dx when `need_dx`; otherwise an empty tensor.
  FloatTensor backward(const ConvCache& cache, const FloatTensor& dy, bool need_dx) {
    const std::size_t B = cache.in_shape[0], H = cache.in_shape[2], W = cache.in_shape[3];
    const std::size_t Ho = out_size(H), Wo = out_size(W), P = Ho * Wo, N = B * P;
    const std::size_t R = cin_ * k_ * k_;
    require(dy.rank() == 4 && dy.dim(0) == B && dy.dim(1) == cout_ && dy.dim(2) == Ho && dy.dim(3) == Wo,
            "Conv2d " + weight_.name + ": bad upstream gradient");
    RowMat dym(static_cast<Eigen::Index>(cout_), static_cast<Eigen::Index>(N));
    for (std::size_t n = 0; n < B; ++n)
      for (std::size_t co = 0; co < cout_; ++co)
        std::copy_n(dy.data() + (n * cout_ + co) * P, P, dym.data() + co * N + n * P);
    const ConstMatMap colm(cache.col.data(), static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(N));
    if (weight_.trainable) {
      MatMap(weight_.grad.data(), static_cast<Eigen::Index>(cout_), static_cast<Eigen::Index>(R)).noalias() +=
          dym * colm.transpose();
      for (std::size_t co = 0; co < cout_; ++co) bias_.grad[co] += dym.row(static_cast<Eigen::Index>(co)).sum();
    }
    if (!need_dx) return {};
    RowMat dcol = ConstMatMap(weight_.value.data(), static_cast<Eigen::Index>(cout_), static_cast<Eigen::Index>(R))
                      .transpose() *
                  dym;
    FloatTensor dx(cache.in_shape);
    col2im(dcol.data(), dx, Ho, Wo);
    return dx;
  }

  std::vector<Parameter*> parameters() { return {&weight_, &bias_}; }
  std::vector<const Parameter*> parameters() const { return {&weight_, &bias_}; }
  std::size_t out_channels() const { return cout_; }

 private:
  void im2col(const FloatTensor& x, std::vector<float>& col, std::size_t Ho, std::size_t Wo) const {
    const std::size_t B = x.dim(0), H = x.dim(2), W = x.dim(3), P = Ho * Wo, N = B * P;
    for (std::size_t ci = 0; ci < cin_; ++ci)
      for (std::size_t ky = 0; ky < k_; ++ky)
        for (std::size_t kx = 0; kx < k_; ++kx) {
          float* row = col.data() + ((ci * k_ + ky) * k_ + kx) * N;
          for (std::size_t n = 0; n < B; ++n) {
            const float* src = x.data() + (n * cin_ + ci) * H * W;
            float* dst = row + n * P;
            for (std::size_t oy = 0; oy < Ho; ++oy) {
              const long iy = static_cast<long>(oy * stride_ + ky) - static_cast<long>(pad_);
              if (iy < 0 || iy >= static_cast<long>(H)) continue;
              const float* srow = src + static_cast<std::size_t>(iy) * W;
              float* drow = dst + oy * Wo;
              for (std::size_t ox = 0; ox < Wo; ++ox) {
                const long ix = static_cast<long>(ox * stride_ + kx) - static_cast<long>(pad_);
                if (ix >= 0 && ix < static_cast<long>(W)) drow[ox] = srow[ix];
              }
            }
          }
        }
  }

  void col2im(const float* dcol, FloatTensor& dx, std::size_t Ho, std::size_t Wo) const {
    const std::size_t B = dx.dim(0), H = dx.dim(2), W = dx.dim(3), P = Ho * Wo, N = B * P;
    for (std::size_t ci = 0; ci < cin_; ++ci)
      for (std::size_t ky = 0; ky < k_; ++ky)
        for (std::size_t kx = 0; kx < k_; ++kx) {
          const float* row = dcol + ((ci * k_ + ky) * k_ + kx) * N;
          for (std::size_t n = 0; n < B; ++n) {
            float* dst = dx.data() + (n * cin_ + ci) * H * W;
            const float* src = row + n * P;
            for (std::size_t oy = 0; oy < Ho; ++oy) {
              const long iy = static_cast<long>(oy * stride_ + ky) - static_cast<long>(pad_);
              if (iy < 0 || iy >= static_cast<long>(H)) continue;
              float* drow = dst + static_cast<std::size_t>(iy) * W;
              const float* srow = src + oy * Wo;
              for (std::size_t ox = 0; ox < Wo; ++ox) {
                const long ix = static_cast<long>(ox * stride_ + kx) - static_cast<long>(pad_);
                if (ix >= 0 && ix < static_cast<long>(W)) drow[ix] += srow[ox];
              }
            }
          }
        }
  }

  std::size_t cin_ = 0, cout_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
  Parameter weight_, bias_;
};

// ---------------------------------------------------------------------------

struct GroupNormCache {
  FloatTensor xhat;
  std::vector<float> inv_std;  // per (n, group)
};

/// Group normalization; statistics are per sample, so streams that share a
/// fused forward never see each other's activations.
class GroupNorm {
 public:
  GroupNorm() = default;
  GroupNorm(std::string name, ParamGroup group, std::size_t channels, std::size_t groups)
      : c_(channels), g_(groups),
        gamma_(name + ".gamma", group, FloatTensor({channels}, 1.0f)),
        beta_(name + ".beta", group, FloatTensor({channels}, 0.0f)) {
    require(groups >= 1 && channels % groups == 0, "GroupNorm: channels must divide into groups");
  }

  FloatTensor forward(const FloatTensor& x, GroupNormCache* cache) const {
    require(x.rank() == 4 && x.dim(1) == c_, "GroupNorm " + gamma_.name + ": bad input");
    const std::size_t B = x.dim(0), P = x.dim(2) * x.dim(3), cpg = c_ / g_, M = cpg * P;
    FloatTensor y(x.shape());
    FloatTensor xhat(x.shape());
    std::vector<float> inv(B * g_);
    for (std::size_t n = 0; n < B; ++n)
      for (std::size_t g = 0; g < g_; ++g) {
        const float* src = x.data() + (n * c_ + g * cpg) * P;
        double mean = 0, var = 0;
        for (std::size_t i = 0; i < M; ++i) mean += src[i];
        mean /= static_cast<double>(M);
        for (std::size_t i = 0; i < M; ++i) var += (src[i] - mean) * (src[i] - mean);
        var /= static_cast<double>(M);
        const float is = static_cast<float>(1.0 / std::sqrt(var + kEps));
        inv[n * g_ + g] = is;
        float* xh = xhat.data() + (n * c_ + g * cpg) * P;
        float* dst = y.data() + (n * c_ + g * cpg) * P;
        for (std::size_t c = 0; c < cpg; ++c) {
          const float ga = gamma_.value[g * cpg + c], be = beta_.value[g * cpg + c];
          for (std::size_t p = 0; p < P; ++p) {
            const std::size_t i = c * P + p;
            xh[i] = static_cast<float>((src[i] - mean) * is);
            dst[i] = ga * xh[i] + be;
          }
        }
      }
    if (cache) {
      cache->xhat = std::move(xhat);
      cache->inv_std = std::move(inv);
    }
    return y;
  }

  FloatTensor backward(const GroupNormCache& cache, const FloatTensor& dy) {
    require_same_shape(cache.xhat, dy, "GroupNorm backward");
    const std::size_t B = dy.dim(0), P = dy.dim(2) * dy.dim(3), cpg = c_ / g_, M = cpg * P;
    FloatTensor dx(dy.shape());
    for (std::size_t n = 0; n < B; ++n)
      for (std::size_t g = 0; g < g_; ++g) {
        const std::size_t base = (n * c_ + g * cpg) * P;
        const float* d = dy.data() + base;
        const float* xh = cache.xhat.data() + base;
        double sum_dxh = 0, sum_dxh_xh = 0;
        for (std::size_t c = 0; c < cpg; ++c) {
          const float ga = gamma_.value[g * cpg + c];
          double dg = 0, db = 0;
          for (std::size_t p = 0; p < P; ++p) {
            const std::size_t i = c * P + p;
            dg += d[i] * xh[i];
            db += d[i];
            const double dxh = d[i] * ga;
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[i];
          }
          if (gamma_.trainable) {
            gamma_.grad[g * cpg + c] += static_cast<float>(dg);
            beta_.grad[g * cpg + c] += static_cast<float>(db);
          }
        }
        const float is = cache.inv_std[n * g_ + g];
        const double mean_dxh = sum_dxh / static_cast<double>(M), mean_dxh_xh = sum_dxh_xh / static_cast<double>(M);
        float* out = dx.data() + base;
        for (std::size_t c = 0; c < cpg; ++c) {
          const float ga = gamma_.value[g * cpg + c];
          for (std::size_t p = 0; p < P; ++p) {
            const std::size_t i = c * P + p;
            out[i] = static_cast<float>(is * (d[i] * ga - mean_dxh - xh[i] * mean_dxh_xh));
          }
        }
      }
    return dx;
  }

  std::vector<Parameter*> parameters() { return {&gamma_, &beta_}; }
  std::vector<const Parameter*> parameters() const { return {&gamma_, &beta_}; }

 private:
  static constexpr double kEps = 1e-5;
  std::size_t c_ = 0, g_ = 1;
  Parameter gamma_, beta_;
};

inline std::size_t default_groups(std::size_t channels) { return channels % 4 == 0 ? 4 : 1; }

// ---------------------------------------------------------------------------

/// In-place ReLU; the output doubles as the backward mask.
inline void relu_inplace(FloatTensor& x) {
  for (auto& v : x.values()) v = v > 0.0f ? v : 0.0f;
}

inline void relu_backward_inplace(const FloatTensor& y, FloatTensor& dy) {
  require_same_shape(y, dy, "relu backward");
  for (std::size_t i = 0; i < dy.size(); ++i)
    if (y[i] <= 0.0f) dy[i] = 0.0f;
}

// ---------------------------------------------------------------------------

/// Bilinear resize with half-pixel centers (align_corners = false) on
/// (B,C,h,w) tensors, and its adjoint.
class BilinearResize {
 public:
  BilinearResize(std::size_t in_h, std::size_t in_w, std::size_t out_h, std::size_t out_w)
      : ih_(in_h), iw_(in_w), oh_(out_h), ow_(out_w), ys_(axis(in_h, out_h)), xs_(axis(in_w, out_w)) {}

  FloatTensor forward(const FloatTensor& x) const {
    require(x.rank() == 4 && x.dim(2) == ih_ && x.dim(3) == iw_, "BilinearResize: bad input");
    if (ih_ == oh_ && iw_ == ow_) return x;
    const std::size_t BC = x.dim(0) * x.dim(1);
    FloatTensor y({x.dim(0), x.dim(1), oh_, ow_});
    for (std::size_t bc = 0; bc < BC; ++bc) {
      const float* src = x.data() + bc * ih_ * iw_;
      float* dst = y.data() + bc * oh_ * ow_;
      for (std::size_t oy = 0; oy < oh_; ++oy) {
        const auto& a = ys_[oy];
        const float* r0 = src + a.i0 * iw_;
        const float* r1 = src + a.i1 * iw_;
        for (std::size_t ox = 0; ox < ow_; ++ox) {
          const auto& b = xs_[ox];
          const float top = r0[b.i0] * (1 - b.w) + r0[b.i1] * b.w;
          const float bot = r1[b.i0] * (1 - b.w) + r1[b.i1] * b.w;
          dst[oy * ow_ + ox] = top * (1 - a.w) + bot * a.w;
        }
      }
    }
    return y;
  }

  FloatTensor backward(const FloatTensor& dy) const {
    require(dy.rank() == 4 && dy.dim(2) == oh_ && dy.dim(3) == ow_, "BilinearResize: bad gradient");
    if (ih_ == oh_ && iw_ == ow_) return dy;
    const std::size_t BC = dy.dim(0) * dy.dim(1);
    FloatTensor dx({dy.dim(0), dy.dim(1), ih_, iw_});
    for (std::size_t bc = 0; bc < BC; ++bc) {
      const float* src = dy.data() + bc * oh_ * ow_;
      float* dst = dx.data() + bc * ih_ * iw_;
      for (std::size_t oy = 0; oy < oh_; ++oy) {
        const auto& a = ys_[oy];
        float* r0 = dst + a.i0 * iw_;
        float* r1 = dst + a.i1 * iw_;
        for (std::size_t ox = 0; ox < ow_; ++ox) {
          const auto& b = xs_[ox];
          const float g = src[oy * ow_ + ox];
          r0[b.i0] += g * (1 - a.w) * (1 - b.w);
          r0[b.i1] += g * (1 - a.w) * b.w;
          r1[b.i0] += g * a.w * (1 - b.w);
          r1[b.i1] += g * a.w * b.w;
        }
      }
    }
    return dx;
  }

 private:
  struct Tap {
    std::size_t i0, i1;
    float w;
  };
  static std::vector<Tap> axis(std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double s = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      const double f = std::clamp((o + 0.5) * s - 0.5, 0.0, static_cast<double>(in - 1));
      const auto i0 = static_cast<std::size_t>(f);
      t[o] = {i0, std::min(i0 + 1, in - 1), static_cast<float>(f - static_cast<double>(i0))};
    }
    return t;
  }

  std::size_t ih_, iw_, oh_, ow_;
  std::vector<Tap> ys_, xs_;
};

}  // namespace unimatch::nn
