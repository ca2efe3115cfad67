#pragma once

// Loss terms of the dual-student objective. Every differentiable loss takes an
// optional gradient output that receives dL/dp with respect to its first
// probability argument; softmax_backward() maps that onto logits.

#include <array>
#include <cmath>
#include <concepts>
#include <limits>
#include <utility>
#include <string>
#include <vector>

#include "dstcs/core.hpp"

namespace dstcs {

class NonFiniteLossError : public Error {
 public:
  using Error::Error;
};

inline constexpr double kDiceSmooth = 1e-5;
inline constexpr double kProbFloor = 1e-12;

struct LossWeights {
  double alpha = 0.5;  // hard pseudo-label cross supervision
  double beta = 1.0;   // sharpened soft pseudo-label consistency
  double gamma = 3.0;  // classifier determinacy disparity
  double mu = 0.1;     // teacher consistency
  double tau = 0.1;    // sharpening temperature

  bool unlabeled_terms_active() const noexcept { return alpha > 0 || beta > 0 || gamma > 0 || mu > 0; }
};

struct NWDiceConfig {
  int radius = 5;
  std::array<double, kNumClasses> class_weights{1.0, 2.0, 1.0};
  double smooth = kDiceSmooth;

  void validate() const {
    if (radius < 1) throw ConfigError("NW-Dice radius must be >= 1 (got " + std::to_string(radius) + ")");
    double total = 0;
    for (double w : class_weights) {
      if (!(w >= 0)) throw ConfigError("NW-Dice class weights must be non-negative");
      total += w;
    }
    if (!(total > 0)) throw ConfigError("at least one NW-Dice class weight must be positive");
    if (!(smooth > 0)) throw ConfigError("NW-Dice smooth term must be positive");
  }
};

/// Per-pixel, per-class non-negative weights (H x W x C, same layout as ProbabilityMap).
using WeightMap = ProbabilityMap<double>;

// ---------------------------------------------------------------------------

template <std::floating_point T>
T cross_entropy(const ProbabilityMap<T>& pred, const LabelMask& target, ProbabilityMap<T>* grad = nullptr) {
  require_same_shape(pred, target, "cross_entropy");
  const std::size_t n = pred.pixels();
  if (grad) *grad = ProbabilityMap<T>(pred.rows(), pred.cols(), pred.classes());
  T sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int t = target[i];
    if (t >= pred.classes()) throw Error("cross_entropy: target label " + std::to_string(t) + " out of range");
    const T p = pred.at(i, t);
    const T floor = static_cast<T>(kProbFloor);
    sum -= std::log(std::max(p, floor));
    if (grad && p > floor) grad->at(i, t) = T(-1) / (p * static_cast<T>(n));
  }
  return n ? sum / static_cast<T>(n) : T(0);
}

/// Dice over classes with optional per-pixel-per-class spatial weights and a
/// class-weighted average:
///   d_c = 1 - (2 sum w p g + s) / (sum w p + sum w g + s),  L = sum_c cw_c d_c / sum_c cw_c.
/// The smooth term s sits in numerator and denominator so a class absent from
/// both prediction and target contributes zero.
template <std::floating_point T>
T weighted_dice(const ProbabilityMap<T>& pred, const ProbabilityMap<T>& target, const WeightMap* spatial,
                const std::array<double, kNumClasses>* class_weights, double smooth,
                ProbabilityMap<T>* grad = nullptr) {
  require_same_shape(pred, target, "dice");
  if (spatial) require_same_shape(pred, *spatial, "dice weights");
  const int nc = pred.classes();
  const std::size_t n = pred.pixels();
  std::vector<T> inter(nc, 0), psum(nc, 0), gsum(nc, 0), cw(nc, 1);
  if (class_weights) {
    if (nc != kNumClasses) throw ShapeError("class weights require exactly kNumClasses classes");
    for (int c = 0; c < nc; ++c) cw[c] = static_cast<T>((*class_weights)[c]);
  }
  T cw_total = 0;
  for (int c = 0; c < nc; ++c) cw_total += cw[c];
  if (!(cw_total > 0)) throw ConfigError("dice: class weights sum to zero");

  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < nc; ++c) {
      const T w = spatial ? static_cast<T>(spatial->at(i, c)) : T(1);
      inter[c] += w * pred.at(i, c) * target.at(i, c);
      psum[c] += w * pred.at(i, c);
      gsum[c] += w * target.at(i, c);
    }

  const T s = static_cast<T>(smooth);
  T loss = 0;
  std::vector<T> num(nc), den(nc);
  for (int c = 0; c < nc; ++c) {
    num[c] = 2 * inter[c] + s;
    den[c] = psum[c] + gsum[c] + s;
    loss += cw[c] * (1 - num[c] / den[c]);
  }
  loss /= cw_total;

  if (grad) {
    *grad = ProbabilityMap<T>(pred.rows(), pred.cols(), nc);
    for (std::size_t i = 0; i < n; ++i)
      for (int c = 0; c < nc; ++c) {
        const T w = spatial ? static_cast<T>(spatial->at(i, c)) : T(1);
        const T dnum = 2 * w * target.at(i, c);
        grad->at(i, c) = -cw[c] * (dnum * den[c] - num[c] * w) / (den[c] * den[c]) / cw_total;
      }
  }
  return loss;
}

template <std::floating_point T>
T dice_loss(const ProbabilityMap<T>& pred, const ProbabilityMap<T>& target_onehot, ProbabilityMap<T>* grad = nullptr) {
  return weighted_dice(pred, target_onehot, nullptr, nullptr, kDiceSmooth, grad);
}

template <std::floating_point T>
T dice_loss(const ProbabilityMap<T>& pred, const LabelMask& target, ProbabilityMap<T>* grad = nullptr) {
  require_same_shape(pred, target, "dice_loss");
  return dice_loss(pred, one_hot<T>(target, pred.classes()), grad);
}

/// Class-weighted plain Dice; equals nw_dice_loss when every spatial weight is 1.
template <std::floating_point T>
T class_weighted_dice_loss(const ProbabilityMap<T>& pred, const LabelMask& target, const NWDiceConfig& cfg,
                           ProbabilityMap<T>* grad = nullptr) {
  require_same_shape(pred, target, "class_weighted_dice_loss");
  cfg.validate();
  return weighted_dice(pred, one_hot<T>(target, pred.classes()), nullptr, &cfg.class_weights, cfg.smooth, grad);
}

// ---------------------------------------------------------------------------
// Neighborhood weighted Dice

namespace detail {

/// Zero-padded integral image of a per-class indicator raster.
class BoxCounter {
 public:
  BoxCounter(const LabelMask& labels, int cls) : rows_(labels.rows()), cols_(labels.cols()) {
    sat_.assign(static_cast<std::size_t>(rows_ + 1) * (cols_ + 1), 0);
    for (int r = 0; r < rows_; ++r)
      for (int c = 0; c < cols_; ++c)
        at(r + 1, c + 1) = (labels(r, c) == cls ? 1 : 0) + at(r, c + 1) + at(r + 1, c) - at(r, c);
  }

  /// Number of class pixels in the (2k+1)x(2k+1) window centred at (r, c).
  int box(int r, int c, int k) const {
    const int r0 = std::max(r - k, 0), r1 = std::min(r + k + 1, rows_);
    const int c0 = std::max(c - k, 0), c1 = std::min(c + k + 1, cols_);
    return at(r1, c1) - at(r0, c1) - at(r1, c0) + at(r0, c0);
  }

 private:
  int& at(int r, int c) { return sat_[static_cast<std::size_t>(r) * (cols_ + 1) + c]; }
  int at(int r, int c) const { return sat_[static_cast<std::size_t>(r) * (cols_ + 1) + c]; }
  int rows_, cols_;
  std::vector<int> sat_;
};

}  // namespace detail

/// w^c_ij = 1 + #{k in 1..r : N_k(pred==c)_ij != N_k(target==c)_ij}, with N_k a
/// zero-padded (2k+1)x(2k+1) box count. Integer valued, in [1, 1+r].
inline WeightMap nw_dice_weights(const LabelMask& pred_labels, const LabelMask& target, const NWDiceConfig& cfg) {
  require_same_shape(pred_labels, target, "nw_dice_weights");
  cfg.validate();
  const int rows = target.rows(), cols = target.cols();
  WeightMap w(rows, cols, kNumClasses, 1.0);
  for (int cls = 0; cls < kNumClasses; ++cls) {
    const detail::BoxCounter pc(pred_labels, cls), gc(target, cls);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        int disagree = 0;
        for (int k = 1; k <= cfg.radius; ++k) disagree += pc.box(r, c, k) != gc.box(r, c, k);
        w(r, c, cls) = 1.0 + disagree;
      }
  }
  return w;
}

/// Weights come from argmax(pred) and carry no gradient.
template <std::floating_point T>
T nw_dice_loss(const ProbabilityMap<T>& pred, const LabelMask& target, const NWDiceConfig& cfg,
               ProbabilityMap<T>* grad = nullptr) {
  require_same_shape(pred, target, "nw_dice_loss");
  const WeightMap w = nw_dice_weights(argmax(pred), target, cfg);
  return weighted_dice(pred, one_hot<T>(target, pred.classes()), &w, &cfg.class_weights, cfg.smooth, grad);
}

// ---------------------------------------------------------------------------

/// Selects the Dice flavour used inside the supervised and hard pseudo-label terms.
struct SegmentationDice {
  bool neighborhood_weighted = false;
  NWDiceConfig nw{};

  template <std::floating_point T>
  T operator()(const ProbabilityMap<T>& pred, const LabelMask& target, ProbabilityMap<T>* grad) const {
    return neighborhood_weighted ? nw_dice_loss(pred, target, nw, grad) : dice_loss(pred, target, grad);
  }
};

/// 0.5 * (CE + Dice).
template <std::floating_point T>
T supervised_loss(const ProbabilityMap<T>& pred, const LabelMask& target, ProbabilityMap<T>* grad = nullptr,
                  const SegmentationDice& dice = {}) {
  ProbabilityMap<T> g_ce, g_dice;
  const T ce = cross_entropy(pred, target, grad ? &g_ce : nullptr);
  const T d = dice(pred, target, grad ? &g_dice : nullptr);
  if (grad) {
    *grad = ProbabilityMap<T>(pred.rows(), pred.cols(), pred.classes());
    for (std::size_t i = 0; i < grad->size(); ++i) (*grad)[i] = T(0.5) * (g_ce[i] + g_dice[i]);
  }
  return T(0.5) * (ce + d);
}

/// Dice of pred_a against the hard labels argmax(pred_b); pred_b is a constant.
template <std::floating_point T>
T hard_cross_supervision(const ProbabilityMap<T>& pred_a, const ProbabilityMap<T>& pred_b,
                         ProbabilityMap<T>* grad_a = nullptr, const SegmentationDice& dice = {}) {
  require_same_shape(pred_a, pred_b, "hard_cross_supervision");
  return dice(pred_a, argmax(pred_b), grad_a);
}

/// Temperature sharpening p_c^(1/tau) / sum_k p_k^(1/tau), computed in log space.
template <std::floating_point T>
ProbabilityMap<T> sharpen(const ProbabilityMap<T>& p, double tau) {
  if (!(tau > 0)) throw ConfigError("sharpen: tau must be positive");
  ProbabilityMap<T> out(p.rows(), p.cols(), p.classes());
  const int nc = p.classes();
  const T inv = static_cast<T>(1.0 / tau);
  std::vector<T> logs(nc);
  for (std::size_t i = 0; i < p.pixels(); ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (int k = 0; k < nc; ++k) {
      logs[k] = p.at(i, k) > 0 ? inv * std::log(p.at(i, k)) : -std::numeric_limits<T>::infinity();
      mx = std::max(mx, logs[k]);
    }
    if (!std::isfinite(mx)) {  // all-zero row: leave uniform
      for (int k = 0; k < nc; ++k) out.at(i, k) = T(1) / nc;
      continue;
    }
    T sum = 0;
    for (int k = 0; k < nc; ++k) sum += (out.at(i, k) = std::exp(logs[k] - mx));
    for (int k = 0; k < nc; ++k) out.at(i, k) /= sum;
  }
  return out;
}

/// Mean squared error over every element; the target is a constant.
template <std::floating_point T>
T soft_consistency(const ProbabilityMap<T>& pred, const ProbabilityMap<T>& soft_target,
                   ProbabilityMap<T>* grad = nullptr) {
  require_same_shape(pred, soft_target, "soft_consistency");
  const std::size_t n = pred.size();
  if (grad) *grad = ProbabilityMap<T>(pred.rows(), pred.cols(), pred.classes());
  T sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T d = pred[i] - soft_target[i];
    sum += d * d;
    if (grad) (*grad)[i] = 2 * d / static_cast<T>(n);
  }
  return n ? sum / static_cast<T>(n) : T(0);
}

/// Off-diagonal mass of the per-pixel relevance matrix A = p1 p2^T, averaged
/// over pixels: sum_{m,n} A - trace(A). Both inputs are differentiable.
template <std::floating_point T>
T cdd_loss(const ProbabilityMap<T>& p1, const ProbabilityMap<T>& p2, ProbabilityMap<T>* grad1 = nullptr,
           ProbabilityMap<T>* grad2 = nullptr) {
  require_same_shape(p1, p2, "cdd_loss");
  const std::size_t n = p1.pixels();
  const int nc = p1.classes();
  if (grad1) *grad1 = ProbabilityMap<T>(p1.rows(), p1.cols(), nc);
  if (grad2) *grad2 = ProbabilityMap<T>(p1.rows(), p1.cols(), nc);
  const T inv_n = n ? T(1) / static_cast<T>(n) : T(0);
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    T s1 = 0, s2 = 0, trace = 0;
    for (int k = 0; k < nc; ++k) {
      s1 += p1.at(i, k);
      s2 += p2.at(i, k);
      trace += p1.at(i, k) * p2.at(i, k);
    }
    total += s1 * s2 - trace;
    for (int k = 0; k < nc; ++k) {
      if (grad1) grad1->at(i, k) = (s2 - p2.at(i, k)) * inv_n;
      if (grad2) grad2->at(i, k) = (s1 - p1.at(i, k)) * inv_n;
    }
  }
  return total * inv_n;
}

// ---------------------------------------------------------------------------

struct LossComponents {
  double l_sup = 0, l_h = 0, l_s = 0, l_cdd = 0, l_cr = 0;
};

struct LossBundle {
  double l_sup = 0, l_h = 0, l_s = 0, l_cdd = 0, l_cr = 0, l_total = 0;

  double recomposed(const LossWeights& w) const noexcept {
    return l_sup + w.alpha * l_h + w.beta * l_s + w.gamma * l_cdd + w.mu * l_cr;
  }
  friend bool operator==(const LossBundle&, const LossBundle&) = default;
};

inline LossBundle total_loss(const LossComponents& c, const LossWeights& w) {
  const std::pair<const char*, double> named[] = {
      {"l_sup", c.l_sup}, {"l_h", c.l_h}, {"l_s", c.l_s}, {"l_cdd", c.l_cdd}, {"l_cr", c.l_cr}};
  for (const auto& [name, v] : named)
    if (!std::isfinite(v)) throw NonFiniteLossError(std::string("non-finite loss component ") + name);
  LossBundle b{c.l_sup, c.l_h, c.l_s, c.l_cdd, c.l_cr, 0.0};
  b.l_total = b.recomposed(w);
  return b;
}

}  // namespace dstcs
