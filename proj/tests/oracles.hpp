#pragma once

// Brute-force reference implementations shared by the unit tests and the
// acceptance binary. Written as plain loops, independent of the library code.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "dstcs/core.hpp"

namespace dstcs::oracle {

// ---- losses ---------------------------------------------------------------

inline double ce_oracle(const ProbabilityMap<double>& p, const LabelMask& y) {
  double s = 0;
  for (int r = 0; r < y.rows(); ++r)
    for (int c = 0; c < y.cols(); ++c) s -= std::log(std::max(p(r, c, y(r, c)), 1e-12));
  return s / (y.rows() * y.cols());
}

/// Plain Dice, with the same smoothing placement as the library (in numerator and denominator).
inline double dice_oracle(const ProbabilityMap<double>& p, const LabelMask& y, double smooth) {
  double total = 0;
  for (int k = 0; k < kNumClasses; ++k) {
    double inter = 0, ps = 0, gs = 0;
    for (int r = 0; r < y.rows(); ++r)
      for (int c = 0; c < y.cols(); ++c) {
        const double g = y(r, c) == k ? 1.0 : 0.0;
        inter += p(r, c, k) * g;
        ps += p(r, c, k);
        gs += g;
      }
    total += 1.0 - (2 * inter + smooth) / (ps + gs + smooth);
  }
  return total / kNumClasses;
}

inline int box_count_oracle(const LabelMask& m, int cls, int r, int c, int k) {
  int n = 0;
  for (int dr = -k; dr <= k; ++dr)
    for (int dc = -k; dc <= k; ++dc) {
      const int rr = r + dr, cc = c + dc;
      if (rr < 0 || cc < 0 || rr >= m.rows() || cc >= m.cols()) continue;
      n += m(rr, cc) == cls;
    }
  return n;
}

inline double nw_dice_oracle(const ProbabilityMap<double>& p, const LabelMask& y, int radius,
                      const std::array<double, 3>& cw, double smooth) {
  // hard prediction, lowest index on ties
  LabelMask hard(y.rows(), y.cols());
  for (int r = 0; r < y.rows(); ++r)
    for (int c = 0; c < y.cols(); ++c) {
      int best = 0;
      for (int k = 1; k < kNumClasses; ++k)
        if (p(r, c, k) > p(r, c, best)) best = k;
      hard(r, c) = static_cast<std::uint8_t>(best);
    }
  double total = 0, wsum = 0;
  for (int k = 0; k < kNumClasses; ++k) {
    double inter = 0, ps = 0, gs = 0;
    for (int r = 0; r < y.rows(); ++r)
      for (int c = 0; c < y.cols(); ++c) {
        double w = 1;
        for (int j = 1; j <= radius; ++j)
          w += box_count_oracle(hard, k, r, c, j) != box_count_oracle(y, k, r, c, j) ? 1 : 0;
        w *= cw[k];
        const double g = y(r, c) == k ? 1.0 : 0.0;
        inter += w * p(r, c, k) * g;
        ps += w * p(r, c, k);
        gs += w * g;
      }
    const double d = 1.0 - 2 * inter / (ps + gs + smooth);
    total += cw[k] * d;
    wsum += cw[k];
  }
  return total / wsum;
}

inline double mse_oracle(const ProbabilityMap<double>& a, const ProbabilityMap<double>& b) {
  double s = 0;
  for (int r = 0; r < a.rows(); ++r)
    for (int c = 0; c < a.cols(); ++c)
      for (int k = 0; k < a.classes(); ++k) s += (a(r, c, k) - b(r, c, k)) * (a(r, c, k) - b(r, c, k));
  return s / (a.rows() * a.cols() * a.classes());
}

inline double cdd_oracle(const ProbabilityMap<double>& p1, const ProbabilityMap<double>& p2) {
  double s = 0;
  for (int r = 0; r < p1.rows(); ++r)
    for (int c = 0; c < p1.cols(); ++c)
      for (int m = 0; m < kNumClasses; ++m)
        for (int n = 0; n < kNumClasses; ++n)
          if (m != n) s += p1(r, c, m) * p2(r, c, n);
  return s / (p1.rows() * p1.cols());
}

// ---- metrics --------------------------------------------------------------

inline double dsc_oracle(const LabelMask& p, const LabelMask& g, int k) {
  long inter = 0, np = 0, ng = 0;
  for (int r = 0; r < p.rows(); ++r)
    for (int c = 0; c < p.cols(); ++c) {
      inter += p(r, c) == k && g(r, c) == k;
      np += p(r, c) == k;
      ng += g(r, c) == k;
    }
  if (np + ng == 0) return 1.0;
  return 2.0 * inter / static_cast<double>(np + ng);
}

inline std::vector<std::pair<int, int>> boundary_oracle(const LabelMask& m, int k) {
  std::vector<std::pair<int, int>> out;
  auto inside = [&](int r, int c) { return r >= 0 && c >= 0 && r < m.rows() && c < m.cols() && m(r, c) == k; };
  for (int r = 0; r < m.rows(); ++r)
    for (int c = 0; c < m.cols(); ++c)
      if (m(r, c) == k && (!inside(r - 1, c) || !inside(r + 1, c) || !inside(r, c - 1) || !inside(r, c + 1)))
        out.emplace_back(r, c);
  return out;
}

inline std::vector<double> directed_oracle(const std::vector<std::pair<int, int>>& from,
                                    const std::vector<std::pair<int, int>>& to) {
  std::vector<double> out;
  for (auto [r, c] : from) {
    double best = std::numeric_limits<double>::infinity();
    for (auto [rr, cc] : to) best = std::min(best, std::sqrt(double((r - rr) * (r - rr) + (c - cc) * (c - cc))));
    out.push_back(best);
  }
  return out;
}

inline double percentile_oracle(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double rank = q / 100.0 * (v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(rank);
  if (lo + 1 >= v.size()) return v.back();
  return v[lo] + (rank - lo) * (v[lo + 1] - v[lo]);
}

struct OracleResult {
  double asd, hd95;
  bool absent, missed;
  std::vector<double> p2g, g2p;
};

inline OracleResult surface_oracle(const LabelMask& p, const LabelMask& g, int k) {
  const auto bp = boundary_oracle(p, k), bg = boundary_oracle(g, k);
  OracleResult o{0, 0, bp.empty() && bg.empty(), bp.empty() && !bg.empty(), {}, {}};
  if (o.absent) return o;
  if (bp.empty() || bg.empty()) {
    o.asd = o.hd95 = std::hypot(p.rows(), p.cols());
    return o;
  }
  o.p2g = directed_oracle(bp, bg);
  o.g2p = directed_oracle(bg, bp);
  double s1 = 0, s2 = 0;
  for (double d : o.p2g) s1 += d;
  for (double d : o.g2p) s2 += d;
  o.asd = 0.5 * (s1 / o.p2g.size() + s2 / o.g2p.size());
  std::vector<double> pooled = o.p2g;
  pooled.insert(pooled.end(), o.g2p.begin(), o.g2p.end());
  o.hd95 = percentile_oracle(pooled, 95.0);
  return o;
}

}  // namespace dstcs::oracle
