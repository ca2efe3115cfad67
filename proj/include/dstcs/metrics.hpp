#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "dstcs/core.hpp"

namespace dstcs {

/// 2|P n G| / (|P| + |G|); 1 when both are empty.
inline double dsc(const LabelMask& pred, const LabelMask& gt, int class_id) {
  require_same_shape(pred, gt, "dsc");
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] == class_id, b = gt[i] == class_id;
    p += a;
    g += b;
    both += a && b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

/// Class pixels with at least one 4-neighbour outside the class; the image border counts as outside.
inline Grid<std::uint8_t> boundary(const LabelMask& mask, int class_id) {
  const int rows = mask.rows(), cols = mask.cols();
  Grid<std::uint8_t> out(rows, cols, 0);
  auto inside = [&](int r, int c) { return r >= 0 && r < rows && c >= 0 && c < cols && mask(r, c) == class_id; };
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      if (mask(r, c) == class_id &&
          (!inside(r - 1, c) || !inside(r + 1, c) || !inside(r, c - 1) || !inside(r, c + 1)))
        out(r, c) = 1;
  return out;
}

/// Exact squared Euclidean distance to the nearest set pixel (lower envelope of
/// parabolas, integer arithmetic). Returns -1 everywhere when no pixel is set.
inline Grid<std::int64_t> squared_distance_transform(const Grid<std::uint8_t>& set) {
  const int rows = set.rows(), cols = set.cols();
  constexpr std::int64_t kInf = std::numeric_limits<std::int64_t>::max() / 4;
  Grid<std::int64_t> d(rows, cols, kInf);
  bool any = false;
  for (std::size_t i = 0; i < set.size(); ++i)
    if (set[i]) d[i] = 0, any = true;
  if (!any) return Grid<std::int64_t>(rows, cols, -1);

  // One-dimensional pass over a line of n samples f; finite samples only define parabolas.
  auto pass = [](std::vector<std::int64_t>& f) {
    const int n = static_cast<int>(f.size());
    std::vector<int> v(n);
    std::vector<double> z(n + 1);
    std::vector<std::int64_t> out(n);
    int k = -1;
    for (int q = 0; q < n; ++q) {
      if (f[q] >= kInf) continue;
      if (k < 0) {
        k = 0, v[0] = q, z[0] = -std::numeric_limits<double>::infinity(), z[1] = std::numeric_limits<double>::infinity();
        continue;
      }
      const auto intersect = [&](int a) {
        const std::int64_t num = (f[q] + std::int64_t(q) * q) - (f[a] + std::int64_t(a) * a);
        return static_cast<double>(num) / (2.0 * (q - a));
      };
      double s = intersect(v[k]);
      while (s <= z[k]) s = intersect(v[--k]);  // z[0] = -inf stops the walk
      ++k;
      v[k] = q;
      z[k] = s;
      z[k + 1] = std::numeric_limits<double>::infinity();
    }
    if (k < 0) return;  // line without finite samples stays infinite
    int j = 0;
    for (int q = 0; q < n; ++q) {
      while (z[j + 1] < q) ++j;
      // Ties at the breakpoint evaluate to the same value, so either parabola is exact.
      const std::int64_t dq = q - v[j];
      out[q] = dq * dq + f[v[j]];
    }
    f = std::move(out);
  };

  std::vector<std::int64_t> line;
  line.resize(rows);
  for (int c = 0; c < cols; ++c) {
    for (int r = 0; r < rows; ++r) line[r] = d(r, c);
    pass(line);
    for (int r = 0; r < rows; ++r) d(r, c) = line[r];
  }
  line.resize(cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) line[c] = d(r, c);
    pass(line);
    for (int c = 0; c < cols; ++c) d(r, c) = line[c];
  }
  return d;
}

/// Linear-interpolation percentile (q in [0, 100]) of an unsorted sample.
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + (values[hi] - values[lo]) * frac;
}

struct SurfaceDistanceResult {
  double dsc = 1.0;
  double asd = 0.0;
  double hd95 = 0.0;
  bool absent = false;  // class in neither mask: excluded from aggregates
  bool missed = false;  // class in ground truth but not in prediction
};

struct DirectedDistances {
  std::vector<double> pred_to_gt;
  std::vector<double> gt_to_pred;
};

/// Boundary-to-boundary distances in both directions via the exact distance transform.
inline DirectedDistances directed_boundary_distances(const LabelMask& pred, const LabelMask& gt, int class_id,
                                                     double spacing = 1.0) {
  require_same_shape(pred, gt, "surface_distances");
  const auto bp = boundary(pred, class_id), bg = boundary(gt, class_id);
  const auto dt_g = squared_distance_transform(bg), dt_p = squared_distance_transform(bp);
  DirectedDistances out;
  for (std::size_t i = 0; i < bp.size(); ++i) {
    if (bp[i] && dt_g[i] >= 0) out.pred_to_gt.push_back(spacing * std::sqrt(static_cast<double>(dt_g[i])));
    if (bg[i] && dt_p[i] >= 0) out.gt_to_pred.push_back(spacing * std::sqrt(static_cast<double>(dt_p[i])));
  }
  return out;
}

inline double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

/// ASD is the mean of the two directed average distances; HD95 is the 95th
/// percentile of both directed sets pooled. A class present in only one mask
/// scores the image diagonal for both distances.
inline SurfaceDistanceResult surface_distances(const LabelMask& pred, const LabelMask& gt, int class_id,
                                               double spacing = 1.0) {
  require_same_shape(pred, gt, "surface_distances");
  SurfaceDistanceResult res;
  res.dsc = dsc(pred, gt, class_id);
  bool in_pred = false, in_gt = false;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    in_pred |= pred[i] == class_id;
    in_gt |= gt[i] == class_id;
  }
  if (!in_pred && !in_gt) {
    res.absent = true;
    return res;
  }
  if (in_pred != in_gt) {
    const double diag = spacing * std::hypot(pred.rows(), pred.cols());
    res.asd = res.hd95 = diag;
    res.missed = in_gt;
    return res;
  }
  const auto d = directed_boundary_distances(pred, gt, class_id, spacing);
  res.asd = 0.5 * (mean(d.pred_to_gt) + mean(d.gt_to_pred));
  std::vector<double> pooled = d.pred_to_gt;
  pooled.insert(pooled.end(), d.gt_to_pred.begin(), d.gt_to_pred.end());
  res.hd95 = percentile(std::move(pooled), 95.0);
  return res;
}

// ---------------------------------------------------------------------------
// Corpus-level aggregation in the (PS / FH / PSFH) layout.

struct StructureSummary {
  double dsc = 0, asd = 0, hd95 = 0;
  int evaluated = 0;  // images where the class was present in at least one mask
  int missed = 0;
};

struct ImageRecord {
  int id = 0;
  SurfaceDistanceResult ps;
  SurfaceDistanceResult fh;
};

struct EvaluationReport {
  StructureSummary ps;
  StructureSummary fh;
  int images = 0;
  int images_with_miss = 0;  // images where PS or FH was entirely missed
  std::vector<ImageRecord> records;

  double psfh_dsc() const noexcept { return 0.5 * (ps.dsc + fh.dsc); }
  double psfh_asd() const noexcept { return 0.5 * (ps.asd + fh.asd); }
  double psfh_hd95() const noexcept { return 0.5 * (ps.hd95 + fh.hd95); }
};

/// Evaluates a predictor over (id, image, mask) items; images are visited in order.
template <typename Items, typename Predict>
EvaluationReport evaluate_corpus(const Items& items, Predict&& predict, double spacing = 1.0) {
  EvaluationReport rep;
  for (const auto& item : items) {
    const auto& [id, image, gt] = item;
    const LabelMask pred = predict(image);
    ImageRecord rec{id, surface_distances(pred, gt, kPS, spacing), surface_distances(pred, gt, kFH, spacing)};
    for (auto [r, s] : {std::pair{&rec.ps, &rep.ps}, std::pair{&rec.fh, &rep.fh}}) {
      if (r->absent) continue;
      s->dsc += r->dsc;
      s->asd += r->asd;
      s->hd95 += r->hd95;
      ++s->evaluated;
      s->missed += r->missed;
    }
    rep.images_with_miss += rec.ps.missed || rec.fh.missed;
    rep.records.push_back(rec);
    ++rep.images;
  }
  if (rep.images == 0) throw Error("evaluate_corpus: dataset is empty");
  for (auto* s : {&rep.ps, &rep.fh})
    if (s->evaluated > 0) s->dsc /= s->evaluated, s->asd /= s->evaluated, s->hd95 /= s->evaluated;
  return rep;
}

inline std::string triple(double ps, double fh, double psfh) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3) << ps << '/' << fh << '/' << psfh;
  return os.str();
}

inline constexpr const char* kReportHeader = "method\tDSC(PS/FH/PSFH)\tASD(PS/FH/PSFH)\tHD95(PS/FH/PSFH)\tLossing";

/// One tab-delimited row: name, DSC, ASD, HD95 triples and the missed-structure count.
inline std::string report_row(const std::string& name, const EvaluationReport& r) {
  std::ostringstream os;
  os << name << '\t' << triple(r.ps.dsc, r.fh.dsc, r.psfh_dsc()) << '\t' << triple(r.ps.asd, r.fh.asd, r.psfh_asd())
     << '\t' << triple(r.ps.hd95, r.fh.hd95, r.psfh_hd95()) << '\t' << r.images_with_miss;
  return os.str();
}

inline void write_image_records(std::ostream& os, const EvaluationReport& r) {
  os << "id\tclass\tdsc\tasd\thd95\tmissed\n";
  os << std::setprecision(10);
  for (const auto& rec : r.records)
    for (auto [name, s] : {std::pair{"PS", &rec.ps}, std::pair{"FH", &rec.fh}}) {
      os << rec.id << '\t' << name << '\t';
      if (s->absent) os << "nan\tnan\tnan\t0\n";
      else os << s->dsc << '\t' << s->asd << '\t' << s->hd95 << '\t' << (s->missed ? 1 : 0) << '\n';
    }
}

}  // namespace dstcs
