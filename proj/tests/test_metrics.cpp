#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>
#include <tuple>
#include <vector>

#include "dstcs/metrics.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace dstcs;
using namespace dstcs::testing;
using namespace dstcs::oracle;

namespace {

LabelMask square(int rows, int cols, int r0, int c0, int size, std::uint8_t cls) {
  LabelMask m(rows, cols, kBackground);
  for (int r = r0; r < r0 + size; ++r)
    for (int c = c0; c < c0 + size; ++c) m(r, c) = cls;
  return m;
}

}  // namespace

// ---- DSC ------------------------------------------------------------------

TEST(Dsc, IdenticalAndDisjoint) {
  const auto a = square(8, 8, 1, 1, 3, kPS), b = square(8, 8, 5, 5, 3, kPS);
  EXPECT_EQ(dsc(a, a, kPS), 1.0);
  EXPECT_EQ(dsc(a, b, kPS), 0.0);
}

TEST(Dsc, ShiftedSquare) {
  const auto p = square(8, 8, 2, 2, 3, kPS), g = square(8, 8, 2, 3, 3, kPS);
  EXPECT_NEAR(dsc(p, g, kPS), 12.0 / 18.0, 1e-12);
}

TEST(Dsc, EmptyConventions) {
  const LabelMask empty(6, 6, kBackground);
  const auto one = square(6, 6, 1, 1, 2, kFH);
  EXPECT_EQ(dsc(empty, empty, kFH), 1.0);
  EXPECT_EQ(dsc(one, empty, kFH), 0.0);
  EXPECT_EQ(dsc(empty, one, kFH), 0.0);
}

TEST(Dsc, MonotoneUnderDilationTowardTruth) {
  // nested squares: growing the prediction inside the truth never lowers DSC
  const auto g = square(16, 16, 2, 2, 12, kFH);
  double last = -1;
  for (int s = 2; s <= 12; s += 2) {
    const int off = 2 + (12 - s) / 2;
    const double d = dsc(square(16, 16, off, off, s, kFH), g, kFH);
    EXPECT_GE(d, last);
    last = d;
  }
}

// ---- distances --------------------------------------------------------------

TEST(SurfaceDistances, IdenticalMasks) {
  Rng rng = make_rng(1, {});
  const auto m = random_blob_mask(rng, 16, 16);
  for (int k : {1, 2}) {
    const auto r = surface_distances(m, m, k);
    if (r.absent) continue;
    EXPECT_EQ(r.dsc, 1.0);
    EXPECT_EQ(r.asd, 0.0);
    EXPECT_EQ(r.hd95, 0.0);
  }
}

TEST(SurfaceDistances, TwoSinglePixels) {
  LabelMask p(16, 16, kBackground), g(16, 16, kBackground);
  p(3, 4) = kPS;
  g(3, 9) = kPS;
  const auto r = surface_distances(p, g, kPS);
  EXPECT_EQ(r.asd, 5.0);
  EXPECT_EQ(r.hd95, 5.0);
}

TEST(SurfaceDistances, BoundaryUsesFourNeighboursAndImageBorder) {
  const auto m = square(5, 5, 0, 0, 5, kFH);  // fills the image; only the rim is boundary
  const auto b = boundary(m, kFH);
  int n = 0;
  for (std::size_t i = 0; i < b.size(); ++i) n += b[i];
  EXPECT_EQ(n, 16);
  EXPECT_EQ(b(2, 2), 0);
}

TEST(SurfaceDistances, MissedAndAbsentFlags) {
  const LabelMask empty(8, 8, kBackground);
  const auto g = square(8, 8, 2, 2, 3, kPS);
  const auto missed = surface_distances(empty, g, kPS);
  EXPECT_TRUE(missed.missed);
  EXPECT_FALSE(missed.absent);
  EXPECT_NEAR(missed.hd95, std::hypot(8.0, 8.0), 1e-12);
  const auto extra = surface_distances(g, empty, kPS);
  EXPECT_FALSE(extra.missed);
  const auto absent = surface_distances(empty, empty, kPS);
  EXPECT_TRUE(absent.absent);
}

TEST(SurfaceDistances, MatchBruteForceOnRandomMasks) {
  Rng rng = make_rng(2, {});
  int compared = 0;
  for (int t = 0; t < 100; ++t) {
    const auto p = t % 2 ? random_blob_mask(rng, 16, 16, 4) : random_mask(rng, 16, 16);
    const auto g = random_blob_mask(rng, 16, 16, 4);
    for (int k : {1, 2}) {
      const auto fast = surface_distances(p, g, k);
      const auto slow = surface_oracle(p, g, k);
      ASSERT_EQ(fast.absent, slow.absent);
      ASSERT_EQ(fast.missed, slow.missed);
      EXPECT_NEAR(fast.dsc, dsc_oracle(p, g, k), 1e-12);
      if (fast.absent) continue;
      const auto d = directed_boundary_distances(p, g, k);
      if (!slow.p2g.empty()) {
        EXPECT_EQ(d.pred_to_gt, slow.p2g);
        EXPECT_EQ(d.gt_to_pred, slow.g2p);
      }
      EXPECT_EQ(fast.asd, slow.asd);
      EXPECT_EQ(fast.hd95, slow.hd95);
      ++compared;
    }
  }
  EXPECT_GT(compared, 150);
}

TEST(SurfaceDistances, Symmetric) {
  Rng rng = make_rng(3, {});
  for (int t = 0; t < 50; ++t) {
    const auto a = random_blob_mask(rng, 16, 16), b = random_blob_mask(rng, 16, 16);
    for (int k : {1, 2}) {
      const auto ab = surface_distances(a, b, k), ba = surface_distances(b, a, k);
      if (ab.absent || ab.missed || ba.missed) continue;
      EXPECT_NEAR(ab.asd, ba.asd, 1e-12);
      EXPECT_NEAR(ab.hd95, ba.hd95, 1e-12);
    }
  }
}

TEST(SurfaceDistances, HdBoundedByDiagonal) {
  Rng rng = make_rng(4, {});
  for (int t = 0; t < 50; ++t) {
    const auto a = random_mask(rng, 16, 16), b = random_blob_mask(rng, 16, 16);
    for (int k : {1, 2}) {
      const auto r = surface_distances(a, b, k);
      EXPECT_GE(r.hd95, 0.0);
      EXPECT_LE(r.hd95, std::hypot(16.0, 16.0));
    }
  }
}

TEST(SurfaceDistances, SpacingScalesDistances) {
  LabelMask p(16, 16, kBackground), g(16, 16, kBackground);
  p(3, 4) = kPS;
  g(3, 9) = kPS;
  EXPECT_EQ(surface_distances(p, g, kPS, 0.5).asd, 2.5);
}

TEST(DistanceTransform, EmptySetIsMinusOne) {
  const Grid<std::uint8_t> none(4, 4, 0);
  const auto d = squared_distance_transform(none);
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_EQ(d[i], -1);
}

TEST(Percentile, LinearInterpolation) {
  EXPECT_EQ(percentile({1, 2, 3, 4, 5}, 50), 3.0);
  EXPECT_NEAR(percentile({0, 10}, 95), 9.5, 1e-12);
  EXPECT_EQ(percentile({7}, 95), 7.0);
}

// ---- corpus evaluation ------------------------------------------------------

TEST(EvaluateCorpus, PerfectPredictions) {
  Rng rng = make_rng(5, {});
  std::vector<LabelMask> masks;
  Image img(16, 16);
  for (int i = 0; i < 5; ++i) {
    auto m = square(16, 16, 1, 1, 9, kFH);
    for (int r = 11; r < 14; ++r)
      for (int c = 2; c < 8; ++c) m(r, c) = kPS;
    masks.push_back(m);
  }
  std::vector<std::tuple<int, const Image&, const LabelMask&>> items;
  for (int i = 0; i < 5; ++i) items.emplace_back(i, img, masks[i]);
  std::size_t k = 0;
  const auto rep = evaluate_corpus(items, [&](const Image&) { return masks[k++]; });
  EXPECT_EQ(rep.psfh_dsc(), 1.0);
  EXPECT_EQ(rep.ps.asd + rep.fh.asd + rep.ps.hd95 + rep.fh.hd95, 0.0);
  EXPECT_EQ(rep.images_with_miss, 0);
  EXPECT_EQ(report_row("oracle", rep), "oracle\t1.000/1.000/1.000\t0.000/0.000/0.000\t0.000/0.000/0.000\t0");
}

TEST(EvaluateCorpus, PsfhIsMeanOfStructures) {
  EvaluationReport r;
  r.ps.dsc = 0.8;
  r.fh.dsc = 0.9;
  EXPECT_NEAR(r.psfh_dsc(), 0.85, 1e-15);
}

TEST(EvaluateCorpus, MissedStructureIsCounted) {
  const auto gt = square(16, 16, 2, 2, 6, kFH);
  auto gt2 = gt;
  gt2(14, 14) = kPS;
  Image img(16, 16);
  std::vector<std::tuple<int, const Image&, const LabelMask&>> items{{0, img, gt2}};
  const auto rep = evaluate_corpus(items, [&](const Image&) { return gt; });
  EXPECT_EQ(rep.images_with_miss, 1);
  EXPECT_EQ(rep.ps.missed, 1);
}

TEST(EvaluateCorpus, EmptyDatasetThrows) {
  std::vector<std::tuple<int, const Image&, const LabelMask&>> none;
  EXPECT_THROW(evaluate_corpus(none, [](const Image&) { return LabelMask(); }), Error);
}

TEST(Report, FormatFixture) {
  EXPECT_EQ(triple(0.871, 0.952, 0.911), "0.871/0.952/0.911");
  std::istringstream header(kReportHeader);
  std::vector<std::string> cols;
  for (std::string c; std::getline(header, c, '\t');) cols.push_back(c);
  ASSERT_EQ(cols.size(), 5u);
  EXPECT_EQ(cols[1], "DSC(PS/FH/PSFH)");
  EXPECT_EQ(cols[2], "ASD(PS/FH/PSFH)");
  EXPECT_EQ(cols[3], "HD95(PS/FH/PSFH)");
}
