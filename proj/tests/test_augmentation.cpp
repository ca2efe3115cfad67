#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "dstcs/augmentation.hpp"
#include "test_support.hpp"

using namespace dstcs;
using namespace dstcs::testing;

namespace {

Image random_image(Rng& rng, int rows, int cols) {
  Image img(rows, cols);
  for (auto& v : img.values()) v = static_cast<float>(uniform01(rng));
  return img;
}

// Independent reference: a patch is an edge patch iff it holds more than one label.
std::set<PatchCoord> edge_oracle(const LabelMask& m, int ps) {
  std::set<PatchCoord> out;
  for (int gr = 0; gr < m.rows() / ps; ++gr)
    for (int gc = 0; gc < m.cols() / ps; ++gc) {
      std::set<int> labels;
      for (int r = 0; r < ps; ++r)
        for (int c = 0; c < ps; ++c) labels.insert(m(gr * ps + r, gc * ps + c));
      if (labels.size() > 1) out.insert({gr, gc});
    }
  return out;
}

LabelMask half_split(int size, int split_col) {
  LabelMask m(size, size, kBackground);
  for (int r = 0; r < size; ++r)
    for (int c = split_col; c < size; ++c) m(r, c) = kFH;
  return m;
}

}  // namespace

TEST(EdgePatches, UniformMaskHasNone) {
  EXPECT_TRUE(find_edge_patches(LabelMask(32, 32, kFH), {8}).coords.empty());
}

TEST(EdgePatches, SplitOnGridLineHasNone) {
  EXPECT_TRUE(find_edge_patches(half_split(32, 16), {16}).coords.empty());
  EXPECT_TRUE(find_edge_patches(half_split(32, 16), {8}).coords.empty());
}

TEST(EdgePatches, SplitInsidePatchColumn) {
  const auto e = find_edge_patches(half_split(32, 20), {16});
  ASSERT_EQ(e.coords.size(), 2u);
  EXPECT_EQ(e.coords[0], (PatchCoord{0, 1}));
  EXPECT_EQ(e.coords[1], (PatchCoord{1, 1}));
}

TEST(EdgePatches, MatchOracleOnRandomMasks) {
  Rng rng = make_rng(10, {});
  for (int t = 0; t < 50; ++t) {
    const auto m = random_blob_mask(rng, 32, 32, 3);
    for (int ps : {4, 8, 16}) {
      const auto e = find_edge_patches(m, {ps});
      EXPECT_EQ(std::set<PatchCoord>(e.coords.begin(), e.coords.end()), edge_oracle(m, ps));
      EXPECT_TRUE(std::is_sorted(e.coords.begin(), e.coords.end()));
    }
  }
}

TEST(EdgePatches, IndivisibleSizeIsRejected) {
  EXPECT_THROW(find_edge_patches(LabelMask(30, 30, kBackground), {16}), ShapeError);
  EXPECT_THROW(find_edge_patches(LabelMask(32, 32, kBackground), {0}), ConfigError);
}

TEST(Epis, RestoresEdgePatchesAndKeepsTheRest) {
  Rng rng = make_rng(11, {});
  for (int t = 0; t < 30; ++t) {
    const auto mask = random_blob_mask(rng, 32, 32, 3);
    const auto original = random_image(rng, 32, 32);
    const auto base = photometric_augment(original, 0.2, 100 + t);
    const int ps = 8;
    const auto out = epis_augment(original, mask, base, {ps});
    const auto edges = edge_oracle(mask, ps);
    for (int r = 0; r < 32; ++r)
      for (int c = 0; c < 32; ++c) {
        const bool edge = edges.contains({r / ps, c / ps});
        EXPECT_EQ(out(r, c), edge ? original(r, c) : base(r, c));
      }
  }
}

TEST(Epis, NoEdgesGivesBaseImage) {
  Rng rng = make_rng(12, {});
  const auto original = random_image(rng, 16, 16), base = random_image(rng, 16, 16);
  EXPECT_EQ(epis_augment(original, LabelMask(16, 16, kPS), base, {8}).values(), base.values());
}

TEST(Epis, InvariantToLabelPermutation) {
  // Edge patches depend only on where labels change, not on which labels they are.
  Rng rng = make_rng(13, {});
  for (int t = 0; t < 20; ++t) {
    const auto mask = random_blob_mask(rng, 32, 32, 4);
    auto permuted = mask;
    for (auto& v : permuted.values()) v = static_cast<std::uint8_t>((v + 1) % kNumClasses);
    EXPECT_EQ(find_edge_patches(mask, {8}).coords, find_edge_patches(permuted, {8}).coords);
  }
}

TEST(Epis, ShapeMismatchIsRejected) {
  EXPECT_THROW(epis_augment(Image(16, 16), LabelMask(8, 8), Image(16, 16), {8}), ShapeError);
}

TEST(Perturb, BoundedAndDeterministic) {
  Rng rng = make_rng(14, {});
  const auto img = random_image(rng, 16, 16);
  const auto a = perturb(img, 0.2, 5), b = perturb(img, 0.2, 5), c = perturb(img, 0.2, 6);
  EXPECT_EQ(a.values(), b.values());
  EXPECT_NE(a.values(), c.values());
  for (std::size_t i = 0; i < img.size(); ++i) {
    EXPECT_GE(a[i], 0.0f);
    EXPECT_LE(a[i], 1.0f);
    EXPECT_LE(std::abs(a[i] - img[i]), 0.2f + 1e-6f);
  }
  EXPECT_EQ(perturb(img, 0.0, 5).values(), img.values());
  EXPECT_THROW(perturb(img, -0.1, 5), ConfigError);
}

TEST(Geometry, IdentityAndFlip) {
  Rng rng = make_rng(15, {});
  const auto img = random_image(rng, 8, 8);
  const auto mask = random_mask(rng, 8, 8);
  EXPECT_EQ(GeometricTransform{}.apply(img).values(), img.values());
  const GeometricTransform flip{true, 0.0};
  const auto fm = flip.apply(mask);
  const auto fi = flip.apply(img);
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c) {
      EXPECT_EQ(fm(r, c), mask(r, 7 - c));
      EXPECT_FLOAT_EQ(fi(r, c), img(r, 7 - c));
    }
}

TEST(Geometry, SmallRotationKeepsCentreLabel) {
  const auto m = half_split(32, 0);  // all FH
  const GeometricTransform rot{false, 10.0};
  const auto out = rot.apply(m);
  EXPECT_EQ(out(16, 16), kFH);
  for (auto v : out.values()) EXPECT_LT(v, kNumClasses);
}

TEST(Geometry, SampleRespectsAngleBound) {
  Rng rng = make_rng(16, {});
  bool flipped = false, plain = false;
  for (int i = 0; i < 200; ++i) {
    const auto t = GeometricTransform::sample(rng, 15.0);
    EXPECT_LE(std::abs(t.angle_deg), 15.0);
    (t.flip ? flipped : plain) = true;
  }
  EXPECT_TRUE(flipped && plain);
}

TEST(Photometric, StaysInUnitRange) {
  Rng rng = make_rng(17, {});
  const auto img = random_image(rng, 16, 16);
  const auto out = photometric_augment(img, 0.2, 3);
  for (auto v : out.values()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  EXPECT_EQ(out.values(), photometric_augment(img, 0.2, 3).values());
}
