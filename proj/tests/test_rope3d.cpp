#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "voxmot/rng.hpp"
#include "voxmot/rope3d.hpp"

using namespace voxmot;

namespace {

std::vector<double> random_vec(int n, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

PositionTriple random_pos(Rng& rng, int lo = 0, int hi = 64) {
  return {static_cast<int32_t>(rng.uniform_range(lo, hi)),
          static_cast<int32_t>(rng.uniform_range(lo, hi)),
          static_cast<int32_t>(rng.uniform_range(lo, hi))};
}

}  // namespace

TEST(Rope, ZeroPositionIsIdentity) {
  RopeConfig cfg(24);
  auto v = random_vec(24, 1);
  EXPECT_EQ(apply_mrope(v, {0, 0, 0}, cfg), v);
}

TEST(Rope, PreservesNorm) {
  RopeConfig cfg(24);
  Rng rng(2);
  for (int rep = 0; rep < 50; ++rep) {
    auto v = random_vec(24, 100 + rep);
    auto r = apply_mrope(v, random_pos(rng), cfg);
    EXPECT_NEAR(norm(r), norm(v), 1e-9);
  }
}

TEST(Rope, RelativeShiftInvariance) {
  RopeConfig cfg(18);
  Rng rng(3);
  for (int rep = 0; rep < 100; ++rep) {
    auto q = random_vec(18, 200 + rep);
    auto k = random_vec(18, 500 + rep);
    auto p1 = random_pos(rng);
    auto p2 = random_pos(rng);
    auto d = random_pos(rng);
    const double lhs = dot(apply_mrope(q, p1, cfg), apply_mrope(k, p2, cfg));
    const double rhs = dot(apply_mrope(q, {p1.px + d.px, p1.py + d.py, p1.pz + d.pz}, cfg),
                           apply_mrope(k, {p2.px + d.px, p2.py + d.py, p2.pz + d.pz}, cfg));
    EXPECT_NEAR(lhs, rhs, 1e-5);
  }
}

TEST(Rope, Rope1dMatchesEqualComponents) {
  RopeConfig cfg(12);
  auto v = random_vec(12, 4);
  EXPECT_EQ(apply_rope1d(v, 0, cfg), v);
  EXPECT_EQ(apply_rope1d(v, 17, cfg), apply_mrope(v, {17, 17, 17}, cfg));
}

TEST(Rope, SubspacePartition) {
  for (int dim : {6, 12, 18, 24, 48, 96}) {
    RopeConfig cfg(dim);
    std::set<int> seen;
    std::array<int, 3> count{0, 0, 0};
    for (int k = 0; k < cfg.pairs(); ++k) {
      EXPECT_TRUE(seen.insert(k).second);
      ++count[RopeConfig::axis_of_pair(k)];
    }
    EXPECT_EQ(static_cast<int>(seen.size()), cfg.pairs());
    EXPECT_EQ(count[0], cfg.pairs() / 3);
    EXPECT_EQ(count[1], cfg.pairs() / 3);
    EXPECT_EQ(count[2], cfg.pairs() / 3);
  }
  EXPECT_THROW(RopeConfig(16), ConfigError);
  EXPECT_THROW(RopeConfig(0), ConfigError);
}

TEST(Positions, MeshTokensCarryVoxelCoordinates) {
  int32_t stream = 0;
  std::vector<std::array<int, 3>> coords = {{3, 5, 7}};
  auto p0 = positions_for_block(BlockKind::NoiseShape, 0, 16, 1, &coords, stream);
  EXPECT_EQ(p0[0], (PositionTriple{3, 5, 7}));
  auto p1 = positions_for_block(BlockKind::NoiseShape, 1, 16, 1, &coords, stream);
  EXPECT_EQ(p1[0], (PositionTriple{67, 69, 71}));
}

TEST(Positions, SameTurnDeltaEqualsCoordinateDelta) {
  int32_t stream = 0;
  std::vector<std::array<int, 3>> coords = {{3, 5, 7}, {9, 2, 7}};
  auto p = positions_for_block(BlockKind::CleanShape, 3, 16, 2, &coords, stream);
  EXPECT_EQ(p[1].px - p[0].px, 6);
  EXPECT_EQ(p[1].py - p[0].py, -3);
  EXPECT_EQ(p[1].pz - p[0].pz, 0);
}

TEST(Positions, StreamIndexSkipsMeshTokens) {
  int32_t stream = 0;
  std::vector<std::array<int, 3>> coords = {{1, 1, 1}, {2, 2, 2}};
  auto text0 = positions_for_block(BlockKind::Text, 0, 16, 3, nullptr, stream);
  positions_for_block(BlockKind::NoiseShape, 0, 16, 2, &coords, stream);
  auto text1 = positions_for_block(BlockKind::Text, 1, 16, 2, nullptr, stream);
  EXPECT_EQ(text0[2].px, 2);
  // mesh block consumed no stream indices; next text token continues at 3
  EXPECT_EQ(text1[0].px, 3 + turn_offset(1, 16));
}

TEST(Positions, BudgetOverflowRejected) {
  int32_t stream = 0;
  std::vector<std::array<int, 3>> coords = {{1 << 20, 0, 0}};
  EXPECT_THROW(positions_for_block(BlockKind::NoiseShape, 0, 16, 1, &coords, stream),
               DomainError);
}
