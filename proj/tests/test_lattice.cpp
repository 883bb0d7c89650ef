#include <gtest/gtest.h>

#include <random>
#include <set>

#include "membrane/lattice.hpp"

using namespace membrane;

namespace {

// Brute-force lattice distance (l_inf or l_1) from x to a site set.
int brute_distance(const Site& x, const std::vector<Site>& set, Metric m) {
  int best = 1 << 30;
  for (const Site& y : set) best = std::min(best, metric_norm(x - y, m));
  return best;
}

std::vector<Site> frame_sites(int d, int radius) {
  return whole_box(LatticeBox::from_corners(
                       d, Site{-radius, d > 1 ? -radius : 0, d > 2 ? -radius : 0, d > 3 ? -radius : 0},
                       Site{radius, d > 1 ? radius : 0, d > 2 ? radius : 0, d > 3 ? radius : 0},
                       1 << 30))
      .members;
}

}  // namespace

TEST(BuildBox, SiteCounts) {
  EXPECT_EQ(build_box(1, 2).size(), 9);
  EXPECT_EQ(build_box(2, 4).size(), 625);
  EXPECT_EQ(build_box(8, 4).size(), 83521);
}

TEST(BuildBox, RejectsBadInput) {
  EXPECT_THROW(build_box(0, 2), LatticeError);
  EXPECT_THROW(build_box(2, 5), LatticeError);
  EXPECT_THROW(build_box(40, 4), SiteBudgetError);  // 81^4 > 2e6
  EXPECT_THROW(build_box(3, 2, 10), SiteBudgetError);
  EXPECT_THROW(build_box(1 << 30, 4, std::numeric_limits<Index>::max()), SiteBudgetError);
}

TEST(BuildBox, IndexIsABijection) {
  std::mt19937 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const int d = 1 + int(rng() % 4);
    const int N = 1 + int(rng() % (d == 4 ? 3 : 6));
    const LatticeBox box = build_box(N, d);
    std::set<Site> seen;
    for (Index i = 0; i < box.size(); ++i) {
      const Site x = box.site(i);
      ASSERT_LE(linf_norm(x), N);
      ASSERT_EQ(box.index(x), i);
      seen.insert(x);
    }
    EXPECT_EQ(Index(seen.size()), box.size());
  }
  EXPECT_EQ(build_box(2, 2).index(Site{3, 0, 0, 0}), kNoSite);
}

TEST(InnerRegion, MatchesBruteForceFaceDistance) {
  // V_N^ell = {x : d(x, V_N^c) - 1 >= floor(ell N)}, with d the lattice
  // distance to the exterior, scanned exhaustively.
  for (int d : {1, 2, 3}) {
    for (int N : {3, 4, 7, 8}) {
      const LatticeBox box = build_box(N, d);
      std::vector<Site> outside;
      for (const Site& y : frame_sites(d, N + 1))
        if (!box.contains(y)) outside.push_back(y);
      for (double ell : {0.1, 0.25, 0.4, 0.5}) {
        const Region r = inner_region(box, ell);
        std::vector<Site> expect;
        for (Index i = 0; i < box.size(); ++i) {
          const Site x = box.site(i);
          if (brute_distance(x, outside, Metric::linf) - 1 >= int(std::floor(ell * N)))
            expect.push_back(x);
        }
        EXPECT_EQ(r.members, expect) << "d=" << d << " N=" << N << " ell=" << ell;
      }
    }
  }
}

TEST(InnerRegion, FourDimensionalQuarterBulk) {
  const LatticeBox box = build_box(8, 4);
  const Region r = inner_region(box, 0.25);
  EXPECT_EQ(r.size(), 13 * 13 * 13 * 13);
  for (const Site& x : r.members) EXPECT_LE(linf_norm(x), 6);
}

TEST(InnerRegion, Extremes) {
  const Region center = inner_region(build_box(4, 2), 1.0);
  ASSERT_EQ(center.size(), 1);
  EXPECT_EQ(center.members[0], Site{});
  EXPECT_EQ(inner_region(build_box(8, 4), 1e-9).size(), 83521);
  EXPECT_THROW(inner_region(build_box(4, 2), 0.0), LatticeError);
  EXPECT_THROW(inner_region(build_box(4, 2), 1.5), LatticeError);
}

TEST(InnerRegion, MonotoneInEll) {
  const LatticeBox box = build_box(9, 2);
  Region prev = inner_region(box, 0.05);
  for (double ell = 0.1; ell <= 1.0; ell += 0.05) {
    const Region cur = inner_region(box, ell);
    for (const Site& x : cur.members) EXPECT_TRUE(prev.contains(x));
    prev = cur;
  }
}

TEST(DoubleBoundary, SingleSiteShell) {
  const LatticeBox box = build_box(5, 2);
  const Region single{box, {Site{}}, false, false};
  for (Metric m : {Metric::linf, Metric::l1}) {
    std::vector<Site> expect;
    for (const Site& y : frame_sites(2, 3))
      if (y != Site{} && brute_distance(y, single.members, m) <= 2) expect.push_back(y);
    EXPECT_EQ(double_boundary(single, m).members, expect);
  }
  EXPECT_EQ(double_boundary(single, Metric::linf).size(), 24);
  EXPECT_EQ(double_boundary(single, Metric::l1).size(), 12);
}

TEST(DoubleBoundary, FullBoxShellIsExteriorAndDisjoint) {
  const LatticeBox box = build_box(2, 2);
  const Region full = whole_box(box);
  const Region shell = double_boundary(full);
  std::vector<Site> expect;
  for (const Site& y : frame_sites(2, 4))
    if (!box.contains(y) && brute_distance(y, full.members, Metric::linf) <= 2)
      expect.push_back(y);
  EXPECT_EQ(shell.members, expect);
  EXPECT_EQ(shell.size(), 81 - 25);
  EXPECT_TRUE(shell.exterior);
  for (const Site& y : shell.members) EXPECT_FALSE(full.contains(y));

  const Region shell4 = double_boundary(whole_box(build_box(1, 4)));
  EXPECT_GT(shell4.size(), 0);
  for (const Site& y : shell4.members) EXPECT_GT(linf_norm(y), 1);
}

TEST(DoubleBoundary, DisjointFromRandomRegions) {
  std::mt19937 rng(11);
  const LatticeBox box = build_box(6, 3);
  for (int trial = 0; trial < 30; ++trial) {
    Region r{box, {}, false, false};
    for (Index i = 0; i < box.size(); ++i)
      if (rng() % 7 == 0) r.members.push_back(box.site(i));
    if (r.empty()) continue;
    const Region shell = double_boundary(r, trial % 2 ? Metric::l1 : Metric::linf);
    for (const Site& y : shell.members) ASSERT_FALSE(r.contains(y));
  }
  EXPECT_THROW(double_boundary(Region{box, {}, false, false}), EmptyRegionError);
}

TEST(Balls, EuclideanAndBox) {
  const LatticeBox box4 = build_box(3, 4);
  EXPECT_EQ(ball(box4, Site{}, 1.0).size(), 9);

  const LatticeBox box2 = build_box(5, 2);
  const Region b = box_region(box2, Site{}, 2);
  EXPECT_EQ(b.size(), 9);
  EXPECT_FALSE(b.clipped);

  int expect = 0;
  for (int x = -3; x <= 3; ++x)
    for (int y = -3; y <= 3; ++y)
      if (x * x + y * y <= 6.25) ++expect;
  EXPECT_EQ(expect, 21);
  EXPECT_EQ(ball(box2, Site{}, 2.5).size(), 21);

  const Region corner = ball(box2, Site{5, 5, 0, 0}, 1.0);
  EXPECT_TRUE(corner.clipped);
  EXPECT_EQ(corner.size(), 3);
  EXPECT_TRUE(box_region(box2, Site{5, 0, 0, 0}, 2).clipped);
}

TEST(Partition, MatchesBruteForcePlacement) {
  const LatticeBox box = build_box(16, 2);
  const Site anchor{-16, -16, 0, 0};
  const SubBoxPartition p = partition_subboxes(box, 0.5, anchor);
  EXPECT_EQ(p.side, 4);
  EXPECT_EQ(p.stride, 8);
  // Exhaustive placement: every grid position i in [0, 2N]^2 whose box fits.
  int count = 0;
  for (int i = 0; i <= 32; ++i)
    for (int j = 0; j <= 32; ++j) {
      const Site lo{anchor[0] + 8 * i, anchor[1] + 8 * j, 0, 0};
      const Site hi{lo[0] + 3, lo[1] + 3, 0, 0};
      if (box.contains(lo) && box.contains(hi)) ++count;
    }
  EXPECT_EQ(count, 16);
  EXPECT_EQ(int(p.boxes.size()), count);
}

TEST(Partition, EmptyWhenNothingFits) {
  const LatticeBox box = build_box(16, 2);
  EXPECT_THROW(partition_subboxes(box, 0.5, Site{15, 15, 0, 0}), EmptyRegionError);
  EXPECT_THROW(partition_subboxes(box, 1.0, Site{}), LatticeError);
}

TEST(Partition, GapAndContainmentInvariants) {
  std::mt19937 rng(3);
  for (int trial = 0; trial < 40; ++trial) {
    const int d = trial % 2 ? 2 : 3;
    const int N = 6 + int(rng() % 10);
    const LatticeBox box = build_box(N, d);
    const double alpha = 0.2 + 0.7 * std::uniform_real_distribution<>(0, 1)(rng);
    Site anchor{};
    for (int k = 0; k < d; ++k) anchor[k] = -N + int(rng() % 3);
    SubBoxPartition p;
    try {
      p = partition_subboxes(box, alpha, anchor);
    } catch (const EmptyRegionError&) {
      continue;
    }
    for (std::size_t a = 0; a < p.boxes.size(); ++a) {
      EXPECT_TRUE(box.contains(p.boxes[a]));
      for (std::size_t b = a + 1; b < p.boxes.size(); ++b)
        EXPECT_GE(box_distance(p.boxes[a], p.boxes[b]), 3);
    }
    for (const LatticeBox& b : p.boxes)
      for (const Site& y : p.sigma_scope.members) EXPECT_FALSE(b.contains(y));
  }
}
