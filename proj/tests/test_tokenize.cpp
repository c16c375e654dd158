#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <set>

#include "sam3d/tokenize.hpp"

using namespace sam3d;

namespace {

std::vector<double> cloud(std::initializer_list<Vec3> pts) {
  std::vector<double> out;
  for (const auto& p : pts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

SceneSpec spec_with(std::uint64_t seed, int n_objects) {
  SceneSpec s;
  s.seed = seed;
  s.n_objects = n_objects;
  return s;
}

}  // namespace

TEST(Fps, PicksFarthestPoint) {
  const auto xyz = cloud({{0, 0, 0}, {1, 0, 0}, {0.1, 0, 0}});
  EXPECT_EQ(fps(std::span<const double>(xyz), 2, 0), (std::vector<std::size_t>{0, 1}));
}

TEST(Fps, SingleAndExhaustive) {
  Rng rng(4);
  std::vector<double> xyz(3 * 30);
  for (double& v : xyz) v = rng.uniform(-1, 1);
  const std::span<const double> s(xyz);
  EXPECT_EQ(fps(s, 1, 17), (std::vector<std::size_t>{17}));
  auto all = fps(s, 30, 3);
  std::sort(all.begin(), all.end());
  std::vector<std::size_t> expect(30);
  std::iota(expect.begin(), expect.end(), 0);
  EXPECT_EQ(all, expect);
  EXPECT_THROW(fps(s, 31, 0), InvalidCount);
  EXPECT_THROW(fps(s, 0, 0), InvalidCount);
}

TEST(Fps, ExhaustiveWithDuplicatesStillCoversAll) {
  const auto xyz = cloud({{0, 0, 0}, {0, 0, 0}, {1, 1, 1}, {1, 1, 1}});
  auto all = fps(std::span<const double>(xyz), 4, 0);
  std::sort(all.begin(), all.end());
  EXPECT_EQ(all, (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(Fps, PermutationStable) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 40;
    std::vector<double> xyz(3 * n);
    for (double& v : xyz) v = rng.uniform(-1, 1);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    // permuted[i] = xyz[perm[i]]
    std::vector<double> permuted(3 * n);
    std::vector<std::size_t> inverse(n);
    for (std::size_t i = 0; i < n; ++i) {
      inverse[perm[i]] = i;
      for (int d = 0; d < 3; ++d) permuted[3 * i + d] = xyz[3 * perm[i] + d];
    }
    const std::size_t start = 5;
    auto a = fps(std::span<const double>(xyz), 12, start);
    auto b = fps(std::span<const double>(permuted), 12, inverse[start]);
    for (auto& idx : b) idx = perm[idx];
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    EXPECT_EQ(a, b);
  }
}

TEST(Fps, StartIsPointNearestMean) {
  const auto xyz = cloud({{-1, 0, 0}, {0.2, 0, 0}, {1, 0, 0}, {-0.1, 0, 0}});
  EXPECT_EQ(fps_start_index(std::span<const double>(xyz)), 3u);
}

TEST(KnnTokenize, NearestNeighbours) {
  const auto xyz = cloud({{0, 0, 0}, {0.1, 0, 0}, {5, 0, 0}});
  // Mean is (1.7, 0, 0); the nearest point is index 1, so pass the start explicitly.
  const auto nn = knn(std::span<const double>(xyz), 0, 2);
  EXPECT_EQ(std::set<std::size_t>(nn.begin(), nn.end()), (std::set<std::size_t>{0, 1}));
  const auto ts = knn_tokenize(std::span<const double>(xyz), 1, 2);
  ASSERT_EQ(ts.size(), 1u);
  EXPECT_EQ(ts.mode, TokenMode::knn_baseline);
  EXPECT_EQ(std::set<std::size_t>(ts.tokens[0].point_indices.begin(), ts.tokens[0].point_indices.end()),
            (std::set<std::size_t>{0, 1}));
  EXPECT_NEAR(ts.tokens[0].centroid[0], 0.05, 1e-12);
}

TEST(KnnTokenize, KOneHoldsOnlyTheCentroidPoint) {
  Rng rng(2);
  std::vector<double> xyz(3 * 25);
  for (double& v : xyz) v = rng.uniform(-1, 1);
  const std::span<const double> s(xyz);
  const auto centers = fps(s, 6, fps_start_index(s));
  const auto ts = knn_tokenize(s, 6, 1);
  for (std::size_t t = 0; t < 6; ++t) {
    EXPECT_EQ(ts.tokens[t].point_indices, (std::vector<std::size_t>{centers[t]}));
  }
}

TEST(KnnTokenize, SeparatedClustersGivePureTokens) {
  Rng rng(3);
  std::vector<double> xyz;
  std::vector<std::int32_t> labels;
  for (int c = 0; c < 2; ++c) {
    for (int i = 0; i < 10; ++i) {
      // Cluster diameter < 0.35, gap between clusters 10.
      xyz.push_back(10.0 * c + rng.uniform(0, 0.2));
      xyz.push_back(rng.uniform(0, 0.2));
      xyz.push_back(rng.uniform(0, 0.2));
      labels.push_back(c);
    }
  }
  const auto ts = knn_tokenize(std::span<const double>(xyz), 2, 10);
  EXPECT_DOUBLE_EQ(purity(ts, labels), 1.0);
}

TEST(Purity, MajorityShare) {
  TokenSet ts;
  ts.tokens.push_back({{0, 1, 2}, {}, -1});
  const std::vector<std::int32_t> labels{4, 4, 7};
  EXPECT_NEAR(purity(ts, labels), 2.0 / 3.0, 1e-15);
  ts.tokens.push_back({{0, 1}, {}, -1});
  EXPECT_NEAR(purity(ts, labels), (2.0 / 3.0 + 1.0) / 2.0, 1e-15);
  EXPECT_THROW(purity(TokenSet{}, labels), InvalidCount);
}

TEST(SamTokenize, PerfectMasksGivePureTokens) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto b = generate_scene(spec_with(seed, 5));
    const auto ts = sam_tokenize(b);
    EXPECT_EQ(purity(ts, b.gt_region), 1.0);
  }
}

TEST(SamTokenize, SmallRegionIsDropped) {
  auto b = generate_scene(spec_with(1, 2));
  // Keep only 3 points of region 1.
  std::vector<float> pts;
  std::vector<std::int32_t> gt;
  int kept1 = 0;
  for (std::size_t i = 0; i < b.n_points(); ++i) {
    if (b.gt_region[i] == 1 && kept1++ >= 3) continue;
    for (int d = 0; d < 3; ++d) pts.push_back(b.points[3 * i + d]);
    gt.push_back(b.gt_region[i]);
  }
  b.points = pts;
  b.gt_region = gt;
  b.colors.clear();
  const auto ts = sam_tokenize(b, 8);
  ASSERT_EQ(ts.size(), 1u);
  EXPECT_EQ(ts.tokens[0].region_id, 0);
  std::vector<std::size_t> expect_dropped;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == 1) expect_dropped.push_back(i);
  }
  EXPECT_EQ(ts.dropped_points, expect_dropped);
}

TEST(SamTokenize, TokenCountsMatchMaskedProjections) {
  const auto b = generate_scene(spec_with(12, 3));
  const auto ts = sam_tokenize(b, 1);
  ASSERT_EQ(ts.size(), 3u);
  // Oracle: count points whose rounded pixel lies on a masked pixel.
  std::size_t masked = 0;
  for (std::size_t i = 0; i < b.n_points(); ++i) {
    const auto p = b.point(i);
    const auto c = b.camera.pose.apply(p);
    if (c[2] <= 1e-6) continue;
    const double u = b.camera.fx * c[0] / c[2] + b.camera.cx;
    const double v = b.camera.fy * c[1] / c[2] + b.camera.cy;
    const long col = static_cast<long>(std::floor(u + 0.5));
    const long row = static_cast<long>(std::floor(v + 0.5));
    if (u < 0 || v < 0 || u >= b.camera.width || v >= b.camera.height) continue;
    if (col >= b.camera.width || row >= b.camera.height) continue;
    if (b.mask[row * b.camera.width + col] >= 0) ++masked;
  }
  std::size_t total = 0;
  for (const auto& t : ts.tokens) total += t.point_indices.size();
  EXPECT_EQ(total, masked);
}

TEST(SamTokenize, InvariantsOverRandomScenes) {
  Rng rng(99);
  for (int trial = 0; trial < 30; ++trial) {
    SceneSpec spec = spec_with(rng.next_u64(), 1 + static_cast<int>(rng.below(9)));
    spec.imbalance_exponent = rng.uniform(0, 2);
    const auto b = generate_scene(spec);
    TokenSet ts;
    try {
      ts = sam_tokenize(b, 1 + rng.below(12));
    } catch (const EmptyTokenization&) {
      continue;
    }
    std::vector<int> seen(b.n_points(), 0);
    const auto hits = project(std::span<const float>(b.points), b.camera);
    for (std::size_t t = 0; t < ts.size(); ++t) {
      const auto& tok = ts.tokens[t];
      if (t > 0) EXPECT_LT(ts.tokens[t - 1].region_id, tok.region_id);
      const Vec3 mean = member_mean(std::span<const float>(b.points),
                                    std::span<const std::size_t>(tok.point_indices));
      for (int d = 0; d < 3; ++d) EXPECT_NEAR(tok.centroid[d], mean[d], 1e-6);
      for (std::size_t i : tok.point_indices) {
        ++seen[i];
        EXPECT_EQ(b.mask_under(hits[i]), tok.region_id);
      }
    }
    for (std::size_t i : ts.dropped_points) ++seen[i];
    EXPECT_TRUE(std::all_of(seen.begin(), seen.end(), [](int c) { return c == 1; }));
    EXPECT_EQ(purity(ts, b.gt_region), 1.0);
  }
}

TEST(SamTokenize, EmptyTokenizationSignalled) {
  auto b = generate_scene(spec_with(0, 2));
  std::fill(b.mask.begin(), b.mask.end(), -1);
  EXPECT_THROW(sam_tokenize(b), EmptyTokenization);
}

TEST(KnnTokenize, MixesAdjacentObjects) {
  SceneSpec spec = spec_with(5, 2);
  spec.layout = Layout::adjacent_row;
  spec.points_min = spec.points_max = 120;
  const auto b = generate_scene(spec);
  const auto knn_ts = knn_tokenize(b, 8, 48);
  EXPECT_LT(purity(knn_ts, b.gt_region), 1.0);
  EXPECT_EQ(purity(sam_tokenize(b), b.gt_region), 1.0);
}
