#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sam3d/grad_check.hpp"
#include "sam3d/train.hpp"
#include "test_util.hpp"

using namespace sam3d;

namespace {

// A 2 x 1 raster, both pixels in region 0, with the given feature vectors.
SceneBundle two_pixel_bundle(std::vector<float> f0, std::vector<float> f1) {
  SceneBundle b;
  b.camera.width = 2;
  b.camera.height = 1;
  b.camera.cx = 1;
  b.camera.cy = 0;
  b.feature_dim = static_cast<std::int32_t>(f0.size());
  b.mask = {0, 0};
  b.feat2d = f0;
  b.feat2d.insert(b.feat2d.end(), f1.begin(), f1.end());
  b.region_count = 1;
  b.region_type = {0};
  return b;
}

TokenSet one_region_token() {
  TokenSet ts;
  ts.mode = TokenMode::sam_guided;
  ts.tokens.push_back({{0}, {0, 0, 0}, 0});
  return ts;
}

// Straight-line evaluation of the weight formulas.
std::vector<double> oracle_weights(const std::vector<std::int64_t>& n) {
  double lo = n[0], hi = n[0];
  for (auto v : n) {
    lo = std::min<double>(lo, v);
    hi = std::max<double>(hi, v);
  }
  std::vector<double> tau;
  double s = 0;
  for (auto v : n) {
    tau.push_back(1.0 - (v - lo) / hi);
    s += tau.back();
  }
  for (double& t : tau) t /= s;
  return tau;
}

double brute_force_sse(const std::vector<double>& x, std::size_t dim) {
  const std::size_t n = x.size() / dim;
  double best = INFINITY;
  for (std::size_t mask = 1; mask + 1 < (std::size_t{1} << n); ++mask) {
    double sse = 0;
    for (int side = 0; side < 2; ++side) {
      std::vector<double> c(dim, 0.0);
      std::size_t m = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (((mask >> i) & 1) != static_cast<std::size_t>(side)) continue;
        ++m;
        for (std::size_t d = 0; d < dim; ++d) c[d] += x[i * dim + d];
      }
      for (double& v : c) v /= static_cast<double>(m);
      for (std::size_t i = 0; i < n; ++i) {
        if (((mask >> i) & 1) != static_cast<std::size_t>(side)) continue;
        for (std::size_t d = 0; d < dim; ++d) sse += (x[i * dim + d] - c[d]) * (x[i * dim + d] - c[d]);
      }
    }
    best = std::min(best, sse);
  }
  return best;
}

Arch tiny_arch(int feature_dim) {
  Arch a;
  a.embed_dim = 8;
  a.n_heads = 2;
  a.n_enc_layers = 1;
  a.n_dec_layers = 1;
  a.pointnet_hidden = 8;
  a.mlp_hidden = 8;
  a.max_points_per_token = 6;
  a.proj_dim = feature_dim;
  return a;
}

}  // namespace

TEST(Pooling, MeanAndMaxOverRegionPixels) {
  const auto b = two_pixel_bundle({1, 1}, {3, 3});
  const auto ts = one_region_token();
  const Tensor mean = pool_region_features(b, ts, Pooling::mean);
  const Tensor max = pool_region_features(b, ts, Pooling::max);
  EXPECT_EQ(mean.at(0, 0), 2.0);
  EXPECT_EQ(mean.at(0, 1), 2.0);
  EXPECT_EQ(max.at(0, 0), 3.0);
  EXPECT_EQ(max.at(0, 1), 3.0);
}

TEST(Pooling, NoiselessSceneGivesPrototypes) {
  SceneSpec spec;
  spec.noise_sigma = 0;
  spec.seed = 4;
  const auto b = generate_scene(spec);
  const auto ts = sam_tokenize(b);
  const auto field = feature_field(b, spec);
  const Tensor f = pool_region_features(b, ts, Pooling::mean);
  for (std::size_t t = 0; t < ts.size(); ++t) {
    const auto& proto = field.prototypes.at(static_cast<std::size_t>(ts.tokens[t].region_id));
    for (std::size_t j = 0; j < proto.size(); ++j) EXPECT_NEAR(f.at(t, j), proto[j], 1e-6);
  }
}

TEST(Pooling, RegionWithoutPixelsIsInconsistent) {
  auto b = two_pixel_bundle({1}, {2});
  b.mask = {-1, -1};
  EXPECT_THROW(pool_region_features(b, one_region_token(), Pooling::mean), InconsistentRegion);
}

TEST(KMeans, SeparatesTwoObviousClusters) {
  const std::vector<double> x{0, 0.1, 10, 10.1};
  const auto r = kmeans(x, 1, 2, 3);
  EXPECT_EQ(r.assignment[0], r.assignment[1]);
  EXPECT_EQ(r.assignment[2], r.assignment[3]);
  EXPECT_NE(r.assignment[0], r.assignment[2]);
  EXPECT_NEAR(r.sse, 0.01, 1e-12);
}

TEST(KMeans, PostConditionsAndDeterminism) {
  Rng rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t dim = 1 + rng.below(4), n = 3 + rng.below(30);
    const std::size_t k = 1 + rng.below(std::min<std::size_t>(n, 6));
    std::vector<double> x(n * dim);
    for (double& v : x) v = std::round(rng.uniform(-3, 3));  // duplicates on purpose
    const auto a = kmeans(x, dim, k, trial);
    const auto b = kmeans(x, dim, k, trial);
    EXPECT_EQ(a.assignment, b.assignment);
    EXPECT_EQ(a.centroids, b.centroids);
    std::vector<std::size_t> size(k, 0);
    for (std::size_t c : a.assignment) ++size[c];
    EXPECT_TRUE(std::all_of(size.begin(), size.end(), [](std::size_t s) { return s > 0; }));
    double sse = 0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t d = 0; d < dim; ++d) {
        const double diff = x[i * dim + d] - a.centroids[a.assignment[i] * dim + d];
        sse += diff * diff;
      }
    }
    EXPECT_NEAR(a.sse, sse, 1e-9);
  }
}

TEST(KMeans, RejectsMoreClustersThanPoints) {
  const std::vector<double> x{1, 2};
  EXPECT_THROW(kmeans(x, 1, 3, 0), InvalidCount);
  EXPECT_THROW(kmeans(x, 1, 0, 0), InvalidCount);
}

TEST(KMeans, MatchesBruteForceOnSmallInstances) {
  Rng rng(5);
  int misses = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t dim = 1 + rng.below(3), n = 2 + rng.below(7);
    std::vector<double> x(n * dim);
    for (double& v : x) v = rng.uniform(-1, 1);
    const double opt = brute_force_sse(x, dim);
    const auto r = kmeans(x, dim, 2, trial);
    EXPECT_GE(r.sse, opt - 1e-9);
    if (r.sse > opt + 1e-9) ++misses;
  }
  EXPECT_LE(misses, 5);
}

TEST(Weights, WorkedExample) {
  const auto g = weights_from_counts({10, 5, 1});
  EXPECT_NEAR(g.w[0], 0.1 / 1.7, 1e-15);
  EXPECT_NEAR(g.w[1], 0.6 / 1.7, 1e-15);
  EXPECT_NEAR(g.w[2], 1.0 / 1.7, 1e-15);
}

TEST(Weights, EqualCountsAreUniform) {
  const auto g = weights_from_counts({4, 4, 4, 4});
  for (double w : g.w) EXPECT_DOUBLE_EQ(w, 0.25);
}

TEST(Weights, InvalidCounts) {
  EXPECT_THROW(weights_from_counts({}), InvalidCount);
  EXPECT_THROW(weights_from_counts({3, 0}), InvalidCount);
}

TEST(Weights, OracleSumAndMonotonicity) {
  Rng rng(9);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<std::int64_t> n(1 + rng.below(12));
    const bool flat = trial % 10 == 0;
    for (auto& v : n) v = flat ? 7 : 1 + static_cast<std::int64_t>(rng.below(50));
    const auto g = weights_from_counts(n);
    const auto expect = oracle_weights(n);
    double sum = 0;
    for (std::size_t i = 0; i < n.size(); ++i) {
      EXPECT_NEAR(g.w[i], expect[i], 1e-12);
      sum += g.w[i];
      for (std::size_t j = 0; j < n.size(); ++j) {
        if (n[i] < n[j]) {
          EXPECT_GT(g.w[i], g.w[j]);
        }
      }
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(WeightTable, MeanOneScaleOfUniformWeightsIsOne) {
  WeightTable t;
  t.groups = weights_from_counts({3, 3, 3});
  for (std::size_t g = 0; g < 3; ++g) {
    EXPECT_DOUBLE_EQ(t.region_weight(g, ScaleMode::mean_one), 1.0);
    EXPECT_DOUBLE_EQ(t.region_weight(g, ScaleMode::paper_literal), 1.0 / 3.0);
  }
}

TEST(WeightTable, RoundTrip) {
  Rng rng(2);
  std::vector<double> f(40 * 3);
  for (double& v : f) v = rng.uniform(-1, 1);
  const auto t = build_weight_table(f, 3, 5, 17);
  testutil::TempDir dir;
  save_weight_table(t, dir.path());
  const auto u = load_weight_table(dir.path());
  EXPECT_EQ(u.groups.counts, t.groups.counts);
  EXPECT_EQ(u.groups.w, t.groups.w);
  EXPECT_EQ(u.centroids, t.centroids);
  EXPECT_EQ(u.seed, t.seed);
  for (std::size_t i = 0; i < 40; ++i) {
    const std::span<const double> row(f.data() + 3 * i, 3);
    EXPECT_EQ(u.group_of(row), t.group_of(row));
  }
}

TEST(Stage1Loss, UnitWeightsReduceToMeanSmoothL1) {
  Rng rng(3);
  std::vector<double> a(12), b(12);
  for (double& v : a) v = rng.uniform(-2, 2);
  for (double& v : b) v = rng.uniform(-2, 2);
  const Tensor pred({4, 3}, a), target({4, 3}, b);
  const std::vector<double> ones(4, 1.0);
  EXPECT_NEAR(stage1_loss(pred, target, ones).item(), smooth_l1(pred, target, 1.0).item(), 1e-15);
  EXPECT_THROW(stage1_loss(pred, target, std::vector<double>(3, 1.0)), std::invalid_argument);
}

TEST(Stage1Loss, InvariantToJointRowPermutation) {
  Rng rng(6);
  std::vector<double> a(15), b(15), w(5);
  for (double& v : a) v = rng.uniform(-2, 2);
  for (double& v : b) v = rng.uniform(-2, 2);
  for (double& v : w) v = rng.uniform(0, 2);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  std::vector<double> pw;
  for (std::size_t i : perm) pw.push_back(w[i]);
  const Tensor pred({5, 3}, a), target({5, 3}, b);
  EXPECT_NEAR(stage1_loss(pred, target, w).item(),
              stage1_loss(gather_rows(pred, perm), gather_rows(target, perm), pw).item(), 1e-14);
}

TEST(Stage1Loss, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    SceneSpec spec;
    spec.seed = seed;
    spec.n_objects = 3;
    spec.points_min = 12;
    spec.points_max = 24;
    spec.feature_dim = 4;
    const auto b = generate_scene(spec);
    const auto ts = sam_tokenize(b, 4);
    const Arch arch = tiny_arch(spec.feature_dim);
    const ModelParams p = init_model(arch, seed);
    const TokenInputs in = prepare_tokens(b, ts, all_tokens(ts), arch);
    const Tensor target = pool_region_features(b, ts, Pooling::mean);
    std::vector<double> w(ts.size());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.5 + 0.25 * static_cast<double>(i);
    std::vector<Tensor> inputs;
    for (const auto& [name, t] : p.tensors()) inputs.push_back(t);
    const auto rep =
        grad_check_report([&] { return stage1_loss(stage1_forward(in, p), target, w); }, inputs, 1e-5);
    EXPECT_LT(rep.max_rel_error, 1e-4) << "seed " << seed << " input " << rep.worst_input << " analytic "
                                       << rep.analytic << " numeric " << rep.numeric;
  }
}
