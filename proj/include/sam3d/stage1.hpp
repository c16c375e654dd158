#pragma once

// Region-level 2D -> 3D distillation: pooled 2D region targets, k-means
// pseudo-labels over region features, the group-balanced weight table and the
// weighted smooth-L1 distillation loss.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "blob_io.hpp"
#include "rng.hpp"
#include "scene.hpp"
#include "tensor.hpp"
#include "tokenize.hpp"

namespace sam3d {

class InconsistentRegion : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Pooling { mean, max };

// Distinct raster pixels a token covers. SAM tokens cover every pixel of their
// mask region; other tokens cover the pixels their members project onto.
inline std::vector<std::size_t> token_pixels(const SceneBundle& b, const Token& tok) {
  std::vector<std::size_t> px;
  if (tok.region_id >= 0) {
    for (std::size_t i = 0; i < b.mask.size(); ++i) {
      if (b.mask[i] == tok.region_id) px.push_back(i);
    }
    return px;
  }
  for (std::size_t i : tok.point_indices) {
    const auto hit = project_point(b.point(i), b.camera);
    if (!hit.inside()) continue;
    const long c = hit.col(), r = hit.row();
    if (c < 0 || r < 0 || c >= b.camera.width || r >= b.camera.height) continue;
    px.push_back(static_cast<std::size_t>(r) * b.camera.width + static_cast<std::size_t>(c));
  }
  std::sort(px.begin(), px.end());
  px.erase(std::unique(px.begin(), px.end()), px.end());
  return px;
}

// M x feature_dim pooled 2D features, one row per token, no gradient.
inline Tensor pool_region_features(const SceneBundle& b, const TokenSet& tokens, Pooling pooling) {
  const std::size_t L2 = static_cast<std::size_t>(b.feature_dim);
  std::vector<double> out(tokens.size() * L2, 0.0);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto px = token_pixels(b, tokens.tokens[t]);
    if (px.empty()) {
      throw InconsistentRegion("token " + std::to_string(t) + " covers no pixels");
    }
    double* row = out.data() + t * L2;
    if (pooling == Pooling::max) std::fill(row, row + L2, -std::numeric_limits<double>::infinity());
    for (std::size_t p : px) {
      const auto f = b.feature_at(p);
      for (std::size_t j = 0; j < L2; ++j) {
        if (pooling == Pooling::mean) row[j] += f[j];
        else row[j] = std::max(row[j], static_cast<double>(f[j]));
      }
    }
    if (pooling == Pooling::mean) {
      for (std::size_t j = 0; j < L2; ++j) row[j] /= static_cast<double>(px.size());
    }
  }
  return Tensor({tokens.size(), L2}, std::move(out));
}

// ---------------------------------------------------------------------------
// k-means

struct KMeansResult {
  std::size_t k = 0;
  std::size_t dim = 0;
  std::vector<double> centroids;  // k x dim
  std::vector<std::size_t> assignment;
  double sse = 0.0;
  int iterations = 0;
};

namespace detail {

inline double sq_dist(const double* a, const double* b, std::size_t dim) {
  double s = 0;
  for (std::size_t d = 0; d < dim; ++d) s += (a[d] - b[d]) * (a[d] - b[d]);
  return s;
}

// Ties go to the lowest centroid index.
inline std::size_t nearest(const double* x, const std::vector<double>& centroids, std::size_t k,
                           std::size_t dim, double* dist = nullptr) {
  std::size_t best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < k; ++c) {
    const double d = sq_dist(x, centroids.data() + c * dim, dim);
    if (d < bd) {
      bd = d;
      best = c;
    }
  }
  if (dist) *dist = bd;
  return best;
}

inline std::vector<double> kmeans_pp_seed(std::span<const double> x, std::size_t n, std::size_t dim,
                                          std::size_t k, Rng& rng) {
  std::vector<double> cents;
  std::vector<bool> chosen(n, false);
  auto take = [&](std::size_t i) {
    chosen[i] = true;
    cents.insert(cents.end(), x.begin() + i * dim, x.begin() + (i + 1) * dim);
  };
  take(rng.below(n));
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = sq_dist(&x[i * dim], cents.data(), dim);
  while (cents.size() < k * dim) {
    double total = 0;
    for (double d : d2) total += d;
    std::size_t pick = n;
    if (total > 0) {
      const double r = rng.uniform() * total;
      double acc = 0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (d2[i] > 0 && r < acc) {
          pick = i;
          break;
        }
      }
      if (pick == n) {
        for (std::size_t i = n; i-- > 0;) {
          if (d2[i] > 0) {
            pick = i;
            break;
          }
        }
      }
    } else {
      // Fewer distinct points than clusters: take an unused index.
      std::vector<std::size_t> free;
      for (std::size_t i = 0; i < n; ++i) {
        if (!chosen[i]) free.push_back(i);
      }
      pick = free[rng.below(free.size())];
    }
    take(pick);
    const double* c = cents.data() + cents.size() - dim;
    for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], sq_dist(&x[i * dim], c, dim));
  }
  return cents;
}

inline KMeansResult lloyd(std::span<const double> x, std::size_t n, std::size_t dim, std::size_t k,
                          std::vector<double> cents, int max_iter) {
  KMeansResult r;
  r.k = k;
  r.dim = dim;
  std::vector<std::size_t> prev;
  std::vector<std::size_t> a(n);
  for (int it = 0; it < max_iter; ++it) {
    for (std::size_t i = 0; i < n; ++i) a[i] = nearest(&x[i * dim], cents, k, dim);
    r.iterations = it + 1;
    if (a == prev) break;

    // Empty clusters take the point farthest from its own centroid, drawn
    // from clusters that keep at least one other member.
    std::vector<std::size_t> size(k, 0);
    for (std::size_t c : a) ++size[c];
    for (std::size_t c = 0; c < k; ++c) {
      if (size[c] > 0) continue;
      std::size_t far = n;
      double fd = -1;
      for (std::size_t i = 0; i < n; ++i) {
        if (size[a[i]] < 2) continue;
        const double d = sq_dist(&x[i * dim], cents.data() + a[i] * dim, dim);
        if (d > fd) {
          fd = d;
          far = i;
        }
      }
      --size[a[far]];
      a[far] = c;
      size[c] = 1;
    }
    prev = a;

    std::fill(cents.begin(), cents.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t d = 0; d < dim; ++d) cents[a[i] * dim + d] += x[i * dim + d];
    }
    for (std::size_t c = 0; c < k; ++c) {
      for (std::size_t d = 0; d < dim; ++d) cents[c * dim + d] /= static_cast<double>(size[c]);
    }
  }
  r.centroids = std::move(cents);
  r.assignment = std::move(a);
  r.sse = 0;
  for (std::size_t i = 0; i < n; ++i) {
    r.sse += sq_dist(&x[i * dim], r.centroids.data() + r.assignment[i] * dim, dim);
  }
  return r;
}

}  // namespace detail

inline constexpr int kKMeansMaxIter = 100;
inline constexpr int kKMeansRestarts = 10;

// k-means++ seeding then Lloyd iterations until the assignment stops changing
// (or kKMeansMaxIter). With n_init > 1 the lowest-SSE restart wins, earliest
// on ties. `x` is n x dim row-major.
inline KMeansResult kmeans(std::span<const double> x, std::size_t dim, std::size_t k, std::uint64_t seed,
                           int n_init = kKMeansRestarts) {
  if (dim == 0 || x.size() % dim != 0) throw std::invalid_argument("kmeans: bad dimension");
  const std::size_t n = x.size() / dim;
  if (k < 1 || n < k) throw InvalidCount("kmeans: need 1 <= K <= number of points");
  if (n_init < 1) throw std::invalid_argument("kmeans: n_init must be >= 1");
  KMeansResult best;
  for (int r = 0; r < n_init; ++r) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(r)));
    auto res = detail::lloyd(x, n, dim, k, detail::kmeans_pp_seed(x, n, dim, k, rng), kKMeansMaxIter);
    if (r == 0 || res.sse < best.sse) best = std::move(res);
  }
  return best;
}

// ---------------------------------------------------------------------------
// Weight table

struct GroupWeights {
  std::vector<std::int64_t> counts;
  std::vector<double> k;
  std::vector<double> tau;
  std::vector<double> w;
};

// k_i = (n_i - n_min) / n_max, tau_i = 1 - k_i, w_i = tau_i / sum_j tau_j.
inline GroupWeights weights_from_counts(std::vector<std::int64_t> counts) {
  if (counts.empty()) throw InvalidCount("weights_from_counts: no groups");
  const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
  if (*lo < 1) throw InvalidCount("weights_from_counts: every group needs at least one region");
  const double n_min = static_cast<double>(*lo), n_max = static_cast<double>(*hi);
  GroupWeights g;
  g.counts = std::move(counts);
  double total = 0;
  for (auto n : g.counts) {
    g.k.push_back((static_cast<double>(n) - n_min) / n_max);
    g.tau.push_back(1.0 - g.k.back());
    total += g.tau.back();
  }
  for (double t : g.tau) g.w.push_back(t / total);
  return g;
}

enum class ScaleMode { mean_one, paper_literal };

inline std::string to_string(ScaleMode m) { return m == ScaleMode::mean_one ? "mean-one" : "paper-literal"; }

inline ScaleMode parse_scale_mode(const std::string& s) {
  if (s == "mean-one") return ScaleMode::mean_one;
  if (s == "paper-literal") return ScaleMode::paper_literal;
  throw std::invalid_argument("unknown scale mode '" + s + "' (expected mean-one or paper-literal)");
}

struct WeightTable {
  GroupWeights groups;
  std::size_t dim = 0;
  std::vector<double> centroids;  // K x dim
  std::uint64_t seed = 0;

  std::size_t K() const { return groups.w.size(); }

  std::size_t group_of(std::span<const double> feature) const {
    if (feature.size() != dim) throw std::invalid_argument("group_of: feature dimension mismatch");
    return detail::nearest(feature.data(), centroids, K(), dim);
  }

  // Per-region loss weight s * w_g with s = K (mean-one) or 1.
  double region_weight(std::size_t group, ScaleMode mode) const {
    const double s = mode == ScaleMode::mean_one ? static_cast<double>(K()) : 1.0;
    return s * groups.w.at(group);
  }
};

// `features` holds one max-pooled region feature per row (n x dim).
inline WeightTable build_weight_table(std::span<const double> features, std::size_t dim, std::size_t K,
                                      std::uint64_t seed, int n_init = kKMeansRestarts) {
  const auto km = kmeans(features, dim, K, seed, n_init);
  std::vector<std::int64_t> counts(K, 0);
  for (std::size_t a : km.assignment) ++counts[a];
  WeightTable t;
  t.groups = weights_from_counts(std::move(counts));
  t.dim = dim;
  t.centroids = km.centroids;
  t.seed = seed;
  return t;
}

inline void save_weight_table(const WeightTable& t, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_blob(dir / "centroids.f64", t.centroids);
  write_json_file(dir / "weight_table.json",
                  {{"K", t.K()},
                   {"seed", t.seed},
                   {"counts", t.groups.counts},
                   {"k", t.groups.k},
                   {"tau", t.groups.tau},
                   {"w", t.groups.w},
                   {"centroid_dim", t.dim},
                   {"centroids", "centroids.f64"}});
}

inline WeightTable load_weight_table(const std::filesystem::path& dir) {
  const auto path = dir / "weight_table.json";
  const auto j = read_json_file(path);
  WeightTable t;
  t.seed = json_field<std::uint64_t>(j, "seed", path);
  t.dim = json_field<std::size_t>(j, "centroid_dim", path);
  t.groups.counts = json_field<std::vector<std::int64_t>>(j, "counts", path);
  t.groups.k = json_field<std::vector<double>>(j, "k", path);
  t.groups.tau = json_field<std::vector<double>>(j, "tau", path);
  t.groups.w = json_field<std::vector<double>>(j, "w", path);
  const auto K = json_field<std::size_t>(j, "K", path);
  if (t.groups.counts.size() != K || t.groups.w.size() != K) {
    throw FormatError(FormatErrorKind::dimension_inconsistency, path.string() + ": group arrays disagree with K");
  }
  t.centroids = read_blob<double>(dir / json_field<std::string>(j, "centroids", path), K * t.dim);
  return t;
}

// ---------------------------------------------------------------------------
// Loss

inline constexpr double kSmoothL1Beta = 1.0;

// (1/M) sum_i weight_i * smooth_l1(target_i, pred_i), per-row smooth L1
// averaged over feature dimensions.
inline Tensor stage1_loss(const Tensor& pred, const Tensor& target, std::span<const double> weights) {
  if (weights.size() != pred.rows()) throw std::invalid_argument("stage1_loss: one weight per region required");
  const Tensor w({weights.size(), 1}, std::vector<double>(weights.begin(), weights.end()));
  return mean(mul(smooth_l1_rows(pred, target, kSmoothL1Beta), w));
}

}  // namespace sam3d
