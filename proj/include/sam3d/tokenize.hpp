#pragma once

// Point tokenizers: the FPS + KNN patch grouping baseline and the mask-guided
// tokenizer that assigns each point to the region its pixel falls in.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <stdexcept>
#include <vector>

#include "scene.hpp"

namespace sam3d {

class EmptyTokenization : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidCount : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class TokenMode { sam_guided, knn_baseline };

inline const char* to_string(TokenMode m) {
  return m == TokenMode::sam_guided ? "sam" : "knn";
}

struct Token {
  std::vector<std::size_t> point_indices;
  Vec3 centroid{0, 0, 0};
  std::int32_t region_id = -1;
};

struct TokenSet {
  std::vector<Token> tokens;
  TokenMode mode = TokenMode::sam_guided;
  std::vector<std::size_t> dropped_points;

  std::size_t size() const { return tokens.size(); }
};

namespace detail {

template <typename T>
double sq_dist(std::span<const T> xyz, std::size_t a, std::size_t b) {
  double s = 0;
  for (int d = 0; d < 3; ++d) {
    const double diff = static_cast<double>(xyz[3 * a + d]) - static_cast<double>(xyz[3 * b + d]);
    s += diff * diff;
  }
  return s;
}

}  // namespace detail

template <typename T>
Vec3 member_mean(std::span<const T> xyz, std::span<const std::size_t> members) {
  Vec3 c{0, 0, 0};
  for (std::size_t i : members) {
    for (int d = 0; d < 3; ++d) c[d] += static_cast<double>(xyz[3 * i + d]);
  }
  const double inv = members.empty() ? 0.0 : 1.0 / static_cast<double>(members.size());
  for (double& v : c) v *= inv;
  return c;
}

// Index of the point nearest the cloud mean (lowest index on ties).
template <typename T>
std::size_t fps_start_index(std::span<const T> xyz) {
  const std::size_t n = xyz.size() / 3;
  if (n == 0) throw InvalidCount("fps_start_index: empty cloud");
  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  const Vec3 mean = member_mean(xyz, std::span<const std::size_t>(all));
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (int d = 0; d < 3; ++d) {
      const double diff = static_cast<double>(xyz[3 * i + d]) - mean[d];
      s += diff * diff;
    }
    if (s < best_d) {
      best_d = s;
      best = i;
    }
  }
  return best;
}

// Greedy farthest point sampling. Each pick maximizes the minimum distance to
// the picks so far; ties go to the lowest index. Picked points are never
// picked again, even when duplicates leave every remaining distance at zero.
template <typename T>
std::vector<std::size_t> fps(std::span<const T> xyz, std::size_t n, std::size_t start_index) {
  const std::size_t total = xyz.size() / 3;
  if (n < 1 || n > total) {
    throw InvalidCount("fps: requested " + std::to_string(n) + " of " + std::to_string(total) +
                       " points");
  }
  if (start_index >= total) throw InvalidCount("fps: start index out of range");
  std::vector<std::size_t> picks;
  picks.reserve(n);
  std::vector<double> min_d(total, std::numeric_limits<double>::infinity());
  std::vector<char> taken(total, 0);
  std::size_t cur = start_index;
  for (std::size_t it = 0; it < n; ++it) {
    picks.push_back(cur);
    taken[cur] = 1;
    if (it + 1 == n) break;
    std::size_t next = total;
    double best = -1.0;
    for (std::size_t i = 0; i < total; ++i) {
      if (taken[i]) continue;
      min_d[i] = std::min(min_d[i], detail::sq_dist(xyz, i, cur));
      if (min_d[i] > best) {
        best = min_d[i];
        next = i;
      }
    }
    cur = next;
  }
  return picks;
}

// k nearest points to `center_index` by Euclidean distance, ties by lowest index.
template <typename T>
std::vector<std::size_t> knn(std::span<const T> xyz, std::size_t center_index, std::size_t k) {
  const std::size_t total = xyz.size() / 3;
  std::vector<std::pair<double, std::size_t>> order(total);
  for (std::size_t i = 0; i < total; ++i) order[i] = {detail::sq_dist(xyz, i, center_index), i};
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end());
  std::vector<std::size_t> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = order[i].second;
  return out;
}

// Baseline patch grouping: n FPS centroids (starting at the point nearest the
// mean), each token holding its k nearest neighbours. Tokens may share points.
template <typename T>
TokenSet knn_tokenize(std::span<const T> xyz, std::size_t n, std::size_t k) {
  const std::size_t total = xyz.size() / 3;
  if (k < 1 || k > total) throw InvalidCount("knn_tokenize: k out of range");
  const auto centers = fps(xyz, n, fps_start_index(xyz));
  TokenSet ts;
  ts.mode = TokenMode::knn_baseline;
  for (std::size_t c : centers) {
    Token tok;
    tok.point_indices = knn(xyz, c, k);
    tok.centroid = member_mean(xyz, std::span<const std::size_t>(tok.point_indices));
    ts.tokens.push_back(std::move(tok));
  }
  return ts;
}

inline TokenSet knn_tokenize(const SceneBundle& b, std::size_t n, std::size_t k) {
  const std::span<const float> xyz(b.points);
  return knn_tokenize(xyz, std::min(n, b.n_points()), std::min(k, b.n_points()));
}

inline constexpr std::size_t kDefaultMinPoints = 8;

// One token per mask region holding at least `min_points` projecting points.
// Points behind the camera, off the raster, on unmasked pixels or in discarded
// regions are listed in dropped_points. Tokens are ordered by region id.
inline TokenSet sam_tokenize(const SceneBundle& b, std::size_t min_points = kDefaultMinPoints) {
  const std::span<const float> xyz(b.points);
  const auto hits = project(xyz, b.camera);
  std::map<std::int32_t, std::vector<std::size_t>> by_region;
  TokenSet ts;
  ts.mode = TokenMode::sam_guided;
  for (std::size_t i = 0; i < hits.size(); ++i) {
    const std::int32_t r = b.mask_under(hits[i]);
    if (r < 0) {
      ts.dropped_points.push_back(i);
    } else {
      by_region[r].push_back(i);
    }
  }
  for (auto& [region, members] : by_region) {
    if (members.size() < std::max<std::size_t>(min_points, 1)) {
      ts.dropped_points.insert(ts.dropped_points.end(), members.begin(), members.end());
      continue;
    }
    Token tok;
    tok.region_id = region;
    tok.centroid = member_mean(xyz, std::span<const std::size_t>(members));
    tok.point_indices = std::move(members);
    ts.tokens.push_back(std::move(tok));
  }
  std::sort(ts.dropped_points.begin(), ts.dropped_points.end());
  if (ts.tokens.empty()) throw EmptyTokenization("sam_tokenize: no region survived");
  return ts;
}

// Most frequent label among a token's members (lowest label on ties) and its count.
inline std::pair<std::int32_t, std::size_t> majority_label(const Token& tok,
                                                           std::span<const std::int32_t> labels) {
  std::map<std::int32_t, std::size_t> counts;
  for (std::size_t i : tok.point_indices) ++counts[labels[i]];
  std::pair<std::int32_t, std::size_t> best{-1, 0};
  for (const auto& [label, c] : counts) {
    if (c > best.second) best = {label, c};
  }
  return best;
}

// Mean over tokens of the majority-label share of each token.
inline double purity(const TokenSet& ts, std::span<const std::int32_t> gt_region) {
  if (ts.tokens.empty()) throw InvalidCount("purity: empty token set");
  double sum = 0;
  for (const Token& tok : ts.tokens) {
    if (tok.point_indices.empty()) throw InvalidCount("purity: empty token");
    sum += static_cast<double>(majority_label(tok, gt_region).second) /
           static_cast<double>(tok.point_indices.size());
  }
  return sum / static_cast<double>(ts.tokens.size());
}

}  // namespace sam3d
