#pragma once

// Synthetic scenes: a pinhole camera, a point cloud of box/plane objects, the
// region-mask raster those objects project to, and a per-pixel 2D feature
// raster built from per-type prototype vectors plus Gaussian noise.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "blob_io.hpp"
#include "rng.hpp"

namespace sam3d {

class InvalidSpec : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// The SceneSpec is well-formed but this seed's objects could not all be placed.
class PlacementFailed : public InvalidSpec {
 public:
  using InvalidSpec::InvalidSpec;
};

class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Vec3 = std::array<double, 3>;

// World-to-camera rigid transform: x_cam = R * x_world + t (R row-major).
struct Pose {
  std::array<double, 9> rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};
  Vec3 translation{0, 0, 0};

  Vec3 apply(const Vec3& p) const {
    const auto& r = rotation;
    return {r[0] * p[0] + r[1] * p[1] + r[2] * p[2] + translation[0],
            r[3] * p[0] + r[4] * p[1] + r[5] * p[2] + translation[1],
            r[6] * p[0] + r[7] * p[1] + r[8] * p[2] + translation[2]};
  }

  Vec3 apply_inverse(const Vec3& c) const {
    const auto& r = rotation;
    const Vec3 d{c[0] - translation[0], c[1] - translation[1], c[2] - translation[2]};
    return {r[0] * d[0] + r[3] * d[1] + r[6] * d[2], r[1] * d[0] + r[4] * d[1] + r[7] * d[2],
            r[2] * d[0] + r[5] * d[1] + r[8] * d[2]};
  }

  static Pose yaw(double angle, const Vec3& t) {
    const double c = std::cos(angle), s = std::sin(angle);
    return Pose{{c, 0, s, 0, 1, 0, -s, 0, c}, t};
  }

  bool operator==(const Pose&) const = default;
};

struct Camera {
  double fx = 100.0;
  double fy = 100.0;
  double cx = 64.0;
  double cy = 48.0;
  int width = 128;
  int height = 96;
  Pose pose;

  bool operator==(const Camera&) const = default;

  void validate() const {
    if (!(fx > 0) || !(fy > 0)) throw InvalidInput("camera: focal lengths must be positive");
    if (width <= 0 || height <= 0) throw InvalidInput("camera: raster size must be positive");
    if (!(cx >= 0 && cx < width) || !(cy >= 0 && cy < height)) {
      throw InvalidInput("camera: principal point outside raster");
    }
    const auto& r = pose.rotation;
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) {
        double dot = 0;
        for (int k = 0; k < 3; ++k) dot += r[3 * i + k] * r[3 * j + k];
        if (std::abs(dot - (i == j ? 1.0 : 0.0)) > 1e-9) {
          throw InvalidInput("camera: rotation is not orthonormal");
        }
      }
    }
    const double det = r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6]) +
                       r[2] * (r[3] * r[7] - r[4] * r[6]);
    if (std::abs(det - 1.0) > 1e-9) throw InvalidInput("camera: rotation determinant is not +1");
  }
};

inline constexpr double kBehindEps = 1e-6;

// Ties round half-up.
inline long round_pixel(double x) { return static_cast<long>(std::floor(x + 0.5)); }

struct PixelHit {
  enum class Kind { inside, outside, behind };
  Kind kind = Kind::behind;
  double u = 0;
  double v = 0;

  bool inside() const { return kind == Kind::inside; }
  long col() const { return round_pixel(u); }
  long row() const { return round_pixel(v); }
};

inline PixelHit project_point(const Vec3& world, const Camera& cam) {
  if (!std::isfinite(world[0]) || !std::isfinite(world[1]) || !std::isfinite(world[2])) {
    throw InvalidInput("project: non-finite point coordinate");
  }
  const Vec3 c = cam.pose.apply(world);
  PixelHit hit;
  if (c[2] <= kBehindEps) {
    hit.kind = PixelHit::Kind::behind;
    return hit;
  }
  hit.u = cam.fx * c[0] / c[2] + cam.cx;
  hit.v = cam.fy * c[1] / c[2] + cam.cy;
  const bool in = hit.u >= 0 && hit.u < cam.width && hit.v >= 0 && hit.v < cam.height;
  hit.kind = in ? PixelHit::Kind::inside : PixelHit::Kind::outside;
  return hit;
}

// Projects an N x 3 row-major coordinate array.
template <typename T>
std::vector<PixelHit> project(std::span<const T> xyz, const Camera& cam) {
  if (xyz.size() % 3 != 0) throw InvalidInput("project: coordinate array is not N x 3");
  std::vector<PixelHit> hits(xyz.size() / 3);
  for (std::size_t i = 0; i < hits.size(); ++i) {
    hits[i] = project_point({static_cast<double>(xyz[3 * i]), static_cast<double>(xyz[3 * i + 1]),
                             static_cast<double>(xyz[3 * i + 2])},
                            cam);
  }
  return hits;
}

struct SceneBundle {
  std::vector<float> points;  // N x 3, world frame, meters
  std::vector<float> colors;  // N x 3 in [0, 1], or empty
  Camera camera;
  std::vector<std::int32_t> gt_region;    // N
  std::vector<std::int32_t> mask;         // height x width, row-major; -1 = no mask
  std::vector<float> feat2d;              // height x width x feature_dim
  std::vector<std::int32_t> region_type;  // region_count; object type of each region
  std::int32_t feature_dim = 0;
  std::int32_t region_count = 0;

  bool operator==(const SceneBundle&) const = default;

  std::size_t n_points() const { return points.size() / 3; }
  std::size_t n_pixels() const {
    return static_cast<std::size_t>(camera.width) * static_cast<std::size_t>(camera.height);
  }

  Vec3 point(std::size_t i) const {
    return {points[3 * i], points[3 * i + 1], points[3 * i + 2]};
  }

  std::int32_t mask_at(long row, long col) const {
    return mask[static_cast<std::size_t>(row) * camera.width + static_cast<std::size_t>(col)];
  }

  std::span<const float> feature_at(std::size_t pixel) const {
    return {feat2d.data() + pixel * feature_dim, static_cast<std::size_t>(feature_dim)};
  }

  // Mask id under the rounded pixel of a hit, or -1 when it falls off the raster.
  std::int32_t mask_under(const PixelHit& hit) const {
    if (!hit.inside()) return -1;
    const long r = hit.row(), c = hit.col();
    if (r < 0 || c < 0 || r >= camera.height || c >= camera.width) return -1;
    return mask_at(r, c);
  }

  void validate() const {
    camera.validate();
    if (points.empty() || points.size() % 3 != 0) {
      throw InvalidInput("bundle: points must be N x 3 with N >= 1");
    }
    if (!colors.empty() && colors.size() != points.size()) {
      throw InvalidInput("bundle: colors must match points");
    }
    if (gt_region.size() != n_points()) throw InvalidInput("bundle: gt_region size mismatch");
    if (mask.size() != n_pixels()) throw InvalidInput("bundle: mask size mismatch");
    if (feature_dim < 1 || feat2d.size() != n_pixels() * static_cast<std::size_t>(feature_dim)) {
      throw InvalidInput("bundle: feat2d dims do not match mask");
    }
    if (region_type.size() != static_cast<std::size_t>(region_count)) {
      throw InvalidInput("bundle: region_type size mismatch");
    }
    for (std::int32_t id : mask) {
      if (id < -1 || id >= region_count) throw InvalidInput("bundle: mask id out of range");
    }
    for (float f : feat2d) {
      if (!std::isfinite(f)) throw InvalidInput("bundle: non-finite feature value");
    }
  }
};

// ---------------------------------------------------------------------------
// Generation

enum class Layout {
  scattered,     // objects anywhere in the frustum, non-overlapping in the image
  adjacent_row,  // objects side by side along the camera x axis with a small 3D gap
};

struct SceneSpec {
  int n_objects = 6;
  int points_min = 48;
  int points_max = 192;
  int feature_dim = 32;
  int n_types = 8;
  double imbalance_exponent = 0.0;
  double noise_sigma = 0.05;
  double size_jitter = 0.15;  // per-axis extent factor drawn from 1 +- size_jitter
  std::uint64_t seed = 0;
  // Type prototypes are shared by every scene generated with the same palette.
  std::uint64_t palette_seed = 0x5A3D;
  Layout layout = Layout::scattered;
  double adjacent_gap = 0.12;
  // Scattered layout: object centres sit at a world height picked from a
  // band owned by the object's type (bands evenly spaced over [-0.8, 0.8] m).
  bool height_bands = true;
  Camera intrinsics{100.0, 100.0, 80.0, 60.0, 160, 120, Pose{}};
};

inline constexpr double kHeightBandSpan = 0.8;
inline constexpr double kHeightBandJitter = 0.1;

inline double height_band_center(int type, int n_types) {
  if (n_types < 2) return 0.0;
  return -kHeightBandSpan + 2.0 * kHeightBandSpan * type / (n_types - 1);
}

// Per-region prototype vectors (unit norm) used to synthesize feat2d.
struct FeatureField {
  std::vector<std::vector<double>> prototypes;  // region_count x feature_dim
  double noise_sigma = 0.0;
};

// Independent random streams inside generate_scene, keyed off spec.seed.
enum class SceneStream : std::uint64_t { sizes = 1, types = 2, placement = 3, points = 4, noise = 5 };

// Unit-norm prototype per object type; a pure function of the palette seed.
inline std::vector<std::vector<double>> type_prototypes(int n_types, int feature_dim,
                                                        std::uint64_t palette_seed) {
  Rng rng(derive_seed(palette_seed, 0x7e7e));
  std::vector<std::vector<double>> protos(n_types, std::vector<double>(feature_dim));
  for (auto& p : protos) {
    double norm = 0;
    for (double& x : p) {
      x = rng.normal();
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (double& x : p) x /= norm;
  }
  return protos;
}

// Nominal box extents (x, y, z in meters) for an object type. Thin extents make
// plane-like objects.
inline Vec3 type_extent(int type, std::uint64_t palette_seed) {
  static constexpr std::array<Vec3, 8> kBase = {{
      {0.40, 0.40, 0.40},  // cube
      {0.18, 0.80, 0.18},  // pillar
      {0.80, 0.02, 0.50},  // horizontal plane
      {0.70, 0.50, 0.02},  // vertical plane
      {0.90, 0.14, 0.14},  // bar
      {0.60, 0.25, 0.60},  // slab
      {0.20, 0.20, 0.20},  // small cube
      {0.25, 0.30, 0.80},  // deep box
  }};
  if (type >= 0 && type < static_cast<int>(kBase.size())) return kBase[type];
  Rng rng(derive_seed(palette_seed, 0xe87e, type));
  return {rng.uniform(0.1, 0.9), rng.uniform(0.05, 0.9), rng.uniform(0.05, 0.9)};
}

// Point count of the object at size rank j: U[min, max] * (j + 1)^-exponent,
// rounded, at least 1. Draws one uniform per object from the sizes stream.
inline std::vector<int> sample_object_sizes(const SceneSpec& spec) {
  Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(SceneStream::sizes)));
  std::vector<int> sizes(spec.n_objects);
  for (int j = 0; j < spec.n_objects; ++j) {
    const double base = rng.uniform(spec.points_min, spec.points_max);
    const double scaled = base * std::pow(static_cast<double>(j + 1), -spec.imbalance_exponent);
    sizes[j] = std::max(1, static_cast<int>(std::lround(scaled)));
  }
  return sizes;
}

// Object types drawn with probability proportional to (t + 1)^-exponent.
inline std::vector<int> sample_object_types(const SceneSpec& spec) {
  Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(SceneStream::types)));
  std::vector<double> cdf(spec.n_types);
  double total = 0;
  for (int t = 0; t < spec.n_types; ++t) {
    total += std::pow(static_cast<double>(t + 1), -spec.imbalance_exponent);
    cdf[t] = total;
  }
  std::vector<int> types(spec.n_objects);
  for (int& t : types) {
    const double u = rng.uniform() * total;
    t = static_cast<int>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
    t = std::min(t, spec.n_types - 1);
  }
  return types;
}

namespace detail {

struct PixelRect {
  long c0, r0, c1, r1;  // inclusive

  bool overlaps(const PixelRect& o, long margin) const {
    return !(c1 + margin < o.c0 || o.c1 + margin < c0 || r1 + margin < o.r0 || o.r1 + margin < r0);
  }
  void include(long c, long r) {
    c0 = std::min(c0, c);
    c1 = std::max(c1, c);
    r0 = std::min(r0, r);
    r1 = std::max(r1, r);
  }
};

inline std::array<Vec3, 8> box_corners(const Vec3& center, const Vec3& extent) {
  std::array<Vec3, 8> out{};
  for (int i = 0; i < 8; ++i) {
    for (int a = 0; a < 3; ++a) {
      const double sign = ((i >> a) & 1) ? 0.5 : -0.5;
      out[i][a] = center[a] + sign * extent[a];
    }
  }
  return out;
}

// Rounded-pixel bounding rectangle of a box, or false if any corner is not
// inside the raster.
inline bool box_rect(const Vec3& center, const Vec3& extent, const Camera& cam, PixelRect& rect) {
  bool first = true;
  for (const Vec3& corner : box_corners(center, extent)) {
    const PixelHit hit = project_point(corner, cam);
    if (!hit.inside()) return false;
    const long c = hit.col(), r = hit.row();
    if (c >= cam.width || r >= cam.height) return false;
    if (first) {
      rect = {c, r, c, r};
      first = false;
    } else {
      rect.include(c, r);
    }
  }
  return true;
}

inline Vec3 sample_box_surface(const Vec3& center, const Vec3& e, Rng& rng) {
  const std::array<double, 3> face_area = {e[1] * e[2], e[0] * e[2], e[0] * e[1]};
  const double total = face_area[0] + face_area[1] + face_area[2];
  double pick = rng.uniform() * total;
  int axis = 0;
  while (axis < 2 && pick >= face_area[axis]) {
    pick -= face_area[axis];
    ++axis;
  }
  Vec3 p;
  for (int a = 0; a < 3; ++a) p[a] = center[a] + e[a] * (rng.uniform() - 0.5);
  p[axis] = center[axis] + (rng.uniform() < 0.5 ? -0.5 : 0.5) * e[axis];
  return p;
}

inline constexpr long kRectMargin = 2;
inline constexpr int kPlacementTries = 2000;
inline constexpr int kPlacementRestarts = 8;

}  // namespace detail

// Builds one synthetic frame. Regions are numbered by size rank (region 0 has
// the most points). The mask raster fills each object's projected bounding
// rectangle, which contains the rounded pixel of every point of that object.
inline SceneBundle generate_scene(const SceneSpec& spec) {
  if (spec.n_objects < 1) throw InvalidSpec("n_objects must be >= 1");
  if (spec.feature_dim < 2) throw InvalidSpec("feature_dim must be >= 2");
  if (spec.n_types < 1) throw InvalidSpec("n_types must be >= 1");
  if (spec.points_min < 1 || spec.points_max < spec.points_min) {
    throw InvalidSpec("points_per_object_range must satisfy 1 <= min <= max");
  }
  if (!(spec.noise_sigma >= 0)) throw InvalidSpec("noise_sigma must be >= 0");
  if (!(spec.size_jitter >= 0 && spec.size_jitter < 1)) throw InvalidSpec("size_jitter must be in [0, 1)");

  SceneBundle b;
  b.feature_dim = spec.feature_dim;
  b.region_count = spec.n_objects;
  b.camera = spec.intrinsics;

  const std::vector<int> sizes = sample_object_sizes(spec);
  const std::vector<int> types = sample_object_types(spec);
  b.region_type.assign(types.begin(), types.end());

  Rng place(derive_seed(spec.seed, static_cast<std::uint64_t>(SceneStream::placement)));
  if (spec.layout == Layout::scattered) {
    b.camera.pose = Pose::yaw(place.uniform(-0.5, 0.5),
                              {place.uniform(-0.5, 0.5), place.uniform(-0.3, 0.3),
                               place.uniform(-0.5, 0.5)});
  } else {
    b.camera.pose = Pose{{1, 0, 0, 0, 1, 0, 0, 0, 1},
                         {place.uniform(-0.3, 0.3), place.uniform(-0.2, 0.2), 0.0}};
  }
  b.camera.validate();
  const Camera& cam = b.camera;

  std::vector<Vec3> centers(spec.n_objects), extents(spec.n_objects);
  std::vector<detail::PixelRect> rects(spec.n_objects);
  if (spec.layout == Layout::scattered) {
    // A failed object restarts the whole layout from a fresh stream.
    int failed = -1;
    for (int restart = 0; restart < detail::kPlacementRestarts; ++restart) {
      Rng obj(derive_seed(spec.seed, static_cast<std::uint64_t>(SceneStream::placement), restart));
      failed = -1;
      for (int j = 0; j < spec.n_objects && failed < 0; ++j) {
        const Vec3 base = type_extent(types[j], spec.palette_seed);
        bool placed = false;
        for (int attempt = 0; attempt < detail::kPlacementTries && !placed; ++attempt) {
          Vec3 e;
          for (int a = 0; a < 3; ++a) e[a] = base[a] * obj.uniform(1.0 - spec.size_jitter, 1.0 + spec.size_jitter);
          const double z = obj.uniform(2.5, 5.5);
          const double u = obj.uniform(0, cam.width);
          const double v = obj.uniform(0, cam.height);
          const Vec3 cam_center{(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z};
          Vec3 center = cam.pose.apply_inverse(cam_center);
          if (spec.height_bands) {
            center[1] = height_band_center(types[j] % spec.n_types, spec.n_types) +
                        obj.uniform(-kHeightBandJitter, kHeightBandJitter);
          }
          detail::PixelRect rect{};
          if (!detail::box_rect(center, e, cam, rect)) continue;
          bool clash = false;
          for (int i = 0; i < j && !clash; ++i) clash = rect.overlaps(rects[i], detail::kRectMargin);
          if (clash) continue;
          centers[j] = center;
          extents[j] = e;
          rects[j] = rect;
          placed = true;
        }
        if (!placed) failed = j;
      }
      if (failed < 0) break;
    }
    if (failed >= 0) {
      throw PlacementFailed("cannot fit object " + std::to_string(failed) + " of " +
                            std::to_string(spec.n_objects) + " into the frustum");
    }
  } else {
    const double z = place.uniform(2.3, 2.7);
    double total_width = 0;
    for (int j = 0; j < spec.n_objects; ++j) {
      const Vec3 base = type_extent(types[j], spec.palette_seed);
      for (int a = 0; a < 3; ++a) extents[j][a] = base[a] * place.uniform(1.0 - spec.size_jitter, 1.0 + spec.size_jitter);
      // Shallow boxes keep the image-space gap close to the 3D gap.
      extents[j][2] = std::min(extents[j][2], 0.25);
      total_width += extents[j][0];
    }
    total_width += spec.adjacent_gap * (spec.n_objects - 1);
    double x = -0.5 * total_width;
    for (int j = 0; j < spec.n_objects; ++j) {
      const Vec3 cam_center{x + 0.5 * extents[j][0], 0.0, z};
      centers[j] = cam.pose.apply_inverse(cam_center);
      x += extents[j][0] + spec.adjacent_gap;
      if (!detail::box_rect(centers[j], extents[j], cam, rects[j])) {
        throw PlacementFailed("adjacent row does not fit into the frustum");
      }
      for (int i = 0; i < j; ++i) {
        if (rects[j].overlaps(rects[i], detail::kRectMargin)) {
          throw InvalidSpec("adjacent gap too small to separate masks in the image");
        }
      }
    }
  }

  Rng pts(derive_seed(spec.seed, static_cast<std::uint64_t>(SceneStream::points)));
  const std::size_t n_total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  b.points.reserve(3 * n_total);
  b.colors.reserve(3 * n_total);
  b.gt_region.reserve(n_total);
  for (int j = 0; j < spec.n_objects; ++j) {
    const double hue = static_cast<double>(types[j] % spec.n_types) / spec.n_types;
    const Vec3 base_color{0.5 + 0.4 * std::cos(6.2831853 * hue),
                          0.5 + 0.4 * std::cos(6.2831853 * (hue + 1.0 / 3)),
                          0.5 + 0.4 * std::cos(6.2831853 * (hue + 2.0 / 3))};
    for (int k = 0; k < sizes[j]; ++k) {
      const Vec3 p = detail::sample_box_surface(centers[j], extents[j], pts);
      const std::array<float, 3> pf{static_cast<float>(p[0]), static_cast<float>(p[1]),
                                    static_cast<float>(p[2])};
      b.points.insert(b.points.end(), pf.begin(), pf.end());
      for (int a = 0; a < 3; ++a) {
        b.colors.push_back(static_cast<float>(std::clamp(base_color[a] + pts.normal(0, 0.03), 0.0, 1.0)));
      }
      b.gt_region.push_back(j);
      // Float rounding can nudge a surface point one pixel past the corner rectangle.
      const PixelHit hit = project_point({pf[0], pf[1], pf[2]}, cam);
      if (hit.inside() && hit.col() < cam.width && hit.row() < cam.height) {
        rects[j].include(hit.col(), hit.row());
      }
    }
  }

  b.mask.assign(b.n_pixels(), -1);
  for (int j = 0; j < spec.n_objects; ++j) {
    for (long r = rects[j].r0; r <= rects[j].r1; ++r) {
      for (long c = rects[j].c0; c <= rects[j].c1; ++c) {
        b.mask[static_cast<std::size_t>(r) * cam.width + c] = j;
      }
    }
  }

  const auto protos = type_prototypes(spec.n_types, spec.feature_dim, spec.palette_seed);
  Rng noise(derive_seed(spec.seed, static_cast<std::uint64_t>(SceneStream::noise)));
  b.feat2d.assign(b.n_pixels() * spec.feature_dim, 0.0f);
  for (std::size_t px = 0; px < b.n_pixels(); ++px) {
    const std::int32_t r = b.mask[px];
    if (r < 0) continue;
    const auto& proto = protos[types[r]];
    float* out = b.feat2d.data() + px * spec.feature_dim;
    for (int d = 0; d < spec.feature_dim; ++d) {
      const double n = spec.noise_sigma > 0 ? noise.normal(0, spec.noise_sigma) : 0.0;
      out[d] = static_cast<float>(proto[d] + n);
    }
  }
  return b;
}

inline FeatureField feature_field(const SceneBundle& b, const SceneSpec& spec) {
  const auto protos = type_prototypes(spec.n_types, spec.feature_dim, spec.palette_seed);
  FeatureField f;
  f.noise_sigma = spec.noise_sigma;
  for (std::int32_t t : b.region_type) f.prototypes.push_back(protos[t]);
  return f;
}

// ---------------------------------------------------------------------------
// Mask ingestion

// One binary mask from an external segmenter: pixel indices (row * width + col).
struct BinaryMask {
  std::int32_t id = 0;
  std::vector<std::size_t> pixels;
};

// Resolves overlapping masks into one id per pixel. Smaller masks win; equal
// areas resolve to the smaller id.
inline std::vector<std::int32_t> rasterize_masks(std::vector<BinaryMask> masks, int width,
                                                 int height) {
  const std::size_t n = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  std::stable_sort(masks.begin(), masks.end(), [](const BinaryMask& a, const BinaryMask& b) {
    if (a.pixels.size() != b.pixels.size()) return a.pixels.size() > b.pixels.size();
    return a.id > b.id;
  });
  std::vector<std::int32_t> raster(n, -1);
  // Paint largest first so the most specific mask is written last.
  for (const BinaryMask& m : masks) {
    for (std::size_t px : m.pixels) {
      if (px >= n) throw InvalidInput("mask pixel index outside raster");
      raster[px] = m.id;
    }
  }
  return raster;
}

// ---------------------------------------------------------------------------
// Bundle directory format

inline constexpr int kBundleFormatVersion = 1;

inline nlohmann::json camera_to_json(const Camera& c) {
  return {{"fx", c.fx},         {"fy", c.fy},
          {"cx", c.cx},         {"cy", c.cy},
          {"width", c.width},   {"height", c.height},
          {"rotation", c.pose.rotation}, {"translation", c.pose.translation}};
}

inline Camera camera_from_json(const nlohmann::json& j, const std::filesystem::path& where) {
  Camera c;
  c.fx = json_field<double>(j, "fx", where);
  c.fy = json_field<double>(j, "fy", where);
  c.cx = json_field<double>(j, "cx", where);
  c.cy = json_field<double>(j, "cy", where);
  c.width = json_field<int>(j, "width", where);
  c.height = json_field<int>(j, "height", where);
  c.pose.rotation = json_field<std::array<double, 9>>(j, "rotation", where);
  c.pose.translation = json_field<Vec3>(j, "translation", where);
  return c;
}

// Writes `dir/manifest.json` plus one blob per array. Doubles in the manifest
// are serialized with round-trip precision.
inline void write_bundle(const SceneBundle& b, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json m;
  m["format"] = "sam3d-bundle";
  m["version"] = kBundleFormatVersion;
  m["n_points"] = b.n_points();
  m["has_colors"] = !b.colors.empty();
  m["feature_dim"] = b.feature_dim;
  m["region_count"] = b.region_count;
  m["camera"] = camera_to_json(b.camera);
  m["mask_dims"] = {b.camera.height, b.camera.width};
  m["feat2d_dims"] = {b.camera.height, b.camera.width, b.feature_dim};
  m["blobs"] = {{"points", {{"file", "points.f32"}, {"dtype", "f32"}, {"shape", {b.n_points(), 3}}}},
                {"gt_region", {{"file", "gt_region.i32"}, {"dtype", "i32"}, {"shape", {b.n_points()}}}},
                {"mask", {{"file", "mask.i32"}, {"dtype", "i32"}, {"shape", {b.camera.height, b.camera.width}}}},
                {"feat2d", {{"file", "feat2d.f32"}, {"dtype", "f32"},
                            {"shape", {b.camera.height, b.camera.width, b.feature_dim}}}},
                {"region_type", {{"file", "region_type.i32"}, {"dtype", "i32"}, {"shape", {b.region_count}}}}};
  if (!b.colors.empty()) {
    m["blobs"]["colors"] = {{"file", "colors.f32"}, {"dtype", "f32"}, {"shape", {b.n_points(), 3}}};
    write_blob(dir / "colors.f32", b.colors);
  }
  write_blob(dir / "points.f32", b.points);
  write_blob(dir / "gt_region.i32", b.gt_region);
  write_blob(dir / "mask.i32", b.mask);
  write_blob(dir / "feat2d.f32", b.feat2d);
  write_blob(dir / "region_type.i32", b.region_type);
  write_json_file(dir / "manifest.json", m);
}

inline SceneBundle read_bundle(const std::filesystem::path& dir) {
  const auto mpath = dir / "manifest.json";
  const nlohmann::json m = read_json_file(mpath);
  if (!m.is_object() || m.value("format", std::string{}) != "sam3d-bundle") {
    throw FormatError(FormatErrorKind::malformed_header, mpath.string() + ": not a bundle manifest");
  }
  if (json_field<int>(m, "version", mpath) != kBundleFormatVersion) {
    throw FormatError(FormatErrorKind::malformed_header, mpath.string() + ": unsupported version");
  }
  SceneBundle b;
  b.camera = camera_from_json(json_field<nlohmann::json>(m, "camera", mpath), mpath);
  b.feature_dim = json_field<std::int32_t>(m, "feature_dim", mpath);
  b.region_count = json_field<std::int32_t>(m, "region_count", mpath);
  const auto n = json_field<std::size_t>(m, "n_points", mpath);
  const auto mask_dims = json_field<std::vector<long>>(m, "mask_dims", mpath);
  const auto feat_dims = json_field<std::vector<long>>(m, "feat2d_dims", mpath);
  if (mask_dims.size() != 2 || feat_dims.size() != 3) {
    throw FormatError(FormatErrorKind::malformed_header, mpath.string() + ": bad dims arrays");
  }
  if (mask_dims[0] != feat_dims[0] || mask_dims[1] != feat_dims[1] ||
      feat_dims[2] != b.feature_dim) {
    throw FormatError(FormatErrorKind::dimension_inconsistency,
                      mpath.string() + ": mask dims do not match feat2d dims");
  }
  if (mask_dims[0] != b.camera.height || mask_dims[1] != b.camera.width) {
    throw FormatError(FormatErrorKind::dimension_inconsistency,
                      mpath.string() + ": raster dims do not match camera");
  }
  if (b.feature_dim < 1 || b.region_count < 0) {
    throw FormatError(FormatErrorKind::malformed_header, mpath.string() + ": bad dimensions");
  }
  const std::size_t px = b.n_pixels();
  b.points = read_blob<float>(dir / "points.f32", 3 * n);
  if (json_field<bool>(m, "has_colors", mpath)) b.colors = read_blob<float>(dir / "colors.f32", 3 * n);
  b.gt_region = read_blob<std::int32_t>(dir / "gt_region.i32", n);
  b.mask = read_blob<std::int32_t>(dir / "mask.i32", px);
  b.feat2d = read_blob<float>(dir / "feat2d.f32", px * b.feature_dim);
  b.region_type = read_blob<std::int32_t>(dir / "region_type.i32", b.region_count);
  return b;
}

}  // namespace sam3d
