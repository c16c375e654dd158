#pragma once

// Held-out evaluation shared by the CLI and the acceptance runs: per-region
// cosine between distilled 3D features and pooled 2D targets, tail-group
// summaries, the stage-2 pooled-feature agreement, and tokenizer purity audits.
// Every number is written to CSV so reports can be recomputed from disk.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "train.hpp"

namespace sam3d {

// The ceil(K / 4) groups with the fewest member regions (lower index first on
// equal counts).
inline std::vector<bool> tail_groups(const WeightTable& t) {
  std::vector<std::size_t> order(t.K());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return t.groups.counts[a] < t.groups.counts[b]; });
  std::vector<bool> tail(t.K(), false);
  for (std::size_t i = 0; i < (t.K() + 3) / 4; ++i) tail[order[i]] = true;
  return tail;
}

struct RegionEval {
  std::uint64_t scene_id = 0;
  std::size_t token = 0;
  std::size_t group = 0;
  std::int64_t group_count = 0;
  bool tail = false;
  double cosine = 0;
};

inline double row_cosine(const Tensor& a, const Tensor& b, std::size_t row) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t j = 0; j < a.cols(); ++j) {
    dot += a.at(row, j) * b.at(row, j);
    na += a.at(row, j) * a.at(row, j);
    nb += b.at(row, j) * b.at(row, j);
  }
  const double den = std::sqrt(na * nb);
  return den > 0 ? dot / den : 0.0;
}

// cosine(F3D, F2D) for every region of every scene, with its weight-table group.
inline std::vector<RegionEval> evaluate_regions(const Dataset& ds, const ModelParams& p, const WeightTable& table) {
  NoGradGuard guard;
  const auto tail = tail_groups(table);
  std::vector<RegionEval> out;
  for (const auto& s : ds.scenes) {
    const Tensor f = stage1_forward(s.inputs, p);
    const auto groups = region_groups(s, table);
    for (std::size_t i = 0; i < groups.size(); ++i) {
      out.push_back({s.scene_id, i, groups[i], table.groups.counts[groups[i]], tail[groups[i]],
                     row_cosine(f, s.target, i)});
    }
  }
  return out;
}

// NaN when no region qualifies.
inline double mean_cosine(const std::vector<RegionEval>& rows, bool tail_only) {
  double s = 0;
  std::size_t n = 0;
  for (const auto& r : rows) {
    if (tail_only && !r.tail) continue;
    s += r.cosine;
    ++n;
  }
  return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

inline void write_region_eval_csv(const std::filesystem::path& path, const std::vector<RegionEval>& rows) {
  std::ofstream f(path);
  if (!f) throw FormatError(FormatErrorKind::io, "cannot write " + path.string());
  f << "scene_id,token,group,group_count,tail,cosine\n";
  for (const auto& r : rows) {
    f << r.scene_id << ',' << r.token << ',' << r.group << ',' << r.group_count << ',' << (r.tail ? 1 : 0) << ','
      << fmt_double(r.cosine) << '\n';
  }
}

struct PooledEval {
  std::uint64_t scene_id = 0;
  double cosine = 0;
};

// Per scene: cosine(predictor(student pooled visible features), teacher pooled
// features), with held-out mask plans keyed by `seed`. Scenes too small to keep
// a visible token are left out.
inline std::vector<PooledEval> pooled_cosines(const Dataset& ds, const ModelParams& teacher,
                                              const ModelParams& student, double mask_ratio, std::uint64_t seed) {
  NoGradGuard guard;
  std::vector<PooledEval> out;
  for (const auto& sc : ds.scenes) {
    const MaskPlan plan = make_mask_plan(sc.tokens.size(), mask_ratio, seed, sc.scene_id, 0);
    if (plan.visible.empty()) continue;
    const auto t = teacher_forward(sc.inputs, plan, teacher);
    const auto st = student_forward(sc.inputs, plan, student);
    out.push_back({sc.scene_id, cosine_sim(predict_instance(st.instance, student), t.instance).item()});
  }
  return out;
}

inline double pooled_cosine(const Dataset& ds, const ModelParams& teacher, const ModelParams& student,
                            double mask_ratio, std::uint64_t seed) {
  const auto rows = pooled_cosines(ds, teacher, student, mask_ratio, seed);
  double s = 0;
  for (const auto& r : rows) s += r.cosine;
  return rows.empty() ? std::numeric_limits<double>::quiet_NaN() : s / static_cast<double>(rows.size());
}

inline void write_pooled_csv(const std::filesystem::path& path, const std::vector<PooledEval>& rows) {
  std::ofstream f(path);
  if (!f) throw FormatError(FormatErrorKind::io, "cannot write " + path.string());
  f << "scene_id,cosine\n";
  for (const auto& r : rows) f << r.scene_id << ',' << fmt_double(r.cosine) << '\n';
}

// ---------------------------------------------------------------------------
// Purity audit

struct PurityRow {
  std::uint64_t scene_id = 0;
  TokenMode mode = TokenMode::sam_guided;
  std::size_t n_tokens = 0;
  double purity = 0;
  std::size_t dropped = 0;
};

inline PurityRow audit_tokens(std::uint64_t scene_id, const SceneBundle& b, const TokenSet& ts) {
  return {scene_id, ts.mode, ts.size(), purity(ts, b.gt_region), ts.dropped_points.size()};
}

inline std::vector<PurityRow> audit_dataset(const Dataset& ds) {
  std::vector<PurityRow> rows;
  for (const auto& s : ds.scenes) rows.push_back(audit_tokens(s.scene_id, s.bundle, s.tokens));
  return rows;
}

inline void write_purity_csv(const std::filesystem::path& path, const std::vector<PurityRow>& rows) {
  std::ofstream f(path);
  if (!f) throw FormatError(FormatErrorKind::io, "cannot write " + path.string());
  f << "scene_id,mode,n_tokens,purity,dropped\n";
  for (const auto& r : rows) {
    f << r.scene_id << ',' << to_string(r.mode) << ',' << r.n_tokens << ','
      << fmt_double(r.purity) << ',' << r.dropped << '\n';
  }
}

}  // namespace sam3d
