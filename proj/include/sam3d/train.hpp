#pragma once

// Training loop shared by both stages: seeded epoch shuffling, mini-batches,
// AdamW with the warmup + cosine schedule, per-step metrics, final and
// last-good checkpoints, and exact resume.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "checkpoint.hpp"
#include "nn.hpp"
#include "optim.hpp"
#include "scene.hpp"
#include "stage1.hpp"
#include "stage2.hpp"
#include "tokenize.hpp"

namespace sam3d {

struct TokenizerConfig {
  TokenMode mode = TokenMode::sam_guided;
  std::size_t min_points = kDefaultMinPoints;
  std::size_t knn_n = 8;
  std::size_t knn_k = 32;
};

inline TokenSet tokenize(const SceneBundle& b, const TokenizerConfig& c) {
  return c.mode == TokenMode::sam_guided ? sam_tokenize(b, c.min_points) : knn_tokenize(b, c.knn_n, c.knn_k);
}

inline TokenMode parse_token_mode(const std::string& s) {
  if (s == "sam") return TokenMode::sam_guided;
  if (s == "knn") return TokenMode::knn_baseline;
  throw std::invalid_argument("unknown tokenizer mode '" + s + "' (expected sam or knn)");
}

// One scene with everything the training loops need precomputed.
struct SceneItem {
  std::uint64_t scene_id = 0;
  SceneBundle bundle;
  TokenSet tokens;
  TokenInputs inputs;
  Tensor target;      // M x L2 mean-pooled 2D region features
  Tensor region_max;  // M x L2 max-pooled, used for grouping
};

struct Dataset {
  std::vector<SceneItem> scenes;
  TokenizerConfig tokenizer;
  std::size_t skipped = 0;  // scenes with no surviving token

  std::size_t region_count() const {
    std::size_t n = 0;
    for (const auto& s : scenes) n += s.tokens.size();
    return n;
  }
};

inline Dataset make_dataset(const std::vector<SceneBundle>& bundles, const TokenizerConfig& tok, const Arch& arch,
                            std::uint64_t first_scene_id = 0) {
  Dataset ds;
  ds.tokenizer = tok;
  for (std::size_t i = 0; i < bundles.size(); ++i) {
    SceneItem item;
    item.scene_id = first_scene_id + i;
    item.bundle = bundles[i];
    try {
      item.tokens = tokenize(item.bundle, tok);
    } catch (const EmptyTokenization&) {
      ++ds.skipped;
      continue;
    }
    item.inputs = prepare_tokens(item.bundle, item.tokens, all_tokens(item.tokens), arch);
    item.target = pool_region_features(item.bundle, item.tokens, Pooling::mean);
    item.region_max = pool_region_features(item.bundle, item.tokens, Pooling::max);
    ds.scenes.push_back(std::move(item));
  }
  return ds;
}

// Generates scenes seed, seed + 1, ... from a template spec.
inline std::vector<SceneBundle> generate_scenes(SceneSpec spec, std::size_t n) {
  std::vector<SceneBundle> out;
  const std::uint64_t base = spec.seed;
  for (std::size_t i = 0; i < n; ++i) {
    spec.seed = base + i;
    out.push_back(generate_scene(spec));
  }
  return out;
}

// Like generate_scenes, but seeds whose objects cannot all be placed are
// skipped; the seeds actually used are returned alongside. Gives up after
// 4 * n + 16 attempts.
inline std::vector<SceneBundle> generate_placeable_scenes(SceneSpec spec, std::size_t n,
                                                          std::vector<std::uint64_t>* used_seeds = nullptr) {
  std::vector<SceneBundle> out;
  const std::uint64_t base = spec.seed;
  for (std::uint64_t i = 0; out.size() < n; ++i) {
    if (i >= 4 * n + 16) throw PlacementFailed("too many scenes failed placement");
    spec.seed = base + i;
    try {
      out.push_back(generate_scene(spec));
    } catch (const PlacementFailed&) {
      continue;
    }
    if (used_seeds) used_seeds->push_back(spec.seed);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

struct MetricRow {
  int epoch = 0;
  std::int64_t step = 0;
  double lr = 0;
  std::vector<double> losses;
  double grad_norm = 0;
  double wall_ms = 0;
};

inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<std::string>& loss_names,
                              const std::vector<MetricRow>& rows, bool append = false) {
  const bool header = !append || !std::filesystem::exists(path);
  std::ofstream f(path, append ? std::ios::app : std::ios::trunc);
  if (!f) throw FormatError(FormatErrorKind::io, "cannot write " + path.string());
  if (header) {
    f << "epoch,step,lr";
    for (const auto& n : loss_names) f << ',' << n;
    f << ",grad_norm,wall_ms\n";
  }
  for (const auto& r : rows) {
    f << r.epoch << ',' << r.step << ',' << fmt_double(r.lr);
    for (double l : r.losses) f << ',' << fmt_double(l);
    f << ',' << fmt_double(r.grad_norm) << ',' << fmt_double(r.wall_ms) << '\n';
  }
}

// Header plus numeric rows of a CSV written by this library.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return i;
    }
    throw std::out_of_range("csv: no column '" + name + "'");
  }
  double number(std::size_t row, const std::string& name) const { return std::stod(rows.at(row).at(column(name))); }
};

inline CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw FormatError(FormatErrorKind::io, "cannot read " + path.string());
  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
  };
  CsvTable t;
  std::string line;
  if (!std::getline(f, line)) throw FormatError(FormatErrorKind::malformed_header, path.string() + ": empty csv");
  t.header = split(line);
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    t.rows.push_back(split(line));
    if (t.rows.back().size() != t.header.size()) {
      throw FormatError(FormatErrorKind::dimension_inconsistency, path.string() + ": ragged row");
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Stage options and results

struct Stage1Options {
  std::size_t k_groups = 16;
  ScaleMode scale_mode = ScaleMode::mean_one;
  bool reweight = true;
  int kmeans_n_init = kKMeansRestarts;
};

struct Stage2Options {
  double mask_ratio = 0.6;
  bool init_from_teacher = true;
  bool normalize_targets = false;
};

struct RunOptions {
  std::filesystem::path out_dir;      // empty: keep everything in memory
  const Checkpoint* resume = nullptr;  // continue a run from its checkpoint
  int stop_after_epochs = -1;         // halt early (resumable); -1 runs to cfg.epochs
};

struct StageResult {
  Checkpoint checkpoint;
  std::vector<std::string> loss_names;
  std::vector<MetricRow> metrics;
  std::optional<WeightTable> table;
  double initial_loss = 0;  // full-dataset loss before the first update
  double final_loss = 0;    // full-dataset loss after the last update
};

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, 0xE90C, static_cast<std::uint64_t>(epoch)));
  rng.shuffle(order);
  return order;
}

inline std::int64_t steps_per_epoch(std::size_t n, int batch) {
  return static_cast<std::int64_t>((n + static_cast<std::size_t>(batch) - 1) / static_cast<std::size_t>(batch));
}

// ---------------------------------------------------------------------------
// Stage 1

// All max-pooled region features of a dataset, one row per region.
inline std::vector<double> stacked_region_features(const Dataset& ds) {
  std::vector<double> out;
  for (const auto& s : ds.scenes) out.insert(out.end(), s.region_max.data().begin(), s.region_max.data().end());
  return out;
}

inline std::vector<std::size_t> region_groups(const SceneItem& s, const WeightTable& t) {
  std::vector<std::size_t> g(s.tokens.size());
  const std::size_t d = s.region_max.cols();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = t.group_of(s.region_max.data().subspan(i * d, d));
  return g;
}

inline Tensor stage1_forward(const TokenInputs& in, const ModelParams& p) {
  return project_3d(encode_tokens(in, p), p);
}

namespace detail {

inline Tensor stage1_batch_loss(const Dataset& ds, const std::vector<std::size_t>& batch,
                                const std::vector<std::vector<double>>& weights, const ModelParams& p) {
  std::vector<Tensor> preds, targets;
  std::vector<double> w;
  for (std::size_t i : batch) {
    preds.push_back(stage1_forward(ds.scenes[i].inputs, p));
    targets.push_back(ds.scenes[i].target);
    w.insert(w.end(), weights[i].begin(), weights[i].end());
  }
  const Tensor pred = preds.size() == 1 ? preds[0] : concat(preds, 0);
  const Tensor target = targets.size() == 1 ? targets[0] : concat(targets, 0);
  return stage1_loss(pred, target, w);
}

inline std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

inline void save_if(const std::filesystem::path& dir, const Checkpoint& ck) {
  if (!dir.empty()) save_checkpoint(ck, dir);
}

// Runs `epochs` of mini-batch AdamW. `batch_loss` returns one scalar per loss
// name, the last being the optimized total.
template <typename BatchLoss>
void train_loop(const Dataset& ds, Checkpoint& ck, const TrainConfig& cfg, std::uint64_t order_seed,
                const RunOptions& run, BatchLoss&& batch_loss, std::vector<MetricRow>& metrics) {
  const std::filesystem::path& out_dir = run.out_dir;
  const std::int64_t per_epoch = steps_per_epoch(ds.scenes.size(), cfg.batch_size);
  const std::int64_t total = per_epoch * cfg.epochs;
  const int stop = run.stop_after_epochs < 0 ? cfg.epochs : std::min(cfg.epochs, run.stop_after_epochs);
  Checkpoint last_good = ck;
  last_good.params = ck.params.clone();
  for (int epoch = ck.epoch; epoch < stop; ++epoch) {
    const auto order = epoch_order(ds.scenes.size(), order_seed, epoch);
    try {
      for (std::int64_t b = 0; b < per_epoch; ++b) {
        const auto t0 = std::chrono::steady_clock::now();
        const std::size_t lo = static_cast<std::size_t>(b * cfg.batch_size);
        const std::size_t hi = std::min(order.size(), lo + static_cast<std::size_t>(cfg.batch_size));
        const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(lo),
                                             order.begin() + static_cast<std::ptrdiff_t>(hi));
        ck.params.zero_grad();
        const std::vector<Tensor> losses = batch_loss(batch, epoch);
        losses.back().backward();
        const double lr = lr_at(ck.step + 1, total, cfg);
        MetricRow row;
        row.epoch = epoch;
        row.step = ck.step;
        row.lr = lr;
        for (const auto& l : losses) row.losses.push_back(l.item());
        row.grad_norm = grad_norm(ck.params);
        adamw_step(ck.params, ck.optimizer, lr, cfg.weight_decay, cfg, ck.step);
        ++ck.step;
        row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        metrics.push_back(std::move(row));
      }
    } catch (const TensorError& e) {
      if (e.kind() != TensorError::Kind::non_finite) throw;
      save_if(out_dir.empty() ? out_dir : out_dir / "last_good", last_good);
      throw DivergedRun(ck.step, e.what());
    } catch (const DivergedRun&) {
      save_if(out_dir.empty() ? out_dir : out_dir / "last_good", last_good);
      throw;
    }
    ck.epoch = epoch + 1;
    last_good = ck;
    last_good.params = ck.params.clone();
  }
  ck.params.zero_grad();
}

}  // namespace detail

inline ModelParams trainable_copy(const ModelParams& p) {
  ModelParams out = p.clone();
  for (const auto& name : out.names()) out.set_frozen(name, false);
  return out;
}

// Per-region loss weights for every scene: s * w_group, or 1 without reweighting.
inline std::vector<std::vector<double>> stage1_weights(const Dataset& ds, const WeightTable& table,
                                                       const Stage1Options& opt) {
  std::vector<std::vector<double>> w;
  for (const auto& s : ds.scenes) {
    std::vector<double> ws;
    for (std::size_t g : region_groups(s, table)) ws.push_back(opt.reweight ? table.region_weight(g, opt.scale_mode) : 1.0);
    w.push_back(std::move(ws));
  }
  return w;
}

inline double stage1_dataset_loss(const Dataset& ds, const std::vector<std::vector<double>>& weights,
                                  const ModelParams& p) {
  NoGradGuard guard;
  return detail::stage1_batch_loss(ds, detail::all_indices(ds.scenes.size()), weights, p).item();
}

inline StageResult run_stage1(const Dataset& ds, const Arch& arch, const TrainConfig& cfg, const Stage1Options& opt,
                              const RunOptions& run = {}) {
  cfg.validate();
  if (ds.scenes.empty()) throw std::invalid_argument("stage1: empty dataset");
  StageResult res;
  res.loss_names = {"L_distill"};
  const auto feats = stacked_region_features(ds);
  const std::size_t dim = ds.scenes.front().region_max.cols();
  res.table = build_weight_table(feats, dim, opt.k_groups, derive_seed(cfg.seed, 0x6A0B), opt.kmeans_n_init);
  const auto weights = stage1_weights(ds, *res.table, opt);

  Checkpoint& ck = res.checkpoint;
  if (run.resume) {
    ck = *run.resume;
    ck.params = run.resume->params.clone();
  } else {
    ck.params = init_model(arch, derive_seed(cfg.seed, 0x1417));
  }
  ck.meta = {{"stage", 1},
             {"tokenizer", to_string(ds.tokenizer.mode)},
             {"config", cfg},
             {"k_groups", opt.k_groups},
             {"scale_mode", to_string(opt.scale_mode)},
             {"reweight", opt.reweight}};
  res.initial_loss = stage1_dataset_loss(ds, weights, ck.params);
  detail::train_loop(ds, ck, cfg, cfg.seed, run,
                     [&](const std::vector<std::size_t>& batch, int) {
                       return std::vector<Tensor>{detail::stage1_batch_loss(ds, batch, weights, ck.params)};
                     },
                     res.metrics);
  res.final_loss = stage1_dataset_loss(ds, weights, ck.params);
  if (!run.out_dir.empty()) {
    save_checkpoint(ck, run.out_dir / "checkpoint");
    save_weight_table(*res.table, run.out_dir / "weight_table");
    write_metrics_csv(run.out_dir / "metrics.csv", res.loss_names, res.metrics, run.resume != nullptr);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Stage 2

inline std::uint64_t mask_seed(const TrainConfig& cfg) { return derive_seed(cfg.seed, 0x3A5C); }

namespace detail {

inline std::vector<Tensor> stage2_batch_loss(const Dataset& ds, const std::vector<std::size_t>& batch, int epoch,
                                             const ModelParams& teacher, const ModelParams& student,
                                             const TrainConfig& cfg, const Stage2Options& opt) {
  Tensor ins, tok, total;
  for (std::size_t i : batch) {
    const auto& s = ds.scenes[i];
    const MaskPlan plan = make_mask_plan(s.tokens.size(), opt.mask_ratio, mask_seed(cfg), s.scene_id,
                                         static_cast<std::uint64_t>(epoch));
    const auto t = teacher_forward(s.inputs, plan, teacher, opt.normalize_targets);
    const auto l = stage2_loss(student_forward(s.inputs, plan, student), t, student);
    ins = ins.defined() ? add(ins, l.instance) : l.instance;
    tok = tok.defined() ? add(tok, l.token) : l.token;
    total = total.defined() ? add(total, l.total) : l.total;
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  return {scale(ins, inv), scale(tok, inv), scale(total, inv)};
}

}  // namespace detail

inline StageResult run_stage2(const Dataset& ds, const Checkpoint& teacher_ck, const TrainConfig& cfg,
                              const Stage2Options& opt, const RunOptions& run = {}) {
  cfg.validate();
  if (ds.scenes.empty()) throw std::invalid_argument("stage2: empty dataset");
  if (ds.tokenizer.mode != TokenMode::sam_guided) throw std::invalid_argument("stage2: needs sam-guided tokens");
  ModelParams teacher = teacher_ck.params.clone();
  teacher.freeze_all();

  StageResult res;
  res.loss_names = {"L_ins", "L_token", "L_final"};
  Checkpoint& ck = res.checkpoint;
  if (run.resume) {
    ck = *run.resume;
    ck.params = run.resume->params.clone();
  } else {
    ck.params = opt.init_from_teacher ? trainable_copy(teacher_ck.params)
                                      : init_model(teacher_ck.params.arch, derive_seed(cfg.seed, 0x1417));
  }
  ck.meta = {{"stage", 2},
             {"tokenizer", to_string(ds.tokenizer.mode)},
             {"config", cfg},
             {"mask_ratio", opt.mask_ratio},
             {"init_from_teacher", opt.init_from_teacher},
             {"normalize_targets", opt.normalize_targets},
             {"teacher_meta", teacher_ck.meta}};
  auto dataset_loss = [&] {
    NoGradGuard guard;
    return detail::stage2_batch_loss(ds, detail::all_indices(ds.scenes.size()), 0, teacher, ck.params, cfg, opt)
        .back()
        .item();
  };
  res.initial_loss = dataset_loss();
  detail::train_loop(ds, ck, cfg, derive_seed(cfg.seed, 2), run,
                     [&](const std::vector<std::size_t>& batch, int epoch) {
                       return detail::stage2_batch_loss(ds, batch, epoch, teacher, ck.params, cfg, opt);
                     },
                     res.metrics);
  res.final_loss = dataset_loss();
  if (!run.out_dir.empty()) {
    save_checkpoint(ck, run.out_dir / "checkpoint");
    write_metrics_csv(run.out_dir / "metrics.csv", res.loss_names, res.metrics, run.resume != nullptr);
  }
  return res;
}

}  // namespace sam3d
