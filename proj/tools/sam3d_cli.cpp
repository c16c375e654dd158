// sam3d: scene generation, tokenization audits, two-stage pretraining, linear
// probes and the ablation report.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "sam3d/eval.hpp"
#include "sam3d/pipeline.hpp"
#include "sam3d/probe.hpp"
#include "sam3d/report.hpp"

namespace fs = std::filesystem;
using namespace sam3d;

namespace {

enum ExitCode : int {
  kOk = 0,
  kOther = 1,
  kInvalid = 3,
  kFormat = 4,
  kDiverged = 5,
  kBadSplit = 6,
  kEmptyTokens = 7,
};

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out_dir;
  bool paper_defaults = false;
};

struct TokenFlags {
  std::optional<std::string> mode;
  std::optional<std::size_t> min_points, n, k;

  void add(CLI::App* app) {
    app->add_option("--mode", mode, "tokenizer: sam or knn")->check(CLI::IsMember({"sam", "knn"}));
    app->add_option("--min-points", min_points, "drop SAM regions with fewer points");
    app->add_option("--n", n, "KNN tokenizer: number of FPS centres");
    app->add_option("--k", k, "KNN tokenizer: neighbours per centre");
  }
  void apply(TokenizerConfig& t) const {
    if (mode) t.mode = parse_token_mode(*mode);
    if (min_points) t.min_points = *min_points;
    if (n) t.knn_n = *n;
    if (k) t.knn_k = *k;
  }
};

struct TrainFlags {
  std::optional<int> epochs, batch;
  std::optional<double> lr, wd;

  void add(CLI::App* app) {
    app->add_option("--epochs", epochs);
    app->add_option("--lr", lr);
    app->add_option("--wd", wd);
    app->add_option("--batch", batch);
  }
  void apply(nlohmann::json& overrides) const {
    if (epochs) overrides["epochs"] = *epochs;
    if (lr) overrides["base_lr"] = *lr;
    if (wd) overrides["weight_decay"] = *wd;
    if (batch) overrides["batch_size"] = *batch;
  }
};

PipelineConfig base_config(const Globals& g) {
  PipelineConfig c;
  if (g.paper_defaults) c.train = TrainConfig::paper_defaults();
  if (!g.config.empty()) merge_pipeline_json(read_json_file(g.config), c, g.config);
  if (g.seed) c.seed = *g.seed;
  return c;
}

fs::path require_out_dir(const Globals& g, const char* cmd) {
  if (g.out_dir.empty()) throw std::invalid_argument(std::string(cmd) + ": --out-dir is required");
  fs::create_directories(g.out_dir);
  return g.out_dir;
}

// Head width follows the 2D features of the data.
Arch arch_for(const PipelineConfig& c, const SceneSet& s) {
  Arch a = c.arch;
  if (!s.bundles.empty()) a.proj_dim = s.bundles.front().feature_dim;
  return a;
}

// The run directory holding a checkpoint directory.
fs::path run_dir_of(const fs::path& ckpt) {
  fs::path p = ckpt.lexically_normal();
  if (p.filename().empty()) p = p.parent_path();
  return p.parent_path();
}

void print_stage(const char* name, const StageResult& r) {
  std::printf("%s: %zu epochs, loss %.6g -> %.6g\n", name, r.metrics.empty() ? 0 : r.metrics.back().epoch + 1ul,
              r.initial_loss, r.final_loss);
}

// ---------------------------------------------------------------------------

int cmd_scene(const Globals& g, const fs::path& out, std::optional<std::size_t> n_scenes,
              std::optional<int> n_objects, std::optional<double> imbalance, std::optional<double> noise) {
  PipelineConfig c = base_config(g);
  SceneSet set;
  set.spec = c.scenes.spec;
  if (n_objects) set.spec.n_objects = *n_objects;
  if (imbalance) set.spec.imbalance_exponent = *imbalance;
  if (noise) set.spec.noise_sigma = *noise;
  set.spec.seed = c.seed;
  const std::size_t n = n_scenes.value_or(c.scenes.n_scenes);
  set.bundles = generate_placeable_scenes(set.spec, n, &set.seeds);
  const fs::path dir = out.empty() ? require_out_dir(g, "scene") : out;
  write_scene_set(set, dir);
  std::printf("wrote %zu scenes to %s\n", set.bundles.size(), dir.string().c_str());
  return kOk;
}

int cmd_tokenize(const Globals& g, const fs::path& scenes, const TokenFlags& tf, fs::path audit) {
  PipelineConfig c = base_config(g);
  tf.apply(c.tokenizer);
  const SceneSet set = read_scene_set(scenes);
  std::vector<PurityRow> rows;
  double total = 0;
  for (std::size_t i = 0; i < set.bundles.size(); ++i) {
    const TokenSet ts = tokenize(set.bundles[i], c.tokenizer);
    rows.push_back(audit_tokens(set.seeds[i], set.bundles[i], ts));
    total += rows.back().purity;
  }
  if (audit.empty()) audit = require_out_dir(g, "tokenize") / "purity.csv";
  write_purity_csv(audit, rows);
  std::printf("%s tokens: mean purity %.4f over %zu scenes (%s)\n", to_string(c.tokenizer.mode),
              rows.empty() ? 0.0 : total / static_cast<double>(rows.size()), rows.size(), audit.string().c_str());
  return kOk;
}

int cmd_stage1(const Globals& g, const fs::path& scenes, const fs::path& eval_scenes, const TokenFlags& tf,
               const TrainFlags& trf, std::optional<std::size_t> k_groups, std::optional<std::string> scale_mode,
               bool no_reweight, bool resume, int stop_after) {
  PipelineConfig c = base_config(g);
  tf.apply(c.tokenizer);
  trf.apply(c.stage1_train);
  if (k_groups) c.stage1.k_groups = *k_groups;
  if (scale_mode) c.stage1.scale_mode = parse_scale_mode(*scale_mode);
  if (no_reweight) c.stage1.reweight = false;
  const fs::path out = require_out_dir(g, "stage1");

  const SceneSet set = read_scene_set(scenes);
  const Arch arch = arch_for(c, set);
  const Dataset ds = scene_set_dataset(set, c.tokenizer, arch);
  RunOptions run;
  run.out_dir = out;
  run.stop_after_epochs = stop_after;
  std::optional<Checkpoint> prior;
  if (resume) {
    prior = load_checkpoint(out / "checkpoint");
    run.resume = &*prior;
  }
  const TrainConfig cfg = c.stage_train(1);
  const auto r = run_stage1(ds, arch, cfg, c.stage1, run);
  write_purity_csv(out / "purity.csv", audit_dataset(ds));
  const Dataset held = eval_scenes.empty() ? ds : scene_set_dataset(read_scene_set(eval_scenes), c.tokenizer, arch);
  const auto regions = evaluate_regions(held, r.checkpoint.params, *r.table);
  write_region_eval_csv(out / "eval.csv", regions);
  write_json_file(out / "run.json", {{"stage", 1},
                                     {"tokenizer", tokenizer_to_json(c.tokenizer)},
                                     {"reweight", c.stage1.reweight},
                                     {"scenes", scenes.string()},
                                     {"eval_scenes", eval_scenes.string()},
                                     {"train", cfg},
                                     {"config", to_json(c)}});
  print_stage("stage1", r);
  std::printf("held-out cosine %.4f (tail %.4f)\n", mean_cosine(regions, false), mean_cosine(regions, true));
  return kOk;
}

int cmd_stage2(const Globals& g, const fs::path& scenes, const fs::path& eval_scenes, const fs::path& teacher_dir,
               const std::string& init_from_teacher, std::optional<double> mask_ratio,
               std::optional<std::uint64_t> seed, const TrainFlags& trf, bool resume, int stop_after) {
  PipelineConfig c = base_config(g);
  if (seed) c.seed = *seed;
  trf.apply(c.stage2_train);
  if (!init_from_teacher.empty()) c.stage2.init_from_teacher = init_from_teacher == "on";
  if (mask_ratio) c.stage2.mask_ratio = *mask_ratio;
  const fs::path out = require_out_dir(g, "stage2");

  const Checkpoint teacher = load_checkpoint(teacher_dir);
  const fs::path teacher_run = run_dir_of(teacher_dir);
  bool reweight = teacher.meta.value("reweight", true);
  if (fs::exists(teacher_run / "run.json")) {
    const auto tj = read_json_file(teacher_run / "run.json");
    if (tj.contains("tokenizer")) tokenizer_from_json(tj.at("tokenizer"), c.tokenizer);
    reweight = tj.value("reweight", reweight);
  }
  const Arch arch = teacher.params.arch;
  const SceneSet set = read_scene_set(scenes);
  const Dataset ds = scene_set_dataset(set, c.tokenizer, arch);
  RunOptions run;
  run.out_dir = out;
  run.stop_after_epochs = stop_after;
  std::optional<Checkpoint> prior;
  if (resume) {
    prior = load_checkpoint(out / "checkpoint");
    run.resume = &*prior;
  }
  const TrainConfig cfg = c.stage_train(2);
  const auto r = run_stage2(ds, teacher, cfg, c.stage2, run);
  write_purity_csv(out / "purity.csv", audit_dataset(ds));
  const Dataset held = eval_scenes.empty() ? ds : scene_set_dataset(read_scene_set(eval_scenes), c.tokenizer, arch);
  ModelParams frozen = teacher.params.clone();
  frozen.freeze_all();
  const auto pooled = pooled_cosines(held, frozen, r.checkpoint.params, c.stage2.mask_ratio,
                                     derive_seed(cfg.seed, 0xE7A1));
  write_pooled_csv(out / "pooled.csv", pooled);
  if (fs::exists(teacher_run / "weight_table")) {
    const auto regions = evaluate_regions(held, r.checkpoint.params, load_weight_table(teacher_run / "weight_table"));
    write_region_eval_csv(out / "eval.csv", regions);
  }
  write_json_file(out / "run.json", {{"stage", 2},
                                     {"tokenizer", tokenizer_to_json(c.tokenizer)},
                                     {"reweight", reweight},
                                     {"teacher", teacher_dir.string()},
                                     {"scenes", scenes.string()},
                                     {"eval_scenes", eval_scenes.string()},
                                     {"train", cfg},
                                     {"config", to_json(c)}});
  print_stage("stage2", r);
  double s = 0;
  for (const auto& p : pooled) s += p.cosine;
  std::printf("held-out pooled cosine %.4f\n", pooled.empty() ? 0.0 : s / static_cast<double>(pooled.size()));
  return kOk;
}

int cmd_probe(const Globals& g, const fs::path& train_scenes, const fs::path& test_scenes, const fs::path& ckpt,
              bool scratch, const TokenFlags& tf, std::optional<int> epochs) {
  PipelineConfig c = base_config(g);
  if (epochs) c.probe.epochs = *epochs;
  if (scratch == !ckpt.empty()) throw std::invalid_argument("probe: give exactly one of --ckpt or --scratch");
  const SceneSet train_set = read_scene_set(train_scenes);
  const SceneSet test_set = read_scene_set(test_scenes);

  ModelParams encoder;
  EncoderTag tag = EncoderTag::scratch;
  fs::path out;
  if (scratch) {
    tf.apply(c.tokenizer);
    encoder = init_model(arch_for(c, train_set), derive_seed(c.seed, 0x1417));
    out = require_out_dir(g, "probe --scratch");
  } else {
    const Checkpoint ck = load_checkpoint(ckpt);
    encoder = ck.params;
    tag = ck.meta.value("stage", 1) == 2 ? EncoderTag::stage2 : EncoderTag::stage1;
    const fs::path run_dir = run_dir_of(ckpt);
    if (fs::exists(run_dir / "run.json")) {
      const auto rj = read_json_file(run_dir / "run.json");
      if (rj.contains("tokenizer")) tokenizer_from_json(rj.at("tokenizer"), c.tokenizer);
    }
    tf.apply(c.tokenizer);
    out = g.out_dir.empty() ? run_dir : require_out_dir(g, "probe");
  }
  const Dataset train = scene_set_dataset(train_set, c.tokenizer, encoder.arch);
  const Dataset test = scene_set_dataset(test_set, c.tokenizer, encoder.arch);
  const ProbeResult r = linear_probe(encoder, train, test, tag, c.probe);
  write_probe_csv(out / "probe.csv", r);
  if (scratch) {
    write_purity_csv(out / "purity.csv", audit_dataset(test));
    write_json_file(out / "run.json", {{"stage", 0},
                                       {"tokenizer", tokenizer_to_json(c.tokenizer)},
                                       {"scenes", train_scenes.string()},
                                       {"config", to_json(c)}});
  }
  std::printf("probe (%s): accuracy %.4f over %zu tokens\n", to_string(tag), r.accuracy, r.n_tokens);
  return kOk;
}

int cmd_report(const Globals& g, fs::path runs, fs::path out) {
  if (runs.empty()) runs = g.out_dir;
  if (runs.empty()) throw std::invalid_argument("report: --runs or --out-dir is required");
  if (out.empty()) out = runs / "report.csv";
  const auto rows = build_report(scan_runs(runs));
  write_report_csv(out, rows);
  const std::string summary = report_summary(rows);
  fs::path txt = out;
  txt.replace_extension(".txt");
  std::ofstream(txt) << summary;
  std::cout << summary;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SAM-guided two-stage 3D point-cloud pretraining at desk scale"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "master seed");
  app.add_option("--config", g.config, "pipeline JSON config")->check(CLI::ExistingFile);
  app.add_option("--out-dir", g.out_dir, "output directory");
  app.add_flag("--paper-defaults", g.paper_defaults, "full-scale training preset (batch 64)");

  auto* scene = app.add_subcommand("scene", "generate synthetic scenes");
  std::string scene_out;
  std::optional<std::size_t> n_scenes;
  std::optional<int> n_objects;
  std::optional<double> imbalance, noise;
  scene->add_option("--out", scene_out, "scene set directory (default --out-dir)");
  scene->add_option("--n-scenes", n_scenes);
  scene->add_option("--n-objects", n_objects);
  scene->add_option("--imbalance", imbalance, "power-law exponent on object sizes");
  scene->add_option("--noise-sigma", noise);

  auto* tok = app.add_subcommand("tokenize", "tokenize scenes and audit purity");
  std::string tok_scenes, audit;
  TokenFlags tok_flags;
  tok->add_option("--scenes", tok_scenes)->required()->check(CLI::ExistingDirectory);
  tok_flags.add(tok);
  tok->add_option("--audit", audit, "purity CSV path (default <out-dir>/purity.csv)");

  auto* s1 = app.add_subcommand("stage1", "2D-to-3D distillation");
  std::string s1_scenes, s1_eval;
  TokenFlags s1_tok;
  TrainFlags s1_train;
  std::optional<std::size_t> k_groups;
  std::optional<std::string> scale_mode;
  bool no_reweight = false, s1_resume = false;
  int s1_stop = -1;
  s1->add_option("--scenes", s1_scenes)->required()->check(CLI::ExistingDirectory);
  s1->add_option("--eval-scenes", s1_eval, "held-out scenes for eval.csv")->check(CLI::ExistingDirectory);
  s1_tok.add(s1);
  s1_train.add(s1);
  s1->add_option("--k-groups", k_groups);
  s1->add_option("--scale-mode", scale_mode)->check(CLI::IsMember({"mean-one", "paper-literal"}));
  s1->add_flag("--no-reweight", no_reweight);
  s1->add_flag("--resume", s1_resume, "continue from <out-dir>/checkpoint");
  s1->add_option("--stop-after", s1_stop, "halt after this many epochs");

  auto* s2 = app.add_subcommand("stage2", "3D-to-3D distillation");
  std::string s2_scenes, s2_eval, teacher_ckpt, init_from_teacher;
  std::optional<double> mask_ratio;
  std::optional<std::uint64_t> s2_seed;
  TrainFlags s2_train;
  bool s2_resume = false;
  int s2_stop = -1;
  s2->add_option("--scenes", s2_scenes)->required()->check(CLI::ExistingDirectory);
  s2->add_option("--eval-scenes", s2_eval)->check(CLI::ExistingDirectory);
  s2->add_option("--teacher-ckpt", teacher_ckpt)->required()->check(CLI::ExistingDirectory);
  s2->add_option("--init-from-teacher", init_from_teacher)->check(CLI::IsMember({"on", "off"}));
  s2->add_option("--mask-ratio", mask_ratio);
  s2->add_option("--seed", s2_seed);
  s2_train.add(s2);
  s2->add_flag("--resume", s2_resume);
  s2->add_option("--stop-after", s2_stop);

  auto* probe = app.add_subcommand("probe", "linear probe on frozen token features");
  std::string train_scenes, test_scenes, ckpt;
  bool scratch = false;
  TokenFlags probe_tok;
  std::optional<int> probe_epochs;
  probe->add_option("--train-scenes", train_scenes)->required()->check(CLI::ExistingDirectory);
  probe->add_option("--test-scenes", test_scenes)->required()->check(CLI::ExistingDirectory);
  probe->add_option("--ckpt", ckpt, "encoder checkpoint directory")->check(CLI::ExistingDirectory);
  probe->add_flag("--scratch", scratch, "probe a freshly initialized encoder");
  probe_tok.add(probe);
  probe->add_option("--epochs", probe_epochs);

  auto* report = app.add_subcommand("report", "ablation report over run directories");
  std::string runs, report_out;
  report->add_option("--runs", runs, "directory of runs (default --out-dir)");
  report->add_option("--out", report_out, "report CSV (default <runs>/report.csv)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*scene) return cmd_scene(g, scene_out, n_scenes, n_objects, imbalance, noise);
    if (*tok) return cmd_tokenize(g, tok_scenes, tok_flags, audit);
    if (*s1) {
      return cmd_stage1(g, s1_scenes, s1_eval, s1_tok, s1_train, k_groups, scale_mode, no_reweight, s1_resume,
                        s1_stop);
    }
    if (*s2) {
      return cmd_stage2(g, s2_scenes, s2_eval, teacher_ckpt, init_from_teacher, mask_ratio, s2_seed, s2_train,
                        s2_resume, s2_stop);
    }
    if (*probe) return cmd_probe(g, train_scenes, test_scenes, ckpt, scratch, probe_tok, probe_epochs);
    if (*report) return cmd_report(g, runs, report_out);
  } catch (const BadSplit& e) {
    std::cerr << "bad split: " << e.what() << '\n';
    return kBadSplit;
  } catch (const DivergedRun& e) {
    std::cerr << "diverged: " << e.what() << '\n';
    return kDiverged;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kFormat;
  } catch (const EmptyTokenization& e) {
    std::cerr << "empty tokenization: " << e.what() << '\n';
    return kEmptyTokens;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid input: " << e.what() << '\n';
    return kInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kOther;
  }
  return kOther;
}
