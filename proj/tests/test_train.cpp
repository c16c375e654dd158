#include <gtest/gtest.h>

#include <cmath>

#include "sam3d/train.hpp"
#include "test_util.hpp"

using namespace sam3d;

namespace {

Arch small_arch() {
  Arch a;
  a.embed_dim = 16;
  a.n_heads = 2;
  a.n_enc_layers = 1;
  a.n_dec_layers = 1;
  a.pointnet_hidden = 16;
  a.mlp_hidden = 16;
  a.max_points_per_token = 8;
  a.proj_dim = 8;
  return a;
}

Dataset small_dataset(std::uint64_t seed, std::size_t n, TokenMode mode = TokenMode::sam_guided) {
  SceneSpec spec;
  spec.seed = seed;
  spec.n_objects = 4;
  spec.points_min = 20;
  spec.points_max = 40;
  spec.feature_dim = 8;
  TokenizerConfig tok;
  tok.mode = mode;
  tok.knn_n = 4;
  tok.knn_k = 8;
  return make_dataset(generate_scenes(spec, n), tok, small_arch(), seed);
}

TrainConfig small_config(int epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.warmup_epochs = std::min(1, epochs);
  c.batch_size = 2;
  c.base_lr = 3e-3;
  c.seed = 7;
  return c;
}

Stage1Options small_stage1() {
  Stage1Options o;
  o.k_groups = 3;
  return o;
}

}  // namespace

TEST(Train, SameSeedGivesBitIdenticalCheckpoints) {
  const auto ds = small_dataset(0, 4);
  testutil::TempDir a, b;
  RunOptions ra, rb;
  ra.out_dir = a.path();
  rb.out_dir = b.path();
  const auto x = run_stage1(ds, small_arch(), small_config(3), small_stage1(), ra);
  const auto y = run_stage1(ds, small_arch(), small_config(3), small_stage1(), rb);
  EXPECT_TRUE(x.checkpoint.params.same_values(y.checkpoint.params));
  EXPECT_EQ(directory_digest(a.path() / "checkpoint"), directory_digest(b.path() / "checkpoint"));

  auto other = small_config(3);
  other.seed = 8;
  const auto z = run_stage1(ds, small_arch(), other, small_stage1());
  EXPECT_FALSE(x.checkpoint.params.same_values(z.checkpoint.params));
}

TEST(Train, ZeroEpochsKeepsInitialization) {
  const auto ds = small_dataset(1, 3);
  const auto cfg = small_config(0);
  const auto r = run_stage1(ds, small_arch(), cfg, small_stage1());
  EXPECT_TRUE(r.checkpoint.params.same_values(init_model(small_arch(), derive_seed(cfg.seed, 0x1417))));
  EXPECT_TRUE(r.metrics.empty());
  EXPECT_EQ(r.initial_loss, r.final_loss);
}

TEST(Train, ResumeReproducesUninterruptedRun) {
  const auto ds = small_dataset(2, 5);
  const auto cfg = small_config(4);
  const auto full = run_stage1(ds, small_arch(), cfg, small_stage1());

  testutil::TempDir dir;
  RunOptions first;
  first.out_dir = dir.path();
  first.stop_after_epochs = 2;
  const auto half = run_stage1(ds, small_arch(), cfg, small_stage1(), first);
  EXPECT_EQ(half.checkpoint.epoch, 2);
  const Checkpoint saved = load_checkpoint(dir.path() / "checkpoint");
  RunOptions second;
  second.out_dir = dir.path();
  second.resume = &saved;
  const auto rest = run_stage1(ds, small_arch(), cfg, small_stage1(), second);
  EXPECT_TRUE(rest.checkpoint.params.same_values(full.checkpoint.params));
  EXPECT_EQ(rest.checkpoint.optimizer, full.checkpoint.optimizer);
  EXPECT_EQ(rest.checkpoint.step, full.checkpoint.step);

  // The appended metrics file holds the same rows as the uninterrupted run.
  const auto csv = read_csv(dir.path() / "metrics.csv");
  ASSERT_EQ(csv.rows.size(), full.metrics.size());
  for (std::size_t i = 0; i < csv.rows.size(); ++i) {
    EXPECT_EQ(csv.number(i, "L_distill"), full.metrics[i].losses[0]);
    EXPECT_EQ(csv.number(i, "step"), static_cast<double>(full.metrics[i].step));
  }
}

TEST(Train, MetricsCsvColumns) {
  const auto ds = small_dataset(3, 4);
  testutil::TempDir dir;
  RunOptions run;
  run.out_dir = dir.path();
  const auto r = run_stage1(ds, small_arch(), small_config(2), small_stage1(), run);
  const auto csv = read_csv(dir.path() / "metrics.csv");
  EXPECT_EQ(csv.header, (std::vector<std::string>{"epoch", "step", "lr", "L_distill", "grad_norm", "wall_ms"}));
  EXPECT_EQ(csv.rows.size(), 4u);
  for (std::size_t i = 0; i < csv.rows.size(); ++i) {
    EXPECT_EQ(csv.number(i, "step"), static_cast<double>(i));
    EXPECT_TRUE(std::isfinite(csv.number(i, "grad_norm")));
    EXPECT_GT(csv.number(i, "lr"), 0.0);
  }
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "weight_table" / "weight_table.json"));
  EXPECT_TRUE(load_checkpoint(dir.path() / "checkpoint").params.same_values(r.checkpoint.params));
}

TEST(Train, DivergenceKeepsLastGoodCheckpoint) {
  const auto ds = small_dataset(4, 4);
  auto cfg = small_config(6);
  cfg.base_lr = 1e200;
  testutil::TempDir dir;
  RunOptions run;
  run.out_dir = dir.path();
  EXPECT_THROW(run_stage1(ds, small_arch(), cfg, small_stage1(), run), DivergedRun);
  const Checkpoint good = load_checkpoint(dir.path() / "last_good");
  EXPECT_LT(good.epoch, cfg.epochs);
  for (const auto& [name, t] : good.params.tensors()) {
    for (double v : t.data()) ASSERT_TRUE(std::isfinite(v)) << name;
  }
}

TEST(Train, Stage2LeavesTeacherCheckpointUntouched) {
  const auto ds = small_dataset(5, 4);
  testutil::TempDir dir;
  RunOptions s1;
  s1.out_dir = dir.path() / "s1";
  run_stage1(ds, small_arch(), small_config(2), small_stage1(), s1);
  const auto before = directory_digest(s1.out_dir / "checkpoint");
  const Checkpoint teacher = load_checkpoint(s1.out_dir / "checkpoint");
  RunOptions s2;
  s2.out_dir = dir.path() / "s2";
  const auto r = run_stage2(ds, teacher, small_config(2), Stage2Options{}, s2);
  EXPECT_EQ(directory_digest(s1.out_dir / "checkpoint"), before);
  EXPECT_EQ(r.loss_names, (std::vector<std::string>{"L_ins", "L_token", "L_final"}));
  const auto csv = read_csv(s2.out_dir / "metrics.csv");
  for (std::size_t i = 0; i < csv.rows.size(); ++i) {
    EXPECT_NEAR(csv.number(i, "L_final"), csv.number(i, "L_ins") + csv.number(i, "L_token"), 1e-12);
  }
}

TEST(Train, Stage2RejectsKnnTokens) {
  const auto ds = small_dataset(6, 2, TokenMode::knn_baseline);
  Checkpoint teacher;
  teacher.params = init_model(small_arch(), 0);
  EXPECT_THROW(run_stage2(ds, teacher, small_config(1), Stage2Options{}), std::invalid_argument);
}

TEST(Train, PlaceableScenesSkipUnfitSeeds) {
  SceneSpec spec;
  spec.n_objects = 12;
  spec.imbalance_exponent = 2;
  spec.seed = 0;
  std::vector<std::uint64_t> used;
  const auto scenes = generate_placeable_scenes(spec, 30, &used);
  ASSERT_EQ(scenes.size(), 30u);
  for (std::size_t i = 0; i < used.size(); ++i) {
    SceneSpec s = spec;
    s.seed = used[i];
    EXPECT_EQ(generate_scene(s), scenes[i]);
    if (i > 0) {
      EXPECT_GT(used[i], used[i - 1]);
    }
  }
  spec.n_objects = 0;
  EXPECT_THROW(generate_placeable_scenes(spec, 1), InvalidSpec);
}
