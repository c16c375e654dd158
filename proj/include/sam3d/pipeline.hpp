#pragma once

// Pipeline configuration: one JSON file drives every CLI subcommand. Sections
// are optional and partial; absent keys keep their defaults. The "stage1" and
// "stage2" sections may repeat any "train" key to override it for that stage.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "checkpoint.hpp"
#include "probe.hpp"
#include "train.hpp"

namespace sam3d {

struct SceneSetConfig {
  SceneSpec spec;
  std::size_t n_scenes = 16;
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  SceneSetConfig scenes;
  TokenizerConfig tokenizer;
  Arch arch;
  TrainConfig train;
  nlohmann::json stage1_train = nlohmann::json::object();  // per-stage TrainConfig overrides
  nlohmann::json stage2_train = nlohmann::json::object();
  Stage1Options stage1;
  Stage2Options stage2;
  ProbeConfig probe;

  TrainConfig stage_train(int stage) const {
    TrainConfig c = train;
    from_json(stage == 1 ? stage1_train : stage2_train, c);
    c.seed = seed;
    return c;
  }
};

inline const char* to_string(Layout l) { return l == Layout::scattered ? "scattered" : "adjacent_row"; }

inline Layout parse_layout(const std::string& s) {
  if (s == "scattered") return Layout::scattered;
  if (s == "adjacent_row") return Layout::adjacent_row;
  throw std::invalid_argument("unknown layout '" + s + "' (expected scattered or adjacent_row)");
}

inline nlohmann::json scene_spec_to_json(const SceneSpec& s) {
  return {{"n_objects", s.n_objects},
          {"points_min", s.points_min},
          {"points_max", s.points_max},
          {"feature_dim", s.feature_dim},
          {"n_types", s.n_types},
          {"imbalance_exponent", s.imbalance_exponent},
          {"noise_sigma", s.noise_sigma},
          {"size_jitter", s.size_jitter},
          {"seed", s.seed},
          {"palette_seed", s.palette_seed},
          {"layout", to_string(s.layout)},
          {"adjacent_gap", s.adjacent_gap},
          {"height_bands", s.height_bands},
          {"camera", camera_to_json(s.intrinsics)}};
}

inline void scene_spec_from_json(const nlohmann::json& j, SceneSpec& s, const std::filesystem::path& where) {
  s.n_objects = j.value("n_objects", s.n_objects);
  s.points_min = j.value("points_min", s.points_min);
  s.points_max = j.value("points_max", s.points_max);
  s.feature_dim = j.value("feature_dim", s.feature_dim);
  s.n_types = j.value("n_types", s.n_types);
  s.imbalance_exponent = j.value("imbalance_exponent", s.imbalance_exponent);
  s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
  s.size_jitter = j.value("size_jitter", s.size_jitter);
  s.seed = j.value("seed", s.seed);
  s.palette_seed = j.value("palette_seed", s.palette_seed);
  if (j.contains("layout")) s.layout = parse_layout(j.at("layout").get<std::string>());
  s.adjacent_gap = j.value("adjacent_gap", s.adjacent_gap);
  s.height_bands = j.value("height_bands", s.height_bands);
  if (j.contains("camera")) s.intrinsics = camera_from_json(j.at("camera"), where);
}

inline nlohmann::json tokenizer_to_json(const TokenizerConfig& t) {
  return {{"mode", to_string(t.mode)}, {"min_points", t.min_points}, {"knn_n", t.knn_n}, {"knn_k", t.knn_k}};
}

inline void tokenizer_from_json(const nlohmann::json& j, TokenizerConfig& t) {
  if (j.contains("mode")) t.mode = parse_token_mode(j.at("mode").get<std::string>());
  t.min_points = j.value("min_points", t.min_points);
  t.knn_n = j.value("knn_n", t.knn_n);
  t.knn_k = j.value("knn_k", t.knn_k);
}

inline void arch_merge_json(const nlohmann::json& j, Arch& a) {
  a.embed_dim = j.value("embed_dim", a.embed_dim);
  a.n_heads = j.value("n_heads", a.n_heads);
  a.n_enc_layers = j.value("n_enc_layers", a.n_enc_layers);
  a.n_dec_layers = j.value("n_dec_layers", a.n_dec_layers);
  a.pointnet_hidden = j.value("pointnet_hidden", a.pointnet_hidden);
  a.max_points_per_token = j.value("max_points_per_token", a.max_points_per_token);
  a.mlp_hidden = j.value("mlp_hidden", a.mlp_hidden);
  a.proj_dim = j.value("proj_dim", a.proj_dim);
  a.point_scale = j.value("point_scale", a.point_scale);
}

inline nlohmann::json to_json(const PipelineConfig& c) {
  nlohmann::json scenes = scene_spec_to_json(c.scenes.spec);
  scenes["n_scenes"] = c.scenes.n_scenes;
  nlohmann::json s1 = c.stage1_train;
  s1["k_groups"] = c.stage1.k_groups;
  s1["scale_mode"] = to_string(c.stage1.scale_mode);
  s1["reweight"] = c.stage1.reweight;
  s1["kmeans_n_init"] = c.stage1.kmeans_n_init;
  nlohmann::json s2 = c.stage2_train;
  s2["mask_ratio"] = c.stage2.mask_ratio;
  s2["init_from_teacher"] = c.stage2.init_from_teacher;
  s2["normalize_targets"] = c.stage2.normalize_targets;
  return {{"seed", c.seed},
          {"scenes", scenes},
          {"tokenizer", tokenizer_to_json(c.tokenizer)},
          {"arch", arch_to_json(c.arch)},
          {"train", c.train},
          {"stage1", s1},
          {"stage2", s2},
          {"probe", {{"epochs", c.probe.epochs}, {"lr", c.probe.lr}, {"l2", c.probe.l2}}}};
}

namespace detail {

inline nlohmann::json train_keys(const nlohmann::json& j) {
  static const char* keys[] = {"base_lr", "weight_decay", "batch_size", "epochs",
                               "warmup_epochs", "min_lr_ratio", "betas", "eps"};
  nlohmann::json out = nlohmann::json::object();
  for (const char* k : keys) {
    if (j.contains(k)) out[k] = j.at(k);
  }
  return out;
}

}  // namespace detail

// Merges `j` into `c`.
inline void merge_pipeline_json(const nlohmann::json& j, PipelineConfig& c, const std::filesystem::path& where) {
  if (!j.is_object()) throw FormatError(FormatErrorKind::malformed_header, where.string() + ": config must be an object");
  try {
    c.seed = j.value("seed", c.seed);
    if (j.contains("scenes")) {
      scene_spec_from_json(j.at("scenes"), c.scenes.spec, where);
      c.scenes.n_scenes = j.at("scenes").value("n_scenes", c.scenes.n_scenes);
    }
    if (j.contains("tokenizer")) tokenizer_from_json(j.at("tokenizer"), c.tokenizer);
    if (j.contains("arch")) arch_merge_json(j.at("arch"), c.arch);
    if (j.contains("train")) from_json(j.at("train"), c.train);
    if (j.contains("stage1")) {
      const auto& s = j.at("stage1");
      c.stage1_train.update(detail::train_keys(s));
      c.stage1.k_groups = s.value("k_groups", c.stage1.k_groups);
      if (s.contains("scale_mode")) c.stage1.scale_mode = parse_scale_mode(s.at("scale_mode").get<std::string>());
      c.stage1.reweight = s.value("reweight", c.stage1.reweight);
      c.stage1.kmeans_n_init = s.value("kmeans_n_init", c.stage1.kmeans_n_init);
    }
    if (j.contains("stage2")) {
      const auto& s = j.at("stage2");
      c.stage2_train.update(detail::train_keys(s));
      c.stage2.mask_ratio = s.value("mask_ratio", c.stage2.mask_ratio);
      c.stage2.init_from_teacher = s.value("init_from_teacher", c.stage2.init_from_teacher);
      c.stage2.normalize_targets = s.value("normalize_targets", c.stage2.normalize_targets);
    }
    if (j.contains("probe")) {
      const auto& p = j.at("probe");
      c.probe.epochs = p.value("epochs", c.probe.epochs);
      c.probe.lr = p.value("lr", c.probe.lr);
      c.probe.l2 = p.value("l2", c.probe.l2);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrorKind::malformed_header, where.string() + ": " + e.what());
  }
}

inline PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
  PipelineConfig c;
  merge_pipeline_json(read_json_file(path), c, path);
  return c;
}

// ---------------------------------------------------------------------------
// Scene sets on disk: scenes.json plus one bundle directory per scene.

struct SceneSet {
  SceneSpec spec;
  std::vector<std::uint64_t> seeds;
  std::vector<SceneBundle> bundles;
};

inline std::string scene_dir_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%04zu", i);
  return buf;
}

inline void write_scene_set(const SceneSet& s, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < s.bundles.size(); ++i) write_bundle(s.bundles[i], dir / scene_dir_name(i));
  write_json_file(dir / "scenes.json", {{"spec", scene_spec_to_json(s.spec)}, {"seeds", s.seeds}});
}

inline SceneSet read_scene_set(const std::filesystem::path& dir) {
  const auto path = dir / "scenes.json";
  const auto j = read_json_file(path);
  SceneSet s;
  scene_spec_from_json(json_field<nlohmann::json>(j, "spec", path), s.spec, path);
  s.seeds = json_field<std::vector<std::uint64_t>>(j, "seeds", path);
  for (std::size_t i = 0; i < s.seeds.size(); ++i) s.bundles.push_back(read_bundle(dir / scene_dir_name(i)));
  return s;
}

// Scene ids (and so mask plans) follow the generating seeds.
inline Dataset scene_set_dataset(const SceneSet& s, const TokenizerConfig& tok, const Arch& arch) {
  Dataset ds = make_dataset(s.bundles, tok, arch);
  std::size_t j = 0;
  for (std::size_t i = 0; i < s.bundles.size() && j < ds.scenes.size(); ++i) {
    if (ds.scenes[j].scene_id == i) ds.scenes[j++].scene_id = s.seeds[i];
  }
  return ds;
}

}  // namespace sam3d
