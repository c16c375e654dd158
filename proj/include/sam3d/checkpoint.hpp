#pragma once

// Checkpoint directory: manifest.json (arch, parameter names, shapes, freeze
// flags, training progress) plus one little-endian f64 blob per parameter and
// per optimizer moment. Round trips are bit-exact.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <json.hpp>

#include "blob_io.hpp"
#include "nn.hpp"
#include "optim.hpp"

namespace sam3d {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelParams params;
  AdamState optimizer;
  std::int64_t step = 0;
  int epoch = 0;
  nlohmann::json meta = nlohmann::json::object();
};

inline nlohmann::json arch_to_json(const Arch& a) {
  return {{"embed_dim", a.embed_dim},           {"n_heads", a.n_heads},
          {"n_enc_layers", a.n_enc_layers},     {"n_dec_layers", a.n_dec_layers},
          {"pointnet_hidden", a.pointnet_hidden}, {"max_points_per_token", a.max_points_per_token},
          {"mlp_hidden", a.mlp_hidden},         {"proj_dim", a.proj_dim},
          {"point_scale", a.point_scale}};
}

inline Arch arch_from_json(const nlohmann::json& j, const std::filesystem::path& where) {
  Arch a;
  a.embed_dim = json_field<int>(j, "embed_dim", where);
  a.n_heads = json_field<int>(j, "n_heads", where);
  a.n_enc_layers = json_field<int>(j, "n_enc_layers", where);
  a.n_dec_layers = json_field<int>(j, "n_dec_layers", where);
  a.pointnet_hidden = json_field<int>(j, "pointnet_hidden", where);
  a.max_points_per_token = json_field<int>(j, "max_points_per_token", where);
  a.mlp_hidden = json_field<int>(j, "mlp_hidden", where);
  a.proj_dim = json_field<int>(j, "proj_dim", where);
  a.point_scale = json_field<double>(j, "point_scale", where);
  return a;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json m;
  m["format"] = "sam3d-checkpoint";
  m["version"] = kCheckpointVersion;
  m["arch"] = arch_to_json(ck.params.arch);
  m["step"] = ck.step;
  m["epoch"] = ck.epoch;
  m["meta"] = ck.meta;
  m["params"] = nlohmann::json::array();
  for (const auto& [name, t] : ck.params.tensors()) {
    const std::string file = name + ".f64";
    write_blob(dir / file, t.data());
    m["params"].push_back({{"name", name}, {"shape", t.shape()}, {"frozen", ck.params.frozen(name)}, {"file", file}});
  }
  m["optimizer"] = nlohmann::json::array();
  for (const auto& [name, s] : ck.optimizer) {
    const std::string mf = name + ".m.f64", vf = name + ".v.f64";
    write_blob(dir / mf, s.m);
    write_blob(dir / vf, s.v);
    m["optimizer"].push_back({{"name", name}, {"t", s.t}, {"size", s.m.size()}, {"m_file", mf}, {"v_file", vf}});
  }
  write_json_file(dir / "manifest.json", m);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto mpath = dir / "manifest.json";
  const nlohmann::json m = read_json_file(mpath);
  if (!m.is_object() || m.value("format", std::string{}) != "sam3d-checkpoint") {
    throw FormatError(FormatErrorKind::malformed_header, mpath.string() + ": not a checkpoint manifest");
  }
  if (json_field<int>(m, "version", mpath) != kCheckpointVersion) {
    throw FormatError(FormatErrorKind::malformed_header, mpath.string() + ": unsupported version");
  }
  Checkpoint ck;
  ck.params.arch = arch_from_json(json_field<nlohmann::json>(m, "arch", mpath), mpath);
  ck.step = json_field<std::int64_t>(m, "step", mpath);
  ck.epoch = json_field<int>(m, "epoch", mpath);
  ck.meta = m.value("meta", nlohmann::json::object());
  for (const auto& p : json_field<nlohmann::json>(m, "params", mpath)) {
    const auto name = json_field<std::string>(p, "name", mpath);
    const auto shape = json_field<Shape>(p, "shape", mpath);
    auto values = read_blob<double>(dir / json_field<std::string>(p, "file", mpath), shape_size(shape));
    ck.params.add(name, Tensor(shape, std::move(values)), json_field<bool>(p, "frozen", mpath));
  }
  for (const auto& o : json_field<nlohmann::json>(m, "optimizer", mpath)) {
    const auto name = json_field<std::string>(o, "name", mpath);
    const auto size = json_field<std::size_t>(o, "size", mpath);
    if (!ck.params.contains(name) || ck.params.at(name).size() != size) {
      throw FormatError(FormatErrorKind::dimension_inconsistency,
                        mpath.string() + ": optimizer state for '" + name + "' does not match parameter");
    }
    Moments s;
    s.t = json_field<std::int64_t>(o, "t", mpath);
    s.m = read_blob<double>(dir / json_field<std::string>(o, "m_file", mpath), size);
    s.v = read_blob<double>(dir / json_field<std::string>(o, "v_file", mpath), size);
    ck.optimizer[name] = std::move(s);
  }
  return ck;
}

// FNV-1a over (file name, contents) of every regular file, in name order.
inline std::uint64_t directory_digest(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto feed = [&h](unsigned char c) {
    h ^= c;
    h *= 0x100000001b3ull;
  };
  for (const auto& f : files) {
    for (char c : f.filename().string()) feed(static_cast<unsigned char>(c));
    std::ifstream in(f, std::ios::binary);
    for (std::istreambuf_iterator<char> it(in), end; it != end; ++it) feed(static_cast<unsigned char>(*it));
  }
  return h;
}

}  // namespace sam3d
