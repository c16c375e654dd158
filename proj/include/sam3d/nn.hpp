#pragma once

// Model zoo: a mini-PointNet token embedder, a centroid positional embedding,
// pre-norm transformer encoder and decoder stacks with a shared learned mask
// query, plus the distillation projection and the instance predictor heads.
//
// Parameter names:
//   embed.{w1,b1,w2,b2}     pointwise 3 -> hidden -> L perceptron
//   pos.{w1,b1,w2,b2}       centroid 3 -> L -> L perceptron (w2, b2 start at 0)
//   enc.<i>.*, dec.<i>.*    transformer blocks
//   mask_query              [1, L]
//   proj.{w,b}              L -> L2
//   pred.{w1,b1,w2,b2}      L -> L -> L

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"
#include "tokenize.hpp"

namespace sam3d {

struct Arch {
  int embed_dim = 64;
  int n_heads = 4;
  int n_enc_layers = 3;
  int n_dec_layers = 1;
  int pointnet_hidden = 64;
  int max_points_per_token = 128;
  int mlp_hidden = 128;
  int proj_dim = 32;  // 2D feature dimension L2
  double point_scale = 8.0;  // multiplies member offsets and centroids before embedding

  bool operator==(const Arch&) const = default;

  void validate() const {
    if (embed_dim < 1 || n_heads < 1 || embed_dim % n_heads != 0) {
      throw std::invalid_argument("arch: embed_dim must be a positive multiple of n_heads");
    }
    if (n_enc_layers < 0 || n_dec_layers < 0 || pointnet_hidden < 1 || max_points_per_token < 1 ||
        mlp_hidden < 1 || proj_dim < 1 || !(point_scale > 0)) {
      throw std::invalid_argument("arch: invalid layer sizes");
    }
  }
};

class ModelParams {
 public:
  Arch arch;

  Tensor& at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("no parameter '" + name + "'");
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("no parameter '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  void add(const std::string& name, Tensor t, bool frozen = false) {
    t.set_requires_grad(!frozen);
    tensors_[name] = std::move(t);
    frozen_[name] = frozen;
  }

  bool frozen(const std::string& name) const { return frozen_.at(name); }
  void set_frozen(const std::string& name, bool on) {
    frozen_.at(name) = on;
    at(name).set_requires_grad(!on);
  }
  void freeze_all() {
    for (auto& [name, t] : tensors_) set_frozen(name, true);
  }

  const std::map<std::string, Tensor>& tensors() const { return tensors_; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [name, t] : tensors_) out.push_back(name);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : tensors_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : tensors_) t.zero_grad();
  }

  // Deep copy: fresh leaves with the same values and flags.
  ModelParams clone() const {
    ModelParams out;
    out.arch = arch;
    for (const auto& [name, t] : tensors_) out.add(name, t.detach(), frozen_.at(name));
    return out;
  }

  // Bitwise value equality (also compares names, shapes and freeze flags).
  bool same_values(const ModelParams& o) const {
    if (!(arch == o.arch) || tensors_.size() != o.tensors_.size()) return false;
    for (const auto& [name, t] : tensors_) {
      auto it = o.tensors_.find(name);
      if (it == o.tensors_.end() || it->second.shape() != t.shape()) return false;
      if (frozen_.at(name) != o.frozen_.at(name)) return false;
      if (!std::equal(t.data().begin(), t.data().end(), it->second.data().begin(),
                      [](double a, double b) { return std::bit_cast<std::uint64_t>(a) ==
                                                      std::bit_cast<std::uint64_t>(b); })) {
        return false;
      }
    }
    return true;
  }

 private:
  std::map<std::string, Tensor> tensors_;
  std::map<std::string, bool> frozen_;
};

namespace detail {

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// Xavier-uniform weights, seeded per parameter name so that adding modules
// never changes the initialization of existing ones.
inline Tensor xavier(std::size_t fan_in, std::size_t fan_out, std::uint64_t seed,
                     const std::string& name) {
  Rng rng(derive_seed(seed, fnv1a(name)));
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(fan_in * fan_out);
  for (double& x : v) x = rng.uniform(-a, a);
  return Tensor({fan_in, fan_out}, std::move(v));
}

inline void add_linear(ModelParams& p, const std::string& w, const std::string& b, std::size_t in,
                       std::size_t out, std::uint64_t seed, bool zero = false) {
  p.add(w, zero ? Tensor::zeros({in, out}) : xavier(in, out, seed, w));
  p.add(b, Tensor::zeros({out}));
}

inline void add_block(ModelParams& p, const std::string& prefix, const Arch& a, std::uint64_t seed) {
  const std::size_t L = a.embed_dim, H = a.mlp_hidden;
  p.add(prefix + ".ln1.g", Tensor({L}, std::vector<double>(L, 1.0)));
  p.add(prefix + ".ln1.b", Tensor::zeros({L}));
  for (const char* m : {"q", "k", "v", "o"}) {
    add_linear(p, prefix + ".attn.w" + m, prefix + ".attn.b" + m, L, L, seed);
  }
  p.add(prefix + ".ln2.g", Tensor({L}, std::vector<double>(L, 1.0)));
  p.add(prefix + ".ln2.b", Tensor::zeros({L}));
  add_linear(p, prefix + ".mlp.w1", prefix + ".mlp.b1", L, H, seed);
  add_linear(p, prefix + ".mlp.w2", prefix + ".mlp.b2", H, L, seed);
}

}  // namespace detail

inline ModelParams init_model(const Arch& arch, std::uint64_t seed) {
  arch.validate();
  ModelParams p;
  p.arch = arch;
  const std::size_t L = arch.embed_dim;
  detail::add_linear(p, "embed.w1", "embed.b1", 3, arch.pointnet_hidden, seed);
  detail::add_linear(p, "embed.w2", "embed.b2", arch.pointnet_hidden, L, seed);
  detail::add_linear(p, "pos.w1", "pos.b1", 3, L, seed);
  detail::add_linear(p, "pos.w2", "pos.b2", L, L, seed, /*zero=*/true);
  for (int i = 0; i < arch.n_enc_layers; ++i) detail::add_block(p, "enc." + std::to_string(i), arch, seed);
  for (int i = 0; i < arch.n_dec_layers; ++i) detail::add_block(p, "dec." + std::to_string(i), arch, seed);
  {
    Rng rng(derive_seed(seed, detail::fnv1a("mask_query")));
    std::vector<double> v(L);
    for (double& x : v) x = rng.normal(0, 0.02);
    p.add("mask_query", Tensor({1, L}, std::move(v)));
  }
  detail::add_linear(p, "proj.w", "proj.b", L, arch.proj_dim, seed);
  detail::add_linear(p, "pred.w1", "pred.b1", L, L, seed);
  detail::add_linear(p, "pred.w2", "pred.b2", L, L, seed);
  return p;
}

// ---------------------------------------------------------------------------
// Token embedding

// Constant inputs of the embedder for a subset of tokens: centered member
// coordinates stacked token after token, row offsets per token, and centroids.
struct TokenInputs {
  Tensor centered;                   // P x 3
  std::vector<std::size_t> offsets;  // size M + 1
  Tensor centroids;                  // M x 3, scaled like the offsets

  std::size_t count() const { return offsets.size() - 1; }
};

// Members beyond `max_points` are thinned by stride sampling over the sorted
// member indices.
inline std::vector<std::size_t> subsample_members(std::vector<std::size_t> members,
                                                  std::size_t max_points) {
  std::sort(members.begin(), members.end());
  if (members.size() <= max_points) return members;
  std::vector<std::size_t> out(max_points);
  for (std::size_t i = 0; i < max_points; ++i) out[i] = members[i * members.size() / max_points];
  return out;
}

template <typename T>
TokenInputs prepare_tokens(std::span<const T> xyz, const TokenSet& tokens,
                           const std::vector<std::size_t>& which, std::size_t max_points,
                           double point_scale = 1.0) {
  TokenInputs in;
  std::vector<double> pts, cents;
  in.offsets.push_back(0);
  for (std::size_t t : which) {
    const Token& tok = tokens.tokens.at(t);
    if (tok.point_indices.empty()) throw std::invalid_argument("embed_tokens: empty token");
    for (std::size_t i : subsample_members(tok.point_indices, max_points)) {
      for (int d = 0; d < 3; ++d) pts.push_back(point_scale * (static_cast<double>(xyz[3 * i + d]) - tok.centroid[d]));
    }
    in.offsets.push_back(pts.size() / 3);
    for (int d = 0; d < 3; ++d) cents.push_back(point_scale * tok.centroid[d]);
  }
  const std::size_t n = pts.size() / 3;
  in.centered = Tensor({n, 3}, std::move(pts));
  in.centroids = Tensor({which.size(), 3}, std::move(cents));
  return in;
}

inline std::vector<std::size_t> all_tokens(const TokenSet& tokens) {
  std::vector<std::size_t> v(tokens.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = i;
  return v;
}

inline TokenInputs prepare_tokens(const SceneBundle& b, const TokenSet& tokens,
                                  const std::vector<std::size_t>& which, const Arch& arch) {
  return prepare_tokens(std::span<const float>(b.points), tokens, which,
                        static_cast<std::size_t>(arch.max_points_per_token), arch.point_scale);
}

inline Tensor linear(const Tensor& x, const ModelParams& p, const std::string& w, const std::string& b) {
  return add(matmul(x, p.at(w)), p.at(b));
}

// Shared pointwise perceptron on centered points, max-pooled per token: M x L.
inline Tensor embed_points(const TokenInputs& in, const ModelParams& p) {
  const Tensor h = gelu(linear(in.centered, p, "embed.w1", "embed.b1"));
  return segment_max_pool(linear(h, p, "embed.w2", "embed.b2"), in.offsets);
}

inline Tensor embed_tokens(const SceneBundle& b, const TokenSet& tokens, const ModelParams& p) {
  return embed_points(prepare_tokens(b, tokens, all_tokens(tokens), p.arch), p);
}

inline Tensor pos_embed(const Tensor& centroids, const ModelParams& p) {
  return linear(gelu(linear(centroids, p, "pos.w1", "pos.b1")), p, "pos.w2", "pos.b2");
}

// ---------------------------------------------------------------------------
// Transformer

inline Tensor attention(const Tensor& x, const ModelParams& p, const std::string& prefix) {
  const std::size_t L = x.cols();
  const std::size_t heads = static_cast<std::size_t>(p.arch.n_heads);
  const std::size_t d = L / heads;
  const Tensor q = linear(x, p, prefix + ".wq", prefix + ".bq");
  const Tensor k = linear(x, p, prefix + ".wk", prefix + ".bk");
  const Tensor v = linear(x, p, prefix + ".wv", prefix + ".bv");
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = slice(q, 1, h * d, (h + 1) * d);
    const Tensor kh = slice(k, 1, h * d, (h + 1) * d);
    const Tensor vh = slice(v, 1, h * d, (h + 1) * d);
    const Tensor weights = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt_d), 1);
    outs.push_back(matmul(weights, vh));
  }
  return linear(heads == 1 ? outs[0] : concat(outs, 1), p, prefix + ".wo", prefix + ".bo");
}

inline Tensor transformer_block(const Tensor& x, const ModelParams& p, const std::string& prefix) {
  const Tensor a = attention(layer_norm(x, p.at(prefix + ".ln1.g"), p.at(prefix + ".ln1.b")), p,
                             prefix + ".attn");
  const Tensor h = add(x, a);
  const Tensor n2 = layer_norm(h, p.at(prefix + ".ln2.g"), p.at(prefix + ".ln2.b"));
  const Tensor m = linear(gelu(linear(n2, p, prefix + ".mlp.w1", prefix + ".mlp.b1")), p,
                          prefix + ".mlp.w2", prefix + ".mlp.b2");
  return add(h, m);
}

inline Tensor encode(const Tensor& features, const ModelParams& p) {
  if (features.rows() < 1) throw std::invalid_argument("encode: no tokens");
  Tensor x = features;
  for (int i = 0; i < p.arch.n_enc_layers; ++i) x = transformer_block(x, p, "enc." + std::to_string(i));
  return x;
}

struct MaskPlan {
  std::vector<std::size_t> visible;
  std::vector<std::size_t> masked;
  double ratio = 0.0;

  std::size_t size() const { return visible.size() + masked.size(); }
};

// Runs the decoder over all positions in token order. Visible positions carry
// their encoder output (rows of `encoded`, in plan.visible order); masked
// positions carry mask_query + positional embedding.
inline Tensor decode(const Tensor& encoded, const Tensor& positional, const MaskPlan& plan,
                     const ModelParams& p) {
  const std::size_t M = plan.size();
  if (encoded.rows() != plan.visible.size()) {
    throw std::invalid_argument("decode: encoder rows do not match visible tokens");
  }
  Tensor x;
  if (plan.masked.empty()) {
    x = encoded;
  } else {
    const Tensor queries = add(gather_rows(positional, plan.masked), p.at("mask_query"));
    const Tensor stacked = plan.visible.empty() ? queries : concat({encoded, queries}, 0);
    std::vector<std::size_t> order(M);
    for (std::size_t i = 0; i < plan.visible.size(); ++i) order[plan.visible[i]] = i;
    for (std::size_t i = 0; i < plan.masked.size(); ++i) order[plan.masked[i]] = plan.visible.size() + i;
    x = gather_rows(stacked, order);
  }
  for (int i = 0; i < p.arch.n_dec_layers; ++i) x = transformer_block(x, p, "dec." + std::to_string(i));
  return x;
}

// Embedding + positional embedding + encoder over the given tokens.
inline Tensor encode_tokens(const TokenInputs& in, const ModelParams& p) {
  return encode(add(embed_points(in, p), pos_embed(in.centroids, p)), p);
}

inline Tensor project_3d(const Tensor& h, const ModelParams& p) { return linear(h, p, "proj.w", "proj.b"); }

inline Tensor predict_instance(const Tensor& pooled, const ModelParams& p) {
  return linear(gelu(linear(pooled, p, "pred.w1", "pred.b1")), p, "pred.w2", "pred.b2");
}

// ---------------------------------------------------------------------------
// Masking

inline std::size_t masked_count(std::size_t m, double ratio) {
  return static_cast<std::size_t>(std::llround(ratio * static_cast<double>(m)));
}

// Uniform sample without replacement via Fisher-Yates driven by a counter
// keyed on (seed, scene_id, epoch). Both index lists come back sorted.
inline MaskPlan make_mask_plan(std::size_t m, double ratio, std::uint64_t seed, std::uint64_t scene_id,
                               std::uint64_t epoch) {
  if (m < 1) throw std::invalid_argument("make_mask_plan: M must be >= 1");
  if (!(ratio >= 0 && ratio < 1)) throw std::invalid_argument("make_mask_plan: ratio must be in [0, 1)");
  const std::uint64_t key = derive_seed(seed, scene_id, epoch);
  std::vector<std::size_t> idx(m);
  for (std::size_t i = 0; i < m; ++i) idx[i] = i;
  std::uint64_t counter = 0;
  for (std::size_t i = m; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(mix64(key + counter++) % i);
    std::swap(idx[i - 1], idx[j]);
  }
  MaskPlan plan;
  plan.ratio = ratio;
  const std::size_t n_mask = masked_count(m, ratio);
  plan.masked.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_mask));
  plan.visible.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_mask), idx.end());
  std::sort(plan.masked.begin(), plan.masked.end());
  std::sort(plan.visible.begin(), plan.visible.end());
  return plan;
}

inline MaskPlan all_visible(std::size_t m) {
  MaskPlan plan;
  plan.visible.resize(m);
  for (std::size_t i = 0; i < m; ++i) plan.visible[i] = i;
  return plan;
}

}  // namespace sam3d
