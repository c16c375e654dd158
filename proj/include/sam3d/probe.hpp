#pragma once

// Linear probe: a softmax classifier trained on frozen, standardized token
// features to predict each token's object type. Train and test tokens come
// from disjoint scenes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "train.hpp"

namespace sam3d {

enum class EncoderTag { scratch, stage1, stage2 };

inline const char* to_string(EncoderTag t) {
  switch (t) {
    case EncoderTag::scratch: return "scratch";
    case EncoderTag::stage1: return "stage1";
    case EncoderTag::stage2: return "stage2";
  }
  return "?";
}

inline EncoderTag parse_encoder_tag(const std::string& s) {
  if (s == "scratch") return EncoderTag::scratch;
  if (s == "stage1") return EncoderTag::stage1;
  if (s == "stage2") return EncoderTag::stage2;
  throw std::invalid_argument("unknown encoder tag '" + s + "'");
}

class BadSplit : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Row-major features with one integer label per row.
struct LabeledFeatures {
  std::vector<double> x;
  std::size_t dim = 0;
  std::vector<std::int32_t> y;

  std::size_t rows() const { return y.size(); }
};

struct ClassAccuracy {
  std::int32_t label = 0;
  std::size_t n = 0;
  double accuracy = 0;
};

struct ProbeResult {
  double accuracy = 0;
  std::vector<ClassAccuracy> per_class;  // classes present in the test split
  std::size_t n_tokens = 0;
  EncoderTag encoder_tag = EncoderTag::scratch;
};

struct ProbeConfig {
  int epochs = 300;
  double lr = 0.5;
  double l2 = 1e-4;
};

// Object type of each token: the type of its majority ground-truth region.
inline std::vector<std::int32_t> token_type_labels(const SceneBundle& b, const TokenSet& tokens) {
  std::vector<std::int32_t> out;
  for (const Token& tok : tokens.tokens) {
    const std::int32_t region = majority_label(tok, b.gt_region).first;
    out.push_back(b.region_type.at(static_cast<std::size_t>(region)));
  }
  return out;
}

inline LabeledFeatures probe_features(const Dataset& ds, const ModelParams& encoder) {
  NoGradGuard guard;
  LabeledFeatures f;
  for (const auto& s : ds.scenes) {
    const Tensor h = encode_tokens(s.inputs, encoder);
    f.dim = h.cols();
    f.x.insert(f.x.end(), h.data().begin(), h.data().end());
    const auto y = token_type_labels(s.bundle, s.tokens);
    f.y.insert(f.y.end(), y.begin(), y.end());
  }
  return f;
}

struct LinearProbe {
  std::vector<std::int32_t> classes;  // sorted labels seen in training
  std::vector<double> mean, inv_std;  // per feature
  std::vector<double> w;              // classes x dim
  std::vector<double> b;              // classes

  std::size_t dim() const { return mean.size(); }

  std::int32_t predict(std::span<const double> row) const {
    const std::size_t c = classes.size(), d = dim();
    std::size_t best = 0;
    double best_score = -INFINITY;
    for (std::size_t k = 0; k < c; ++k) {
      double s = b[k];
      for (std::size_t j = 0; j < d; ++j) s += w[k * d + j] * (row[j] - mean[j]) * inv_std[j];
      if (s > best_score) {
        best_score = s;
        best = k;
      }
    }
    return classes[best];
  }
};

// Full-batch gradient descent on the mean cross-entropy plus an L2 penalty,
// starting from zero weights.
inline LinearProbe fit_linear_probe(const LabeledFeatures& train, const ProbeConfig& cfg = {}) {
  const std::size_t n = train.rows(), d = train.dim;
  if (n == 0 || d == 0 || train.x.size() != n * d) throw std::invalid_argument("probe: empty or ragged training set");
  LinearProbe p;
  p.classes = train.y;
  std::sort(p.classes.begin(), p.classes.end());
  p.classes.erase(std::unique(p.classes.begin(), p.classes.end()), p.classes.end());
  std::map<std::int32_t, std::size_t> index;
  for (std::size_t k = 0; k < p.classes.size(); ++k) index[p.classes[k]] = k;

  p.mean.assign(d, 0.0);
  p.inv_std.assign(d, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) p.mean[j] += train.x[i * d + j];
  }
  for (double& m : p.mean) m /= static_cast<double>(n);
  std::vector<double> var(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      const double c = train.x[i * d + j] - p.mean[j];
      var[j] += c * c;
    }
  }
  for (std::size_t j = 0; j < d; ++j) {
    const double sd = std::sqrt(var[j] / static_cast<double>(n));
    p.inv_std[j] = sd > 1e-12 ? 1.0 / sd : 1.0;
  }
  std::vector<double> z(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) z[i * d + j] = (train.x[i * d + j] - p.mean[j]) * p.inv_std[j];
  }

  const std::size_t c = p.classes.size();
  p.w.assign(c * d, 0.0);
  p.b.assign(c, 0.0);
  std::vector<double> gw(c * d), gb(c), prob(c);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double* row = &z[i * d];
      double mx = -INFINITY;
      for (std::size_t k = 0; k < c; ++k) {
        double s = p.b[k];
        for (std::size_t j = 0; j < d; ++j) s += p.w[k * d + j] * row[j];
        prob[k] = s;
        mx = std::max(mx, s);
      }
      double total = 0;
      for (double& v : prob) total += (v = std::exp(v - mx));
      const std::size_t yi = index.at(train.y[i]);
      for (std::size_t k = 0; k < c; ++k) {
        const double g = prob[k] / total - (k == yi ? 1.0 : 0.0);
        gb[k] += g;
        for (std::size_t j = 0; j < d; ++j) gw[k * d + j] += g * row[j];
      }
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t k = 0; k < c; ++k) {
      p.b[k] -= cfg.lr * gb[k] * inv_n;
      for (std::size_t j = 0; j < d; ++j) {
        double& wk = p.w[k * d + j];
        wk -= cfg.lr * (gw[k * d + j] * inv_n + cfg.l2 * wk);
      }
    }
  }
  return p;
}

inline ProbeResult evaluate_probe(const LinearProbe& p, const LabeledFeatures& test, EncoderTag tag) {
  if (test.rows() == 0) throw std::invalid_argument("probe: empty test split");
  if (test.dim != p.dim()) throw std::invalid_argument("probe: feature width differs from training");
  std::map<std::int32_t, std::pair<std::size_t, std::size_t>> tally;  // label -> (correct, n)
  for (std::int32_t y : test.y) {
    if (!std::binary_search(p.classes.begin(), p.classes.end(), y)) {
      throw BadSplit("probe: class " + std::to_string(y) + " appears in the test split but not in training");
    }
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.rows(); ++i) {
    const bool ok = p.predict(std::span<const double>(test.x).subspan(i * test.dim, test.dim)) == test.y[i];
    correct += ok;
    auto& t = tally[test.y[i]];
    t.first += ok;
    ++t.second;
  }
  ProbeResult r;
  r.encoder_tag = tag;
  r.n_tokens = test.rows();
  r.accuracy = static_cast<double>(correct) / static_cast<double>(test.rows());
  for (const auto& [label, t] : tally) {
    r.per_class.push_back({label, t.second, static_cast<double>(t.first) / static_cast<double>(t.second)});
  }
  return r;
}

// One row per test class plus a final "all" row holding the overall accuracy.
inline void write_probe_csv(const std::filesystem::path& path, const ProbeResult& r) {
  std::ofstream f(path);
  if (!f) throw FormatError(FormatErrorKind::io, "cannot write " + path.string());
  f << "encoder_tag,label,n,accuracy\n";
  for (const auto& c : r.per_class) {
    f << to_string(r.encoder_tag) << ',' << c.label << ',' << c.n << ',' << fmt_double(c.accuracy) << '\n';
  }
  f << to_string(r.encoder_tag) << ",all," << r.n_tokens << ',' << fmt_double(r.accuracy) << '\n';
}

inline ProbeResult linear_probe(const ModelParams& encoder, const Dataset& train, const Dataset& test, EncoderTag tag,
                                const ProbeConfig& cfg = {}) {
  const auto p = fit_linear_probe(probe_features(train, encoder), cfg);
  return evaluate_probe(p, probe_features(test, encoder), tag);
}

}  // namespace sam3d
