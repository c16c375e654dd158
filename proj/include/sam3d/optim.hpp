#pragma once

// AdamW with decoupled weight decay and the linear-warmup + cosine learning
// rate schedule shared by both pretraining stages.

#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "nn.hpp"

namespace sam3d {

class DivergedRun : public std::runtime_error {
 public:
  DivergedRun(std::int64_t step, const std::string& what)
      : std::runtime_error("diverged at step " + std::to_string(step) + ": " + what), step_(step) {}
  std::int64_t step() const noexcept { return step_; }

 private:
  std::int64_t step_;
};

struct TrainConfig {
  double base_lr = 1e-3;
  double weight_decay = 0.05;
  int batch_size = 8;
  int epochs = 100;
  int warmup_epochs = 10;
  double min_lr_ratio = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(base_lr > 0)) throw std::invalid_argument("config: base_lr must be > 0");
    if (epochs < 0 || warmup_epochs < 0 || warmup_epochs > epochs) {
      throw std::invalid_argument("config: need 0 <= warmup_epochs <= epochs");
    }
    if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
    if (!(min_lr_ratio >= 0 && min_lr_ratio <= 1)) {
      throw std::invalid_argument("config: min_lr_ratio must be in [0, 1]");
    }
  }

  // Full-scale settings: batches of 64, otherwise the same defaults.
  static TrainConfig paper_defaults() {
    TrainConfig c;
    c.batch_size = 64;
    return c;
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"base_lr", c.base_lr},   {"weight_decay", c.weight_decay}, {"batch_size", c.batch_size},
       {"epochs", c.epochs},     {"warmup_epochs", c.warmup_epochs}, {"min_lr_ratio", c.min_lr_ratio},
       {"betas", {c.beta1, c.beta2}}, {"eps", c.eps},              {"seed", c.seed}};
}

// Missing keys keep their current values, so a config file may be partial.
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.base_lr = j.value("base_lr", c.base_lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  c.min_lr_ratio = j.value("min_lr_ratio", c.min_lr_ratio);
  if (j.contains("betas")) {
    c.beta1 = j.at("betas").at(0).get<double>();
    c.beta2 = j.at("betas").at(1).get<double>();
  }
  c.eps = j.value("eps", c.eps);
  c.seed = j.value("seed", c.seed);
}

inline std::int64_t warmup_steps(std::int64_t total_steps, const TrainConfig& c) {
  if (c.epochs == 0) return 0;
  return (total_steps * c.warmup_epochs + c.epochs / 2) / c.epochs;
}

// Linear warmup from 0 to base_lr, then cosine decay to base_lr * min_lr_ratio
// at total_steps.
inline double lr_at(std::int64_t step, std::int64_t total_steps, const TrainConfig& c) {
  if (step < 0 || step > total_steps) throw std::out_of_range("lr_at: step outside [0, total]");
  const std::int64_t warm = warmup_steps(total_steps, c);
  if (step < warm) return c.base_lr * static_cast<double>(step) / static_cast<double>(warm);
  if (total_steps == warm) return c.base_lr;
  const double progress = static_cast<double>(step - warm) / static_cast<double>(total_steps - warm);
  return c.base_lr * (c.min_lr_ratio + (1.0 - c.min_lr_ratio) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

struct Moments {
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t t = 0;

  bool operator==(const Moments&) const = default;
};

using AdamState = std::map<std::string, Moments>;

// Layer-norm gains/biases and the mask query are exempt from weight decay.
inline bool decays(const std::string& name) {
  return name.find(".ln") == std::string::npos && name != "mask_query";
}

// One AdamW update over every non-frozen parameter that holds a gradient:
//   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
// `step` is only used to label a divergence.
inline void adamw_step(ModelParams& params, AdamState& state, double lr, double wd, const TrainConfig& c,
                       std::int64_t step = 0) {
  for (const auto& [name, t] : params.tensors()) {
    if (params.frozen(name) || !t.has_grad()) continue;
    for (double g : t.grad()) {
      if (!std::isfinite(g)) throw DivergedRun(step, "non-finite gradient in " + name);
    }
  }
  for (const std::string& name : params.names()) {
    Tensor& t = params.at(name);
    if (params.frozen(name) || !t.has_grad()) continue;
    Moments& s = state[name];
    if (s.m.empty()) {
      s.m.assign(t.size(), 0.0);
      s.v.assign(t.size(), 0.0);
    }
    ++s.t;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(s.t));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(s.t));
    const double decay = decays(name) ? wd : 0.0;
    auto p = t.mutable_data();
    const auto g = t.grad();
    for (std::size_t i = 0; i < p.size(); ++i) {
      s.m[i] = c.beta1 * s.m[i] + (1.0 - c.beta1) * g[i];
      s.v[i] = c.beta2 * s.v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double mhat = s.m[i] / bc1;
      const double vhat = s.v[i] / bc2;
      p[i] -= lr * (mhat / (std::sqrt(vhat) + c.eps) + decay * p[i]);
    }
  }
}

inline double grad_norm(const ModelParams& params) {
  double s = 0;
  for (const auto& [name, t] : params.tensors()) {
    if (params.frozen(name) || !t.has_grad()) continue;
    for (double g : t.grad()) s += g * g;
  }
  return std::sqrt(s);
}

}  // namespace sam3d
