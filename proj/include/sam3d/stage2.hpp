#pragma once

// Teacher-student masked token prediction. The frozen teacher sees every
// token; the student sees only the visible ones and predicts the teacher's
// pooled instance feature and its decoder outputs at the masked positions.

#include <stdexcept>
#include <vector>

#include "nn.hpp"
#include "tensor.hpp"

namespace sam3d {

class DegeneratePlan : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct TeacherOutputs {
  Tensor instance;  // 1 x L, mean of encoder outputs over all tokens
  Tensor targets;   // N_m x L decoder outputs at masked positions
};

struct StudentOutputs {
  Tensor instance;  // 1 x L, mean of encoder outputs over visible tokens
  Tensor preds;     // N_m x L
};

struct Stage2Losses {
  Tensor instance;
  Tensor token;
  Tensor total;
};

namespace detail {

inline Tensor l2_normalize_rows(const Tensor& t) {
  std::vector<double> v(t.data().begin(), t.data().end());
  const std::size_t n = t.rows(), m = t.cols();
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < m; ++j) s += v[i * m + j] * v[i * m + j];
    const double inv = s > 0 ? 1.0 / std::sqrt(s) : 0.0;
    for (std::size_t j = 0; j < m; ++j) v[i * m + j] *= inv;
  }
  return Tensor(t.shape(), std::move(v));
}

}  // namespace detail

// No gradient is recorded; the teacher decoder runs with every position visible.
inline TeacherOutputs teacher_forward(const TokenInputs& in, const MaskPlan& plan, const ModelParams& teacher,
                                      bool normalize_targets = false) {
  NoGradGuard guard;
  const Tensor h = encode_tokens(in, teacher);
  TeacherOutputs out;
  out.instance = mean_pool(h, 0);
  if (!plan.masked.empty()) {
    const Tensor dec = decode(h, Tensor(), all_visible(in.count()), teacher);
    out.targets = gather_rows(dec, plan.masked);
    if (normalize_targets) out.targets = detail::l2_normalize_rows(out.targets);
  }
  return out;
}

inline StudentOutputs student_forward(const TokenInputs& in, const MaskPlan& plan, const ModelParams& student) {
  if (plan.size() != in.count()) throw std::invalid_argument("student_forward: plan does not cover the tokens");
  if (plan.visible.empty()) throw DegeneratePlan("student_forward: mask plan leaves no visible tokens");
  const Tensor pos = pos_embed(in.centroids, student);
  const Tensor features = add(embed_points(in, student), pos);
  const Tensor enc = encode(gather_rows(features, plan.visible), student);
  StudentOutputs out;
  out.instance = mean_pool(enc, 0);
  if (!plan.masked.empty()) out.preds = gather_rows(decode(enc, pos, plan, student), plan.masked);
  return out;
}

// L_ins = MSE(predictor(student instance), teacher instance);
// L_token = MSE over masked tokens (0 when nothing is masked); total = sum.
inline Stage2Losses stage2_loss(const StudentOutputs& s, const TeacherOutputs& t, const ModelParams& student) {
  Stage2Losses l;
  l.instance = mse(predict_instance(s.instance, student), t.instance);
  l.token = s.preds.defined() ? mse(s.preds, t.targets) : Tensor::scalar(0.0);
  l.total = add(l.instance, l.token);
  return l;
}

}  // namespace sam3d
