#include <gtest/gtest.h>

#include <cmath>

#include "sam3d/grad_check.hpp"
#include "sam3d/rng.hpp"
#include "sam3d/tensor.hpp"

using namespace sam3d;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1, double hi = 1, bool grad = true) {
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v), grad);
}

}  // namespace

TEST(Tensor, SmoothL1Values) {
  const Tensor a({1}, {0.0}), b({1}, {2.0});
  EXPECT_DOUBLE_EQ(smooth_l1(a, b, 1.0).item(), 1.5);
  const Tensor c({1}, {0.5});
  EXPECT_DOUBLE_EQ(smooth_l1(a, c, 1.0).item(), 0.125);
  EXPECT_THROW(smooth_l1(a, b, 0.0), TensorError);
}

TEST(Tensor, SmoothL1OfIdenticalInputsHasZeroGradient) {
  Rng rng(1);
  Tensor x = random_tensor({3, 4}, rng);
  const Tensor y = x.detach();
  const Tensor loss = smooth_l1(x, y, 1.0);
  EXPECT_EQ(loss.item(), 0.0);
  loss.backward();
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Tensor, SquareDerivative) {
  Tensor x = Tensor::scalar(3.0, true);
  mul(x, x).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Tensor, ReusedValueAccumulates) {
  Tensor x = Tensor::scalar(1.25, true);
  add(x, x).backward();
  EXPECT_EQ(x.grad()[0], 2.0);
}

TEST(Tensor, ShapeMismatchNamesOp) {
  const Tensor a = Tensor::zeros({2, 3}), b = Tensor::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL();
  } catch (const TensorError& e) {
    EXPECT_EQ(e.kind(), TensorError::Kind::shape_mismatch);
    EXPECT_EQ(e.op(), "matmul");
  }
  EXPECT_THROW(mul(a, Tensor::zeros({3, 2})), TensorError);
  // Bias add broadcasts over rows only.
  EXPECT_NO_THROW(add(a, Tensor::zeros({3})));
  EXPECT_THROW(add(a, Tensor::zeros({2})), TensorError);
}

TEST(Tensor, OverflowIsSignalled) {
  const Tensor a({1, 1}, {1e200});
  try {
    matmul(a, a);
    FAIL();
  } catch (const TensorError& e) {
    EXPECT_EQ(e.kind(), TensorError::Kind::non_finite);
    EXPECT_EQ(e.op(), "matmul");
  }
}

TEST(Tensor, SoftmaxRowsSumToOne) {
  Rng rng(2);
  for (int axis : {0, 1}) {
    const Tensor s = softmax(random_tensor({5, 7}, rng, -20, 20), axis);
    const std::size_t slices = axis == 1 ? 5 : 7, len = axis == 1 ? 7 : 5;
    for (std::size_t i = 0; i < slices; ++i) {
      double sum = 0;
      for (std::size_t j = 0; j < len; ++j) sum += axis == 1 ? s.at(i, j) : s.at(j, i);
      EXPECT_NEAR(sum, 1.0, 1e-9);
    }
  }
  EXPECT_EQ(softmax(Tensor({1, 1}, {3.7})).item(), 1.0);
}

TEST(Tensor, LayerNormMomentsAreStandardized) {
  Rng rng(3);
  const double eps = 1e-5;
  const Tensor x = random_tensor({6, 16}, rng, -3, 5);
  const Tensor y = layer_norm(x, eps);
  for (std::size_t i = 0; i < 6; ++i) {
    double mean = 0, var = 0, raw_var = 0, raw_mean = 0;
    for (std::size_t j = 0; j < 16; ++j) {
      mean += y.at(i, j);
      raw_mean += x.at(i, j);
    }
    mean /= 16;
    raw_mean /= 16;
    for (std::size_t j = 0; j < 16; ++j) {
      var += (y.at(i, j) - mean) * (y.at(i, j) - mean);
      raw_var += (x.at(i, j) - raw_mean) * (x.at(i, j) - raw_mean);
    }
    var /= 16;
    raw_var /= 16;
    EXPECT_NEAR(mean, 0.0, 1e-6);
    // eps-adjusted: var(y) = var(x) / (var(x) + eps)
    EXPECT_NEAR(var, raw_var / (raw_var + eps), 1e-6);
    EXPECT_NEAR(var, 1.0, 1e-4);
  }
}

TEST(Tensor, MaxPoolRoutesGradientToFirstArgmax) {
  Tensor x({3, 2}, {1, 5, 4, 5, 4, 2}, true);
  sum(max_pool(x, 0)).backward();
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()),
            (std::vector<double>{0, 1, 1, 0, 0, 0}));
  x.zero_grad();
  sum(segment_max_pool(x, {0, 1, 3})).backward();
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()),
            (std::vector<double>{1, 1, 1, 1, 0, 0}));
}

TEST(Tensor, NoGradGuardRecordsNothing) {
  Tensor w = Tensor::scalar(2.0, true);
  Tensor out;
  {
    NoGradGuard guard;
    out = mul(w, w);
  }
  EXPECT_FALSE(out.requires_grad());
  out.backward();
  EXPECT_FALSE(w.has_grad());
}

TEST(Tensor, CosineAndMse) {
  const Tensor a({2}, {1, 0}), b({2}, {1, 1});
  EXPECT_NEAR(cosine_sim(a, b).item(), std::sqrt(0.5), 1e-15);
  EXPECT_DOUBLE_EQ(mse(a, b).item(), 0.5);
  EXPECT_THROW(cosine_sim(a, Tensor::zeros({2})), TensorError);
}

// ---------------------------------------------------------------------------
// Finite-difference checks

TEST(GradCheck, MseOfLinearMap) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    Tensor w = random_tensor({4, 3}, rng);
    Tensor x = random_tensor({3, 2}, rng);
    const Tensor y = random_tensor({4, 2}, rng, -1, 1, false);
    EXPECT_LT(grad_check([&] { return mse(matmul(w, x), y); }, {w, x}, 1e-6), 1e-4);
  }
}

TEST(GradCheck, SmoothL1AwayFromKink) {
  Rng rng(7);
  // |d| in [0.05, 0.5] or [2, 3]: far from beta = 1.
  std::vector<double> av, bv;
  for (int i = 0; i < 12; ++i) {
    const double mag = i % 2 ? rng.uniform(0.05, 0.5) : rng.uniform(2, 3);
    const double sign = rng.uniform() < 0.5 ? -1 : 1;
    const double base = rng.uniform(-1, 1);
    av.push_back(base + sign * mag);
    bv.push_back(base);
  }
  Tensor a({3, 4}, av, true);
  Tensor b({3, 4}, bv, true);
  EXPECT_LT(grad_check([&] { return smooth_l1(a, b, 1.0); }, {a, b}, 1e-6), 1e-5);
  EXPECT_LT(grad_check([&] { return sum(smooth_l1_rows(a, b, 1.0)); }, {a, b}, 1e-6), 1e-5);
}

TEST(GradCheck, ConstantFunctionHasZeroGradient) {
  Tensor x = Tensor::scalar(0.3, true);
  const auto rep = grad_check_report([&] { return mul(x, Tensor::scalar(0.0)); }, {x}, 1e-5);
  EXPECT_EQ(rep.analytic, 0.0);
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(rep.max_rel_error, 0.0);
}

TEST(GradCheck, FlagsAMissingGradientPath) {
  Rng rng(4);
  Tensor x = random_tensor({2, 3}, rng);
  // The detached factor hides half of d/dx sum(x * x) from backward().
  const auto rep = grad_check_report([&] { return sum(mul(x, x.detach())); }, {x});
  EXPECT_NEAR(rep.max_rel_error, 0.5, 1e-6);
}

TEST(GradCheck, ExtrapolationRemovesCurvatureError) {
  // f = (k x)^3 at k x = 0.01: a plain central quotient with h = 1e-5 is off
  // by a third of the gradient; the extrapolated one is exact for cubics.
  Tensor x = Tensor::scalar(1e-5, true);
  const auto rep = grad_check_report(
      [&] {
        const Tensor s = scale(x, 1000.0);
        return sum(mul(mul(s, s), s));
      },
      {x});
  EXPECT_NEAR(rep.analytic, 0.3, 1e-12);
  EXPECT_LT(rep.max_rel_error, 1e-8);
}

TEST(GradCheck, EveryOp) {
  Rng rng(21);
  Tensor a = random_tensor({3, 5}, rng);
  Tensor b = random_tensor({3, 5}, rng);
  Tensor c = random_tensor({5, 4}, rng);
  Tensor bias = random_tensor({5}, rng);
  Tensor gain = random_tensor({5}, rng, 0.5, 1.5);
  const auto check = [&](const char* name, std::function<Tensor()> f, std::vector<Tensor> in) {
    EXPECT_LT(grad_check(std::move(f), std::move(in), 1e-6), 1e-6) << name;
  };
  check("add-bias", [&] { return sum(mul(add(a, bias), b)); }, {a, bias, b});
  check("sub", [&] { return mse(sub(a, b), mul(a, a)); }, {a, b});
  check("transpose", [&] { return sum(matmul(transpose(b), a)); }, {a, b});
  check("concat0", [&] { return mse(concat({a, b}, 0), concat({b, a}, 0)); }, {a, b});
  check("concat1", [&] { return sum(mul(concat({a, b}, 1), concat({b, b}, 1))); }, {a, b});
  check("slice", [&] { return sum(mul(slice(a, 1, 1, 4), slice(b, 1, 0, 3))); }, {a, b});
  check("gather", [&] { return sum(mul(gather_rows(a, {2, 0, 2}), gather_rows(b, {1, 1, 0}))); }, {a, b});
  check("mean_pool", [&] { return sum(mul(mean_pool(a, 0), mean_pool(b, 0))); }, {a, b});
  check("mean_pool1", [&] { return sum(mul(mean_pool(a, 1), mean_pool(b, 1))); }, {a, b});
  check("max_pool", [&] { return sum(mul(max_pool(a, 0), mean_pool(b, 0))); }, {a, b});
  check("segment_max", [&] { return sum(mul(segment_max_pool(a, {0, 2, 3}), slice(b, 0, 0, 2))); }, {a, b});
  check("gelu", [&] { return sum(mul(gelu(a), b)); }, {a, b});
  check("softmax1", [&] { return sum(mul(softmax(a, 1), b)); }, {a, b});
  check("softmax0", [&] { return sum(mul(softmax(a, 0), b)); }, {a, b});
  check("layer_norm", [&] { return sum(mul(layer_norm(a, gain, bias, 1e-5), b)); }, {a, b, gain, bias});
  check("matmul", [&] { return sum(gelu(matmul(a, c))); }, {a, c});
  check("cosine", [&] { return cosine_sim(a, b); }, {a, b});
  check("scale", [&] { return mse(scale(a, -2.5), b); }, {a, b});
  check("cross_entropy", [&] { return cross_entropy(matmul(a, c), {0, 3, 2}); }, {a, c});
}
