#include <gtest/gtest.h>

#include <cmath>

#include "covidx/gradcheck.hpp"
#include "covidx/ops.hpp"
#include "oracles.hpp"

using namespace covidx;
using covidx::test::random_tensor;

namespace {

constexpr double kStep = 1e-5;
constexpr double kPrimitiveTolerance = 1e-6;

// Random probe weights turn any op output into a scalar.
struct Probe {
  Tensor<double> weights;
  Var<double> operator()(const Var<double>& y) const { return inner(y, weights); }
};

Probe probe_for(const Shape& shape, Rng& rng) { return {random_tensor<double>(shape, rng)}; }

void expect_grad_ok(const std::function<Var<double>()>& fn,
                    std::vector<Parameter<double>*> params, double tol = kPrimitiveTolerance) {
  const auto r = gradient_check(fn, params, {kStep});
  EXPECT_LT(r.max_rel_error, tol) << "worst " << r.worst_parameter << "[" << r.worst_index
                                  << "] analytic " << r.worst_analytic << " numeric "
                                  << r.worst_numeric;
  EXPECT_GT(r.coordinates, 0u);
}

}  // namespace

TEST(GradientCheck, LinearFunctionIsExact) {
  Rng rng(1);
  Parameter<double> x("x", random_tensor<double>({3, 4}, rng));
  const Probe probe = probe_for({3, 4}, rng);
  const auto r = gradient_check([&] { return probe(param(x)); }, {&x}, {kStep});
  EXPECT_LT(r.max_rel_error, 1e-9);
}

TEST(GradientCheck, RejectsNonScalarAndBadStep) {
  Parameter<double> x("x", Tensor<double>({2}, 1.0));
  EXPECT_THROW(gradient_check([&] { return param(x); }, {&x}), Error);
  EXPECT_THROW(gradient_check([&] { return sum_squares(param(x)); }, {&x}, {0.0}), Error);
}

TEST(GradientCheck, Conv2d) {
  Rng rng(2);
  for (auto [stride, pad] : {std::pair<std::size_t, std::size_t>{1, 1}, {2, 0}, {2, 1}}) {
    Parameter<double> x("x", random_tensor<double>({2, 3, 5, 6}, rng));
    Parameter<double> k("k", random_tensor<double>({4, 3, 3, 3}, rng));
    Parameter<double> b("b", random_tensor<double>({4}, rng));
    const auto out_shape = conv2d(param(x), param(k), param(b), stride, pad).shape();
    const Probe probe = probe_for(out_shape, rng);
    expect_grad_ok([&] { return probe(conv2d(param(x), param(k), param(b), stride, pad)); },
                   {&x, &k, &b});
  }
}

TEST(GradientCheck, DepthwiseConv2d) {
  Rng rng(3);
  Parameter<double> x("x", random_tensor<double>({2, 3, 6, 5}, rng));
  Parameter<double> k("k", random_tensor<double>({3, 1, 3, 3}, rng));
  Parameter<double> b("b", random_tensor<double>({3}, rng));
  for (std::size_t stride : {1u, 2u}) {
    const Probe probe = probe_for(depthwise_conv2d(param(x), param(k), param(b), stride, 1).shape(), rng);
    expect_grad_ok([&] { return probe(depthwise_conv2d(param(x), param(k), param(b), stride, 1)); },
                   {&x, &k, &b});
  }
}

TEST(GradientCheck, Pooling) {
  Rng rng(4);
  Parameter<double> x("x", random_tensor<double>({2, 2, 6, 6}, rng));
  struct Case { PoolKind kind; std::size_t window, stride, pad; };
  for (const Case c : {Case{PoolKind::max, 2, 2, 0}, Case{PoolKind::max, 3, 1, 1},
                       Case{PoolKind::avg, 2, 2, 0}, Case{PoolKind::avg, 3, 2, 1},
                       Case{PoolKind::global_avg, 0, 0, 0}}) {
    const Probe probe = probe_for(pool2d(param(x), c.kind, c.window, c.stride, c.pad).shape(), rng);
    expect_grad_ok([&] { return probe(pool2d(param(x), c.kind, c.window, c.stride, c.pad)); }, {&x});
  }
}

TEST(GradientCheck, DenseAndFlatten) {
  Rng rng(5);
  Parameter<double> x("x", random_tensor<double>({3, 2, 2, 2}, rng));
  Parameter<double> w("w", random_tensor<double>({8, 4}, rng));
  Parameter<double> b("b", random_tensor<double>({4}, rng));
  const Probe probe = probe_for({3, 4}, rng);
  expect_grad_ok([&] { return probe(dense(flatten(param(x)), param(w), param(b))); }, {&x, &w, &b});
}

TEST(GradientCheck, ReluAwayFromKink) {
  Rng rng(6);
  Tensor<double> init({40});
  for (double& v : init.values()) {
    v = rng.uniform(0.001, 2.0) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
    ASSERT_GT(std::abs(v), 10 * kStep);
  }
  Parameter<double> x("x", init);
  const Probe probe = probe_for({40}, rng);
  expect_grad_ok([&] { return probe(relu(param(x))); }, {&x});
}

TEST(GradientCheck, SoftmaxAndCrossEntropy) {
  Rng rng(7);
  Parameter<double> x("x", random_tensor<double>({4, 3}, rng, -2, 2));
  const Probe probe = probe_for({4, 3}, rng);
  expect_grad_ok([&] { return probe(softmax(param(x))); }, {&x});

  auto targets = Tensor<double>::from({4, 3}, {1, 0, 0, 0, 0, 1, 0, 1, 0, 1, 0, 0});
  expect_grad_ok([&] { return cross_entropy(softmax(param(x)), targets); }, {&x});
}

TEST(GradientCheck, BatchNormBothModes) {
  Rng rng(8);
  Parameter<double> x("x", random_tensor<double>({3, 2, 3, 3}, rng, -1, 3));
  Parameter<double> g("g", random_tensor<double>({2}, rng, 0.5, 1.5));
  Parameter<double> s("s", random_tensor<double>({2}, rng));
  const Probe probe = probe_for({3, 2, 3, 3}, rng);
  expect_grad_ok([&] { return probe(batch_norm(param(x), param(g), param(s), Mode::train, nullptr)); },
                 {&x, &g, &s});

  BatchNormStats<double> stats(2);
  stats.mean = Tensor<double>::from({2}, {0.3, -0.2});
  stats.var = Tensor<double>::from({2}, {1.7, 0.4});
  expect_grad_ok([&] { return probe(batch_norm(param(x), param(g), param(s), Mode::infer, &stats)); },
                 {&x, &g, &s});
}

TEST(GradientCheck, MergeOps) {
  Rng rng(9);
  Parameter<double> a("a", random_tensor<double>({2, 2, 3, 3}, rng));
  Parameter<double> b("b", random_tensor<double>({2, 3, 3, 3}, rng));
  Parameter<double> c("c", random_tensor<double>({2, 2, 3, 3}, rng));
  const Probe cat_probe = probe_for({2, 5, 3, 3}, rng);
  expect_grad_ok([&] { return cat_probe(concat_channels<double>({param(a), param(b)})); }, {&a, &b});
  const Probe add_probe = probe_for({2, 2, 3, 3}, rng);
  expect_grad_ok([&] { return add_probe(add<double>({param(a), param(c), param(a)})); }, {&a, &c});
}

TEST(GradientCheck, DropoutWithFixedMask) {
  Rng rng(10);
  Parameter<double> x("x", random_tensor<double>({4, 6}, rng));
  const Probe probe = probe_for({4, 6}, rng);
  expect_grad_ok(
      [&] {
        Rng mask_rng(1234);
        return probe(dropout(param(x), 0.4, Mode::train, mask_rng));
      },
      {&x});
}

TEST(GradientCheck, ComposedStack) {
  Rng rng(11);
  Parameter<double> x("x", random_tensor<double>({2, 2, 6, 6}, rng));
  Parameter<double> k1("k1", random_tensor<double>({3, 2, 3, 3}, rng, -0.5, 0.5));
  Parameter<double> g("g", Tensor<double>({3}, 1.0));
  Parameter<double> s("s", Tensor<double>({3}, 0.1));
  Parameter<double> dw("dw", random_tensor<double>({3, 1, 3, 3}, rng));
  Parameter<double> w("w", random_tensor<double>({3, 2}, rng));
  Parameter<double> b("b", random_tensor<double>({2}, rng));
  auto targets = Tensor<double>::from({2, 2}, {0, 1, 1, 0});
  expect_grad_ok(
      [&] {
        auto h = conv2d(param(x), param(k1), Var<double>(), 1, 1);
        h = batch_norm(h, param(g), param(s), Mode::train, nullptr);
        auto d = depthwise_conv2d(h, param(dw), Var<double>(), 2, 1);
        auto pooled = pool2d(add<double>({d, pool2d(h, PoolKind::avg, 2, 2)}), PoolKind::global_avg);
        return cross_entropy(softmax(dense(flatten(pooled), param(w), param(b))), targets);
      },
      {&x, &k1, &g, &s, &dw, &w, &b});
}
