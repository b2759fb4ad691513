#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <limits>
#include <random>

#include "dsfed/tensor.hpp"

using namespace dsfed;

namespace {

std::vector<double> uniform(std::mt19937_64& rng, std::size_t n, double lo = -2, double hi = 2) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

}  // namespace

TEST_CASE("elementwise and scalar ops") {
  auto a = Tensor::from({2}, {1, 2});
  auto b = Tensor::from({2}, {3, 4});
  CHECK(add(a, b).values() == std::vector<double>{4, 6});
  CHECK(sigmoid(Tensor::from({1}, {0})).item() == 0.5);
  CHECK((a * b).values() == std::vector<double>{3, 8});
  CHECK((b / a).values() == std::vector<double>{3, 2});
  CHECK(add_scalar(a, 1).values() == std::vector<double>{2, 3});
  CHECK(rsub_scalar(1, a).values() == std::vector<double>{0, -1});
  // single-element tensors broadcast
  CHECK((a * Tensor::scalar(2)).values() == std::vector<double>{2, 4});
}

TEST_CASE("conv2d with a 1x1 kernel scales the image") {
  auto img = Tensor::full({1, 3, 3}, 1.0);
  auto w = Tensor::full({1, 1, 1, 1}, 2.0);
  auto out = conv2d(img, w, Tensor(), 0);
  CHECK(out.shape() == Shape{1, 3, 3});
  for (double v : out.data()) CHECK(v == 2.0);
}

TEST_CASE("conv2d zero padding against a direct loop") {
  std::mt19937_64 rng(5);
  const std::size_t C = 2, O = 3, H = 5, W = 4, k = 3;
  auto in = uniform(rng, C * H * W);
  auto w = uniform(rng, O * C * k * k);
  auto b = uniform(rng, O);
  auto out = conv2d(Tensor::from({C, H, W}, in), Tensor::from({O, C, k, k}, w), Tensor::from({O}, b), 1);
  REQUIRE(out.shape() == Shape{O, H, W});
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        double acc = b[o];
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long iy = long(y + ky) - 1, ix = long(x + kx) - 1;
              if (iy < 0 || ix < 0 || iy >= long(H) || ix >= long(W)) continue;
              acc += w[((o * C + c) * k + ky) * k + kx] * in[(c * H + iy) * W + ix];
            }
        CHECK(out.data()[(o * H + y) * W + x] == doctest::Approx(acc).epsilon(1e-12));
      }
}

TEST_CASE("pooling") {
  auto in = Tensor::from({1, 2, 4}, {1, 5, 2, 2, 3, 0, 8, -1});
  CHECK(max_pool2(in).values() == std::vector<double>{5, 8});
  CHECK(mean_pool2(in).values() == std::vector<double>{2.25, 2.75});
}

TEST_CASE("matmul") {
  auto a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = Tensor::from({3, 1}, {1, 0, -1});
  CHECK(matmul(a, b).values() == std::vector<double>{-2, -2});
}

TEST_CASE("shape mismatch names both shapes") {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({3, 2});
  try {
    (void)add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[3,2]") != std::string::npos);
  }
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
}

TEST_CASE("non-finite inputs are rejected") {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(Tensor::from({1}, {nan}), NonFiniteError);
  CHECK_THROWS(log(Tensor::from({1}, {0.0})));
  CHECK_THROWS(log(Tensor::from({1}, {-1.0})));
}

TEST_CASE("sigmoid stays strictly inside (0,1)") {
  auto s = sigmoid(Tensor::from({4}, {-800, -40, 40, 800}));
  for (double v : s.data()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  const auto big = exp(clamp(Tensor::from({2}, {-1e6, 1e6}), -50, 50));
  for (double v : big.data()) CHECK(std::isfinite(v));
}

TEST_CASE("backward basics") {
  auto w = Tensor::from({1}, {3}, true);
  sum(w * w).backward();
  CHECK(w.grad()[0] == 6.0);

  auto z = Tensor::from({1}, {0}, true);
  sigmoid(z).backward();
  CHECK(z.grad()[0] == 0.25);

  // repeated calls accumulate on leaves
  sigmoid(z).backward();
  CHECK(z.grad()[0] == 0.5);
}

TEST_CASE("backward errors") {
  auto w = Tensor::from({2}, {1, 2}, true);
  CHECK_THROWS(mul_scalar(w, 2).backward());  // not scalar
  CHECK_THROWS(Tensor::scalar(1.0).backward());  // no history
}

TEST_CASE("gradient accumulation is linear") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto v = uniform(rng, 6);
    auto f1 = [](const Tensor& p) { return sum(tanh(p) * p); };
    auto f2 = [](const Tensor& p) { return mean(sigmoid(mul_scalar(p, 3))); };
    auto a = Tensor::from({6}, v, true);
    (f1(a) + f2(a)).backward();
    auto b = Tensor::from({6}, v, true);
    f1(b).backward();
    f2(b).backward();
    for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(a.grad()[i] - b.grad()[i]) <= 1e-12);
  }
}

TEST_CASE("gradient_check: trivial cases") {
  std::mt19937_64 rng(3);
  const auto p = uniform(rng, 7);
  auto quad = [](const Tensor& t) { return sum(mul_scalar(t * t, 1.5)); };
  CHECK(gradient_check(quad, p, 1e-4) < 1e-8);
  auto constant = [](const Tensor& t) { return add_scalar(mul_scalar(sum(t), 0.0), 4.0); };
  CHECK(gradient_check(constant, p, 1e-4) == 0.0);
  CHECK_THROWS(gradient_check(quad, p, 0.0));
  CHECK_THROWS(gradient_check(quad, p, 0.05));
}

TEST_CASE("gradient_check rejects a non-deterministic evaluation") {
  int calls = 0;
  auto flaky = [&calls](const Tensor& t) { return add_scalar(sum(t), 1e-3 * (++calls)); };
  std::vector<double> p{0.1, 0.2};
  CHECK_THROWS(gradient_check(flaky, p, 1e-5));
}

TEST_CASE("gradient_check: 2-layer sigmoid net, 50 params") {
  std::mt19937_64 rng(17);
  // x: 4 inputs, hidden 6 -> 6*4+6 = 30, output 2 -> 2*6+2 = 14, plus 6 spare params scaling
  // the input: 50 in total.
  const auto x = uniform(rng, 4);
  const auto y = uniform(rng, 2, 0, 1);
  auto net = [&](const Tensor& p) {
    auto scale = slice(p, 44, {4, 1});
    auto xin = Tensor::from({4, 1}, x) * scale;
    auto w1 = slice(p, 0, {6, 4});
    auto b1 = slice(p, 24, {6, 1});
    auto w2 = slice(p, 30, {2, 6});
    auto b2 = slice(p, 42, {2, 1});
    auto h = sigmoid(matmul(w1, xin) + b1);
    auto out = sigmoid(matmul(w2, h) + b2);
    auto d = out - Tensor::from({2, 1}, y);
    return sum(d * d);
  };
  auto p = uniform(rng, 48);
  p.push_back(0.3);
  p.push_back(-0.7);
  CHECK(gradient_check(net, p, 1e-5) < 1e-4);
}

// Every differentiable op against central differences, 100 seeds.
TEST_CASE("op gradients vs finite differences over 100 seeds") {
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    const auto p = uniform(rng, 2 * 9 + 2 * 2 * 3 * 3 + 2);
    const auto other = uniform(rng, 9, 0.5, 2);
    auto fn = [&](const Tensor& t) {
      auto a = slice(t, 0, {1, 3, 3});
      auto b = slice(t, 9, {1, 3, 3});
      auto w = slice(t, 18, {2, 1, 3, 3});
      auto bias = slice(t, 36, {2});
      auto o = Tensor::from({1, 3, 3}, other);
      Tensor acc = sum(a + b) + sum(a * b) + sum(a / o) + sum(b - a);
      acc = acc + sum(sigmoid(a)) + sum(tanh(b)) + sum(exp(mul_scalar(a, 0.5)));
      acc = acc + sum(log(add_scalar(mul(o, o), 0.5) + clamp(b, -0.4, 0.4)));
      acc = acc + sum(relu(add_scalar(a, 0.013)));  // kink away from typical values
      auto c = conv2d(add(a, b), w, bias, 1);
      acc = acc + mean(c * c) + sum(max_pool2(slice(c, 0, {2, 2, 2})));
      acc = acc + sum(mean_pool2(reshape(slice(t, 0, {16}), {1, 4, 4})));
      acc = acc + sum(matmul(reshape(a, {3, 3}), reshape(b, {3, 3})));
      acc = acc + sum(rsub_scalar(2.0, neg(a)));
      return acc;
    };
    worst = std::max(worst, gradient_check(fn, p, 1e-5));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("sgd_step") {
  auto p = Tensor::from({1}, {1}, true);
  OptimizerState st(0.1, 0.0, 1);
  sum(p).backward();
  sgd_step(p, st);
  CHECK(p.item() == doctest::Approx(0.9).epsilon(1e-15));
  CHECK_FALSE(p.has_grad());

  auto q = Tensor::from({1}, {1}, true);
  OptimizerState mom(0.1, 0.9, 1);
  sum(q).backward();
  sgd_step(q, mom);
  sum(q).backward();
  sgd_step(q, mom);
  CHECK(q.item() == doctest::Approx(0.71).epsilon(1e-15));

  auto r = Tensor::from({1}, {0.5}, true);
  OptimizerState st2(0.1, 0.5, 1);
  sum(mul_scalar(r, 0.0)).backward();
  sgd_step(r, st2);
  CHECK(r.item() == 0.5);

  auto s = Tensor::from({1}, {1}, true);
  CHECK_THROWS(sgd_step(s, st2));  // no grad yet
  CHECK_THROWS(OptimizerState(0.0, 0.5, 1));
  CHECK_THROWS(OptimizerState(0.1, 1.0, 1));
}

TEST_CASE("param serialization") {
  std::vector<double> v{1.5, -2.25, 0.0, 1e-300};
  auto bytes = serialize_params(v);
  CHECK(bytes.size() == serialized_params_bytes(v.size()));
  CHECK(bytes.size() == 8 + 8 * 4);
  CHECK(bytes[0] == 4);  // little-endian count
  CHECK(deserialize_params(bytes) == v);
  bytes.pop_back();
  CHECK_THROWS(deserialize_params(bytes));
}
