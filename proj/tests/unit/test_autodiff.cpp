#include <doctest.h>

#include <cmath>
#include <functional>

#include "maskkd/autodiff.hpp"
#include "maskkd/error.hpp"
#include "maskkd/optim.hpp"
#include "oracles.hpp"

using namespace maskkd;

TEST_CASE("backward of sum and of a square") {
  Var x(Tensor::vector({1.0, -2.0, 3.5}), true);
  {
    Tape tape;
    tape.backward(ops::sum(&tape, x));
    const Tensor g = x.grad();
    for (double v : g.values()) CHECK(v == 1.0);
  }
  x.zero_grad();
  {
    Tape tape;
    tape.backward(ops::sum(&tape, ops::mul(&tape, x, x)));
    const Tensor g = x.grad();
    for (std::size_t i = 0; i < 3; ++i) CHECK(g[i] == 2.0 * x.value()[i]);
  }
}

TEST_CASE("backward rejects non-scalar and foreign losses") {
  Var x(Tensor::vector({1.0, 2.0}), true);
  Tape tape;
  Var y = ops::mul(&tape, x, x);
  CHECK_THROWS_AS(tape.backward(y), RankError);
  Tape other;
  CHECK_THROWS_AS(other.backward(ops::sum(&tape, y)), PreconditionError);
}

TEST_CASE("backward seed scales gradients") {
  Var x(Tensor::vector({1.0, 2.0}), true);
  Tape tape;
  tape.backward(ops::sum(&tape, ops::mul(&tape, x, x)), 0.25);
  CHECK(x.grad()[1] == 1.0);
}

namespace {

// Central-difference check of d f / d p for every entry of each parameter.
double max_fd_error(std::vector<Var>& params, const std::function<Var(Tape*)>& f) {
  for (auto& p : params) p.zero_grad();
  Tape tape;
  tape.backward(f(&tape));
  double worst = 0.0;
  const double h = 1e-4;
  for (auto& p : params) {
    const Tensor g = p.grad();
    for (std::size_t i = 0; i < p.value().size(); ++i) {
      double& x = p.mutable_value()[i];
      const double x0 = x;
      x = x0 + h;
      const double up = f(nullptr).value()[0];
      x = x0 - h;
      const double dn = f(nullptr).value()[0];
      x = x0;
      const double fd = (up - dn) / (2 * h);
      const double err = std::abs(fd - g[i]) / std::max(1e-6, std::abs(fd) + std::abs(g[i]));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("two-layer perceptron gradients match finite differences") {
  Var x(oracle::random_matrix(5, 4, 1), false);
  Var w1(oracle::random_matrix(4, 6, 2, 0.5), true), b1(oracle::random_matrix(1, 6, 3), true);
  Var w2(oracle::random_matrix(6, 3, 4, 0.5), true), b2(oracle::random_matrix(1, 3, 5), true);
  b1.mutable_value() = Tensor({6}, b1.value().storage());
  b2.mutable_value() = Tensor({3}, b2.value().storage());
  std::vector<Var> params = {w1, b1, w2, b2};
  auto f = [&](Tape* t) {
    Var h = ops::tanh(t, ops::linear(t, x, w1, b1));
    Var y = ops::gelu(t, ops::linear(t, h, w2, b2));
    return ops::sum(t, ops::mul(t, y, y));
  };
  CHECK(max_fd_error(params, f) < 1e-4);
}

TEST_CASE("layer norm, attention and cross entropy gradients match finite differences") {
  const std::size_t t = 5, d = 4;
  Var x(oracle::random_matrix(t, d, 11), true);
  Var g(Tensor({d}, 1.0), true), b(Tensor({d}, 0.0), true);
  Var w(oracle::random_matrix(d, 3 * d, 12, 0.7), true);
  Var wb(Tensor({3 * d}, 0.0), true);
  Var head(oracle::random_matrix(d, 7, 13), true);
  Tensor mask({t, t}, 0.0);
  for (std::size_t r = 0; r < t; ++r)
    for (std::size_t c = r + 1; c < t; ++c) mask(r, c) = kNegInf;
  mask(4, 1) = kNegInf;
  const std::vector<std::size_t> rows = {1, 2, 4};
  const std::vector<int> targets = {3, 0, 6};
  std::vector<Var> params = {x, g, b, w, wb, head};
  auto f = [&](Tape* tp) {
    Var h = ops::layer_norm(tp, x, g, b);
    Var a = ops::masked_self_attention(tp, ops::linear(tp, h, w, wb), mask, 2, nullptr);
    return ops::cross_entropy(tp, ops::matmul(tp, a, head), rows, targets);
  };
  CHECK(max_fd_error(params, f) < 1e-4);
}

TEST_CASE("kd divergence gradients match finite differences for every kind") {
  Var logits(oracle::random_matrix(4, 6, 21, 2.0), true);
  const Tensor target = oracle::random_matrix(2, 6, 22, 2.0);
  const std::vector<std::size_t> rows = {0, 3};
  std::vector<Var> params = {logits};
  for (auto kind : {ops::KlKind::reverse, ops::KlKind::forward, ops::KlKind::mixed}) {
    auto f = [&](Tape* t) { return ops::kd_divergence(t, logits, rows, target, 2.0, kind); };
    CHECK(max_fd_error(params, f) < 1e-4);
  }
}

TEST_CASE("embedding rejects sequences longer than the position table") {
  Var tok(Tensor({4, 2}, 0.1), true), pos(Tensor({3, 2}, 0.1), true);
  const std::vector<int> ids = {0, 1, 2, 3};
  CHECK_THROWS_AS(ops::embed(nullptr, tok, pos, ids), CapacityError);
}

TEST_CASE("adam update rule") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    Var p(Tensor::vector({1.0, -1.0}), true);
    p.grad_storage();
    std::vector<Var> ps = {p};
    Adam opt;
    opt.step(ps);
    CHECK(p.value() == Tensor::vector({1.0, -1.0}));
  }
  SUBCASE("one step with beta1 = beta2 = 0") {
    const double lr = 0.01, eps = 1e-8;
    Var p(Tensor::vector({0.5}), true);
    p.grad_storage()[0] = 1.0;
    Adam opt({.lr = lr, .beta1 = 0.0, .beta2 = 0.0, .eps = eps});
    std::vector<Var> ps = {p};
    opt.step(ps);
    CHECK(std::abs(p.value()[0] - (0.5 - lr / (1.0 + eps))) < 1e-15);
    CHECK_FALSE(p.has_grad());
  }
  SUBCASE("minimizes x^2") {
    Var x(Tensor::vector({1.0}), true);
    std::vector<Var> ps = {x};
    Adam opt({.lr = 0.1});
    for (int i = 0; i < 100; ++i) {
      x.grad_storage()[0] = 2.0 * x.value()[0];
      opt.step(ps);
    }
    CHECK(std::abs(x.value()[0]) < 0.05);
  }
  SUBCASE("missing gradient is an error") {
    Var p(Tensor::vector({1.0}), true);
    std::vector<Var> ps = {p};
    Adam opt;
    CHECK_THROWS_AS(opt.step(ps), UnreadyParameterError);
  }
}
