#include <cmath>
#include <random>

#include "doctest.h"
#include "remind/kernels.hpp"
#include "remind/tape.hpp"
#include "test_util.hpp"

using namespace remind;
using remind::testing::check_gradients;
using remind::testing::random_tensor;

namespace {

Tensor triple_loop_matmul(const Tensor& a, const Tensor& b) {
  Tensor c({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < a.cols(); ++p) s += a(i, p) * b(p, j);
      c(i, j) = s;
    }
  return c;
}

Tensor eval_matmul(const Tensor& a, const Tensor& b) {
  Tape t;
  return ops::matmul(t.constant(a), t.constant(b)).value();
}

Tensor eval_softmax(const Tensor& x) {
  Tape t;
  return ops::softmax_rows(t.constant(x)).value();
}

}  // namespace

TEST_CASE("matmul: identity and hand arithmetic") {
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({3, 3}, rng);
  Tensor eye = Tensor::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  CHECK(max_abs_diff(eval_matmul(eye, x), x) == 0.0);

  Tensor c = eval_matmul(Tensor::matrix(2, 2, {1, 2, 3, 4}), Tensor::matrix(2, 1, {1, 1}));
  CHECK(c(0, 0) == 3.0);
  CHECK(c(1, 0) == 7.0);
}

TEST_CASE("matmul: matches triple loop oracle") {
  std::mt19937_64 rng(2);
  Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
  CHECK(max_abs_diff(eval_matmul(a, b), triple_loop_matmul(a, b)) < 1e-14);
}

TEST_CASE("matmul: shape mismatch throws") {
  Tape t;
  Var a = t.constant(Tensor({2, 3})), b = t.constant(Tensor({2, 3}));
  CHECK_THROWS_AS(ops::matmul(a, b), std::invalid_argument);
}

TEST_CASE("matmul: associativity on random conforming triples") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor a = random_tensor({4, 5}, rng), b = random_tensor({5, 3}, rng),
           c = random_tensor({3, 6}, rng);
    Tensor left = eval_matmul(eval_matmul(a, b), c);
    Tensor right = eval_matmul(a, eval_matmul(b, c));
    CHECK(max_abs_diff(left, right) < 1e-5);
  }
}

TEST_CASE("softmax: symmetric, limit and direct-formula cases") {
  Tensor u = eval_softmax(Tensor::matrix(1, 3, {0, 0, 0}));
  for (int j = 0; j < 3; ++j) CHECK(u[j] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  Tensor lim = eval_softmax(Tensor::matrix(1, 2, {400.0, -400.0}));
  CHECK(lim[0] == doctest::Approx(1.0));
  CHECK(lim[1] < 1e-300);
  CHECK(lim.all_finite());

  // direct exp/sum evaluation in long double
  std::mt19937_64 rng(4);
  Tensor x = random_tensor({1, 7}, rng, 3.0);
  Tensor y = eval_softmax(x);
  long double s = 0;
  for (std::size_t j = 0; j < 7; ++j) s += std::exp(static_cast<long double>(x[j]));
  for (std::size_t j = 0; j < 7; ++j)
    CHECK(std::abs(static_cast<long double>(y[j]) - std::exp(static_cast<long double>(x[j])) / s) <
          1e-15L);
}

TEST_CASE("softmax: rows sum to one and are shift invariant") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor({5, 9}, rng, 4.0);
    Tensor y = eval_softmax(x);
    Tensor shifted = x;
    for (std::size_t r = 0; r < 5; ++r)
      for (std::size_t c = 0; c < 9; ++c) shifted(r, c) += static_cast<double>(r) * 3.7 - 2.0;
    Tensor ys = eval_softmax(shifted);
    for (std::size_t r = 0; r < 5; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 9; ++c) {
        CHECK(y(r, c) >= 0.0);
        s += y(r, c);
      }
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
    CHECK(max_abs_diff(y, ys) < 1e-12);
  }
}

TEST_CASE("softmax: non-finite input rejected, masked rows") {
  Tape t;
  Tensor bad = Tensor::matrix(1, 2, {0.0, std::nan("")});
  CHECK_THROWS_AS(ops::softmax_rows(t.constant(bad)), std::domain_error);

  auto mask = std::make_shared<const std::vector<std::uint8_t>>(std::vector<std::uint8_t>{1, 0, 1, 1});
  Tensor y = ops::softmax_rows(t.constant(Tensor::matrix(2, 2, {5, 7, 1, 1})), mask).value();
  CHECK(y(0, 0) == 1.0);
  CHECK(y(0, 1) == 0.0);
  CHECK(y(1, 0) == doctest::Approx(0.5));
}

TEST_CASE("grad: sum and half sum of squares") {
  Tape t;
  Tensor pv = Tensor::matrix(2, 2, {1.5, -2.0, 0.25, 3.0});
  Var p = t.parameter(pv);
  auto g = grad(ops::sum(p), {p});
  for (double v : g[0].storage()) CHECK(v == 1.0);

  Tape t2;
  Var p2 = t2.parameter(pv);
  auto g2 = grad(ops::scale(ops::sum(ops::mul(p2, p2)), 0.5), {p2});
  CHECK(max_abs_diff(g2[0], pv) == 0.0);
}

TEST_CASE("grad: non-scalar loss rejected, constants get zero gradient") {
  Tape t;
  Var p = t.parameter(Tensor({2, 2}, 1.0));
  Var c = t.constant(Tensor({2, 2}, 2.0));
  CHECK_THROWS_AS(t.backward(ops::mul(p, c)), std::invalid_argument);
  auto g = grad(ops::sum(ops::mul(p, c)), {p, c});
  for (double v : g[0].storage()) CHECK(v == 2.0);
  for (double v : g[1].storage()) CHECK(v == 0.0);
}

TEST_CASE("tape: adjoints replay in reverse recording order") {
  Tape t;
  Var p = t.parameter(Tensor::matrix(1, 1, {2.0}));
  std::vector<std::size_t> order;
  Var a = t.record(p.value(), {p}, [&](Tape& tp, std::size_t self) {
    order.push_back(self);
    tp.grad_buffer(p.id)[0] += tp.grad_buffer(self)[0];
  });
  Var b = t.record(a.value(), {a}, [&](Tape& tp, std::size_t self) {
    order.push_back(self);
    tp.grad_buffer(a.id)[0] += tp.grad_buffer(self)[0];
  });
  t.backward(b);
  REQUIRE(order.size() == 2);
  CHECK(order[0] == b.id);
  CHECK(order[1] == a.id);
}

TEST_CASE("kernels: OpenMP paths equal serial references bitwise") {
  std::mt19937_64 rng(6);
  const std::size_t m = 70, k = 40, n = 90;
  Tensor a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
  Tensor c1({m, n}), c2({m, n});
  kernels::matmul(a.values(), b.values(), c1.values(), m, k, n);
  kernels::serial::matmul(a.values(), b.values(), c2.values(), m, k, n);
  CHECK(max_abs_diff(c1, c2) == 0.0);

  Tensor g = random_tensor({m, n}, rng);
  Tensor da1({m, k}), da2({m, k}), db1({k, n}), db2({k, n});
  kernels::matmul_a_bt_acc(g.values(), b.values(), da1.values(), m, n, k);
  kernels::serial::matmul_a_bt_acc(g.values(), b.values(), da2.values(), m, n, k);
  kernels::matmul_at_b_acc(a.values(), g.values(), db1.values(), m, k, n);
  kernels::serial::matmul_at_b_acc(a.values(), g.values(), db2.values(), m, k, n);
  CHECK(max_abs_diff(da1, da2) == 0.0);
  CHECK(max_abs_diff(db1, db2) == 0.0);

  Tensor s1({m, n}), s2({m, n});
  kernels::softmax_rows(g.values(), {}, s1.values(), m, n);
  kernels::serial::softmax_rows(g.values(), {}, s2.values(), m, n);
  CHECK(max_abs_diff(s1, s2) == 0.0);
}

// Finite-difference agreement for every differentiable primitive on 20
// random inputs each.
TEST_CASE("primitives: analytic adjoints match central differences") {
  using remind::testing::LossBuilder;
  std::mt19937_64 rng(7);
  auto weights = [&](std::vector<std::size_t> shape) { return random_tensor(shape, rng); };

  struct Case {
    const char* name;
    std::vector<std::vector<std::size_t>> shapes;
    LossBuilder f;
  };
  // Each loss contracts the op output with a fixed random tensor so every
  // output coordinate contributes.
  std::vector<Case> cases;
  auto contract = [](Tape& t, Var y, std::uint64_t seed) {
    std::mt19937_64 r(seed);
    Tensor w = random_tensor(y.shape(), r);
    return ops::sum(ops::mul(y, t.constant(w)));
  };
  cases.push_back({"add", {{3, 4}, {3, 4}},
                   [&](Tape& t, const std::vector<Var>& p) { return contract(t, ops::add(p[0], p[1]), 11); }});
  cases.push_back({"sub", {{3, 4}, {3, 4}},
                   [&](Tape& t, const std::vector<Var>& p) { return contract(t, ops::sub(p[0], p[1]), 12); }});
  cases.push_back({"mul", {{3, 4}, {3, 4}},
                   [&](Tape& t, const std::vector<Var>& p) { return contract(t, ops::mul(p[0], p[1]), 13); }});
  cases.push_back({"scale", {{3, 4}},
                   [&](Tape& t, const std::vector<Var>& p) { return contract(t, ops::scale(p[0], -1.7), 14); }});
  cases.push_back({"add_row", {{3, 4}, {4}},
                   [&](Tape& t, const std::vector<Var>& p) { return contract(t, ops::add_row(p[0], p[1]), 15); }});
  cases.push_back({"mul_row", {{3, 4}, {4}},
                   [&](Tape& t, const std::vector<Var>& p) { return contract(t, ops::mul_row(p[0], p[1]), 16); }});
  cases.push_back({"matmul", {{3, 4}, {4, 5}},
                   [&](Tape& t, const std::vector<Var>& p) { return contract(t, ops::matmul(p[0], p[1]), 17); }});
  cases.push_back({"transpose", {{3, 4}},
                   [&](Tape& t, const std::vector<Var>& p) { return contract(t, ops::transpose(p[0]), 18); }});
  cases.push_back({"softmax_rows", {{3, 5}},
                   [&](Tape& t, const std::vector<Var>& p) { return contract(t, ops::softmax_rows(p[0]), 19); }});
  cases.push_back({"softmax_rows_masked", {{3, 3}},
                   [&](Tape& t, const std::vector<Var>& p) {
                     auto mask = std::make_shared<const std::vector<std::uint8_t>>(
                         std::vector<std::uint8_t>{1, 0, 0, 1, 1, 0, 1, 1, 1});
                     return contract(t, ops::softmax_rows(p[0], mask), 20);
                   }});
  cases.push_back({"tanh", {{3, 4}},
                   [&](Tape& t, const std::vector<Var>& p) { return contract(t, ops::tanh(p[0]), 21); }});
  cases.push_back({"gelu", {{3, 4}},
                   [&](Tape& t, const std::vector<Var>& p) { return contract(t, ops::gelu(p[0]), 22); }});
  cases.push_back({"rms_norm", {{3, 4}},
                   [&](Tape& t, const std::vector<Var>& p) { return contract(t, ops::rms_norm(p[0]), 23); }});
  cases.push_back({"concat_cols", {{3, 2}, {3, 3}},
                   [&](Tape& t, const std::vector<Var>& p) { return contract(t, ops::concat_cols({p[0], p[1]}), 24); }});
  cases.push_back({"concat_rows", {{2, 3}, {1, 3}},
                   [&](Tape& t, const std::vector<Var>& p) { return contract(t, ops::concat_rows({p[0], p[1]}), 25); }});
  cases.push_back({"slice_cols", {{3, 5}},
                   [&](Tape& t, const std::vector<Var>& p) { return contract(t, ops::slice_cols(p[0], 1, 3), 26); }});
  cases.push_back({"slice_rows", {{4, 3}},
                   [&](Tape& t, const std::vector<Var>& p) { return contract(t, ops::slice_rows(p[0], 1, 2), 27); }});
  cases.push_back({"gather_rows", {{3, 2}},
                   [&](Tape& t, const std::vector<Var>& p) { return contract(t, ops::gather_rows(p[0], {2, 0, 2, 1}), 28); }});
  cases.push_back({"rotary", {{3, 8}, {3, 2}},
                   [&](Tape& t, const std::vector<Var>& p) { return contract(t, ops::rotary(p[0], p[1], 2), 29); }});
  cases.push_back({"reshape", {{3, 4}},
                   [&](Tape& t, const std::vector<Var>& p) { return contract(t, ops::reshape(p[0], {2, 6}), 30); }});
  cases.push_back({"mean", {{3, 4}},
                   [&](Tape& t, const std::vector<Var>& p) { return ops::mean(ops::mul(p[0], p[0])); }});

  for (const Case& c : cases) {
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<Tensor> params;
      for (const auto& s : c.shapes) params.push_back(weights(s));
      auto res = check_gradients(c.f, params, 64, rng);
      INFO("primitive " << c.name << " trial " << trial << " max rel " << res.max_rel_error);
      CHECK(res.failures == 0);
    }
  }
}
