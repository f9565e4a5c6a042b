#include <cmath>
#include <functional>
#include <random>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "ntom/autodiff.hpp"

using namespace ntom;
using ad::Graph;
using ad::Matrix;
using ad::Param;
using ad::Tensor;

namespace {

double central_difference(const std::function<double(const Matrix&)>& f, Matrix x, std::size_t i,
                          double eps) {
  const double saved = x[i];
  x[i] = saved + eps;
  const double up = f(x);
  x[i] = saved - eps;
  const double down = f(x);
  return (up - down) / (2.0 * eps);
}

// Checks d sum(op(x) * probe) / dx against central differences.
double unary_error(const std::function<Tensor(Graph&, Tensor)>& op, const Matrix& x0,
                   const Matrix& probe) {
  auto value = [&](const Matrix& x) {
    Graph g;
    Tensor y = op(g, g.constant(x));
    return g.sum(g.mul(y, g.constant(probe))).item();
  };
  Param p("x", x0);
  Graph g;
  Tensor y = op(g, g.param(p));
  g.backward(g.sum(g.mul(y, g.constant(probe))));
  const Matrix grad = g.param_grad(p);
  double worst = 0.0;
  for (std::size_t i = 0; i < x0.size(); ++i) {
    const double numeric = central_difference(value, x0, i, 1e-6);
    const double err = std::abs(grad[i] - numeric) / std::max({1.0, std::abs(grad[i]), std::abs(numeric)});
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace

TEST_CASE("matmul with the identity returns the other operand") {
  std::mt19937_64 rng(1);
  const Matrix a = test::random_matrix(3, 4, rng);
  Graph g;
  Tensor y = g.matmul(g.constant(Matrix::identity(3)), g.constant(a));
  CHECK(y.values() == a);
}

TEST_CASE("softmax of a zero row is uniform") {
  Graph g;
  Tensor y = g.softmax_rows(g.constant(Matrix::row({0.0, 0.0, 0.0})));
  for (double v : y.values().values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("tanh at zero has value 0 and derivative 1") {
  Param x("x", Matrix(1, 1, 0.0));
  Graph g;
  Tensor y = g.tanh(g.param(x));
  CHECK(y.item() == 0.0);
  g.backward(y);
  CHECK(g.param_grad(x)[0] == doctest::Approx(1.0));
}

TEST_CASE("backward of sum gives ones and of sum of squares gives 2x") {
  Param x("x", Matrix::row({1.0, 2.0}));
  Graph g;
  Tensor t = g.param(x);
  g.backward(g.sum(t));
  CHECK(g.param_grad(x) == Matrix::row({1.0, 1.0}));

  Graph h;
  Tensor u = h.param(x);
  h.backward(h.sum(h.mul(u, u)));
  CHECK(h.param_grad(x) == Matrix::row({2.0, 4.0}));
}

TEST_CASE("gradients start at zero and unreachable leaves stay zero") {
  Param x("x", Matrix::row({1.0, -1.0}));
  Param unused("unused", Matrix::row({3.0}));
  Graph g;
  Tensor a = g.param(x);
  Tensor b = g.param(unused);
  Tensor loss = g.sum(g.exp(a));
  for (double v : g.grad(a.id()).values()) CHECK(v == 0.0);
  g.backward(loss);
  CHECK(g.param_grad(unused)[0] == 0.0);
  CHECK(b.grad()[0] == 0.0);
  CHECK(g.param_grad(x)[0] == doctest::Approx(std::exp(1.0)));
}

TEST_CASE("non-scalar loss is rejected") {
  Graph g;
  Tensor y = g.constant(Matrix::row({1.0, 2.0}));
  CHECK_THROWS_WITH_AS(g.backward(y), doctest::Contains("1x1"), std::invalid_argument);
}

TEST_CASE("shape mismatch names both shapes") {
  Graph g;
  Tensor a = g.constant(Matrix(2, 3));
  Tensor b = g.constant(Matrix(2, 3));
  CHECK_THROWS_WITH_AS(g.matmul(a, b), doctest::Contains("2x3"), std::invalid_argument);
  Tensor c = g.constant(Matrix(3, 2));
  CHECK_THROWS_WITH_AS(g.add(a, c), doctest::Contains("3x2"), std::invalid_argument);
}

TEST_CASE("exp and log clamp their inputs") {
  Param x("x", Matrix::row({100.0, -100.0}));
  Graph g;
  Tensor y = g.exp(g.param(x));
  CHECK(y.values()[0] == doctest::Approx(std::exp(ad::kExpClamp)));
  CHECK(y.values()[1] == doctest::Approx(std::exp(-ad::kExpClamp)));
  g.backward(g.sum(y));
  CHECK(g.param_grad(x)[0] == 0.0);
  CHECK(g.param_grad(x)[1] == 0.0);

  Graph h;
  Tensor z = h.log(h.constant(Matrix::row({0.0})));
  CHECK(z.item() == doctest::Approx(std::log(ad::kLogFloor)));
}

TEST_CASE("apply dispatches to the named primitive") {
  std::mt19937_64 rng(2);
  const Matrix a = test::random_matrix(2, 3, rng);
  const Matrix b = test::random_matrix(2, 3, rng);
  Graph g;
  Tensor ta = g.constant(a), tb = g.constant(b);
  const Tensor ins[] = {ta, tb};
  CHECK(g.apply(ad::Op::kAdd, ins).values() == g.add(ta, tb).values());
  CHECK(g.apply(ad::Op::kMulElem, ins).values() == g.mul(ta, tb).values());
  const Tensor one[] = {ta};
  CHECK(g.apply(ad::Op::kTanh, one).values() == g.tanh(ta).values());
  CHECK(g.apply(ad::Op::kSum, one).item() == g.sum(ta).item());
  CHECK_THROWS_AS(g.apply(ad::Op::kScale, one), std::invalid_argument);
}

TEST_CASE("every primitive matches central differences on random inputs") {
  std::mt19937_64 rng(3);
  const Matrix x = test::random_matrix(2, 3, rng);
  const Matrix other = test::random_matrix(2, 3, rng);
  const Matrix right = test::random_matrix(3, 4, rng);
  const Matrix row = test::random_matrix(1, 3, rng);
  const Matrix pos = test::random_matrix(2, 3, rng, 0.5, 2.0);
  const Matrix p23 = test::random_matrix(2, 3, rng);
  const Matrix p24 = test::random_matrix(2, 4, rng);
  const Matrix p22 = test::random_matrix(2, 2, rng);
  const Matrix p11 = test::random_matrix(1, 1, rng);
  const Matrix p43 = test::random_matrix(4, 3, rng);
  const double tol = 1e-5;

  CHECK(unary_error([&](Graph& g, Tensor t) { return g.matmul(t, g.constant(right)); }, x, p24) < tol);
  CHECK(unary_error([&](Graph& g, Tensor t) { return g.matmul(g.constant(p22), t); }, x, p23) < tol);
  CHECK(unary_error([&](Graph& g, Tensor t) { return g.add(t, g.constant(other)); }, x, p23) < tol);
  CHECK(unary_error([&](Graph& g, Tensor t) { return g.add(g.constant(other), t); }, row, p23) < tol);
  CHECK(unary_error([&](Graph& g, Tensor t) { return g.sub(g.constant(other), t); }, x, p23) < tol);
  CHECK(unary_error([&](Graph& g, Tensor t) { return g.mul(t, t); }, x, p23) < tol);
  CHECK(unary_error([&](Graph& g, Tensor t) { return g.tanh(t); }, x, p23) < tol);
  CHECK(unary_error([&](Graph& g, Tensor t) { return g.sigmoid(t); }, x, p23) < tol);
  CHECK(unary_error([&](Graph& g, Tensor t) { return g.exp(t); }, x, p23) < tol);
  CHECK(unary_error([&](Graph& g, Tensor t) { return g.log(t); }, pos, p23) < tol);
  CHECK(unary_error([&](Graph& g, Tensor t) { return g.softmax_rows(t); }, x, p23) < tol);
  CHECK(unary_error([&](Graph& g, Tensor t) {
          const Tensor parts[] = {t, g.constant(p22), t};
          return g.concat_cols(parts);
        }, x, Matrix(2, 8, 0.7)) < tol);
  CHECK(unary_error([&](Graph& g, Tensor t) {
          const Tensor parts[] = {t, g.constant(other)};
          return g.concat_rows(parts);
        }, x, p43) < tol);
  CHECK(unary_error([&](Graph& g, Tensor t) { return g.slice_cols(t, 1, 2); }, x, p22) < tol);
  CHECK(unary_error([&](Graph& g, Tensor t) {
          const std::size_t rows[] = {1, 0, 1};
          return g.gather_rows(t, rows);
        }, x, test::random_matrix(3, 3, rng)) < tol);
  CHECK(unary_error([&](Graph& g, Tensor t) { return g.sum(t); }, x, p11) < tol);
  CHECK(unary_error([&](Graph& g, Tensor t) { return g.mean(t); }, x, p11) < tol);
  CHECK(unary_error([&](Graph& g, Tensor t) { return g.scale(t, -2.5); }, x, p23) < tol);
  CHECK(unary_error([&](Graph& g, Tensor t) { return g.clamp(t, -1.0, 1.0); },
                    Matrix::row({-1.7, 0.3, 1.4}), Matrix::row({0.2, -0.9, 0.4})) < tol);
  CHECK(unary_error([&](Graph& g, Tensor t) {
          const Tensor ins[] = {g.sum(t)};
          const double s = g.sum(t).item();
          const double d[] = {std::cos(s)};
          return g.scalar_fn(ins, std::sin(s), d);
        }, x, p11) < tol);
}

TEST_CASE("fused LSTM cell matches central differences in every input") {
  std::mt19937_64 rng(4);
  const std::size_t d = 2;
  const Matrix pre = test::random_matrix(3, 4 * d, rng);
  const Matrix state = test::random_matrix(1, 2 * d, rng);
  const Matrix wh = test::random_matrix(d, 4 * d, rng);
  const Matrix probe = test::random_matrix(1, 2 * d, rng);
  CHECK(unary_error([&](Graph& g, Tensor t) {
          return g.lstm_cell(t, 1, g.constant(state), g.constant(wh));
        }, pre, probe) < 1e-5);
  CHECK(unary_error([&](Graph& g, Tensor t) {
          return g.lstm_cell(g.constant(pre), 2, t, g.constant(wh));
        }, state, probe) < 1e-5);
  CHECK(unary_error([&](Graph& g, Tensor t) {
          return g.lstm_cell(g.constant(pre), 0, g.constant(state), t);
        }, wh, probe) < 1e-5);
}

TEST_CASE("random three-layer composition matches finite differences") {
  std::mt19937_64 rng(5);
  Param w1 = test::random_param("w1", 4, 5, rng, -1.0, 1.0);
  Param b1 = test::random_param("b1", 1, 5, rng, -1.0, 1.0);
  Param w2 = test::random_param("w2", 5, 3, rng, -1.0, 1.0);
  Param w3 = test::random_param("w3", 3, 1, rng, -1.0, 1.0);
  const Matrix x = test::random_matrix(2, 4, rng);
  auto f = [&](Graph& g) {
    Tensor h1 = g.tanh(g.add(g.matmul(g.constant(x), g.param(w1)), g.param(b1)));
    Tensor h2 = g.sigmoid(g.matmul(h1, g.param(w2)));
    Tensor h3 = g.exp(g.matmul(g.softmax_rows(h2), g.param(w3)));
    return g.mean(g.log(h3));
  };
  Param* params[] = {&w1, &b1, &w2, &w3};
  const auto r = ad::grad_check(f, params, 1e-6);
  CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("grad_check is exact for linear functions and zero for constants") {
  std::mt19937_64 rng(6);
  Param w = test::random_param("w", 3, 4, rng);
  const Matrix x = test::random_matrix(4, 1, rng);
  Param* params[] = {&w};
  const auto linear = ad::grad_check([&](Graph& g) { return g.sum(g.matmul(g.param(w), g.constant(x))); },
                                     params, 1e-6);
  CHECK(linear.max_rel_error < 1e-8);
  const auto constant = ad::grad_check([&](Graph& g) {
    g.param(w);
    return g.scalar(4.0);
  }, params, 1e-6);
  CHECK(constant.max_rel_error == 0.0);
  CHECK(constant.analytic == 0.0);
  CHECK(constant.numeric == 0.0);
}

TEST_CASE("grad_check reports the perturbation that made f non-finite") {
  Param w("w", Matrix::row({0.0}));
  Param* params[] = {&w};
  auto f = [&](Graph& g) {
    Tensor t = g.param(w);
    const double v = t.item();
    const double value = v > 0 ? std::nan("") : v;
    const Tensor ins[] = {t};
    const double d[] = {1.0};
    return g.scalar_fn(ins, value, d);
  };
  CHECK_THROWS_WITH_AS(ad::grad_check(f, params, 1e-3), doctest::Contains("w[0]"),
                       std::runtime_error);
}

TEST_CASE("backward is linear in the loss") {
  std::mt19937_64 rng(7);
  Param x = test::random_param("x", 2, 3, rng);
  auto grads = [&](double a, double b) {
    Graph g;
    Tensor t = g.param(x);
    Tensor f = g.sum(g.tanh(g.mul(t, t)));
    Tensor h = g.sum(g.exp(g.scale(t, 0.3)));
    g.backward(g.add(g.scale(f, a), g.scale(h, b)));
    return g.param_grad(x);
  };
  const Matrix gf = grads(1.0, 0.0), gh = grads(0.0, 1.0), mix = grads(2.0, -3.0);
  for (std::size_t i = 0; i < mix.size(); ++i) {
    CHECK(std::abs(mix[i] - (2.0 * gf[i] - 3.0 * gh[i])) < 1e-12);
  }
}

TEST_CASE("repeated backward yields identical gradients") {
  std::mt19937_64 rng(8);
  Param x = test::random_param("x", 2, 2, rng);
  Graph g;
  Tensor t = g.param(x);
  Tensor loss = g.sum(g.matmul(g.tanh(t), t));
  g.backward(loss);
  const Matrix first = g.param_grad(x);
  g.backward(loss);
  CHECK(g.param_grad(x) == first);
}

TEST_CASE("shared parameters accumulate gradient across uses") {
  Param w("w", Matrix::row({0.5}));
  Graph g;
  Tensor a = g.param(w);
  Tensor b = g.param(w);
  CHECK(a.id() == b.id());
  g.backward(g.sum(g.add(g.mul(a, g.scalar(2.0)), g.mul(b, g.scalar(3.0)))));
  w.zero_grad();
  g.accumulate_param_grads();
  CHECK(w.grad[0] == doctest::Approx(5.0));
}

TEST_CASE("replaying the forward pass is bit-identical") {
  std::mt19937_64 rng(9);
  Param w = test::random_param("w", 3, 3, rng);
  Graph g;
  Tensor t = g.param(w);
  Tensor y = g.softmax_rows(g.matmul(g.tanh(t), g.exp(g.scale(t, 0.1))));
  const Matrix before = y.values();
  g.replay_forward();
  CHECK(y.values() == before);
}

TEST_CASE("pinned row zero receives no gradient") {
  Param table("table", Matrix(3, 2, 1.0));
  table.pin_row0 = true;
  Graph g;
  const std::size_t rows[] = {0, 2, 0};
  g.backward(g.sum(g.gather_rows(g.param(table), rows)));
  table.zero_grad();
  g.accumulate_param_grads();
  CHECK(table.grad(0, 0) == 0.0);
  CHECK(table.grad(2, 1) == 1.0);
}
