#include <doctest.h>

#include "gradcheck.hpp"

using namespace milecf;
using namespace milecf::testing;


namespace {

Mat row(std::initializer_list<double> xs) {
  Mat m(1, static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) m(0, i++) = x;
  return m;
}

}  // namespace

TEST_CASE("softmax of equal logits is uniform") {
  Graph g;
  auto y = softmax(g.constant(row({0, 0, 0})));
  for (int i = 0; i < 3; ++i) CHECK(y.value()(0, i) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("softmax rows are distributions along the reduced axis") {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    Graph g;
    const Mat x = random_matrix(4, 7, rng, -30, 30);
    auto r = softmax(g.constant(x), 1);
    auto c = softmax(g.constant(x), 0);
    CHECK((r.value().array() >= 0).all());
    CHECK((c.value().array() >= 0).all());
    for (int i = 0; i < 4; ++i) CHECK(std::abs(r.value().row(i).sum() - 1.0) < 1e-9);
    for (int j = 0; j < 7; ++j) CHECK(std::abs(c.value().col(j).sum() - 1.0) < 1e-9);
  }
}

TEST_CASE("embedding_lookup with identity table picks the row") {
  Graph g;
  auto t = g.constant(Mat::Identity(3, 3));
  const int idx[] = {2};
  auto y = embedding_lookup(t, std::span<const int>(idx));
  CHECK(y.value() == row({0, 0, 1}));
  const int bad[] = {3};
  CHECK_THROWS_AS(embedding_lookup(t, std::span<const int>(bad)), IndexOutOfBounds);
}

TEST_CASE("cross_entropy matches the closed form") {
  Graph g;
  const int label[] = {0};
  auto loss = cross_entropy(g.constant(row({2, 0})), std::span<const int>(label));
  // log(1 + e^-2), evaluated to 30 digits
  CHECK(std::abs(loss.item() - 0.126928011042972496) < 1e-15);
  const int bad[] = {2};
  CHECK_THROWS_AS(cross_entropy(g.constant(row({2, 0})), std::span<const int>(bad)), IndexOutOfBounds);
}

TEST_CASE("cross_entropy ignores masked logits") {
  Graph g;
  const int label[] = {1};
  auto loss = cross_entropy(g.constant(row({-1e30, 0, 0})), std::span<const int>(label));
  CHECK(loss.item() == doctest::Approx(std::log(2.0)));
}

TEST_CASE("hinge margin loss") {
  Graph g;
  CHECK(hinge(g.constant(row({0, 3, 1})), 1).item() == 0.0);
  CHECK(hinge(g.constant(row({0, 0, 0})), 1).item() == 1.0);
  CHECK(hinge(g.constant(row({2, 0, 1})), 1).item() == 3.0);
  CHECK(hinge(g.constant(row({0, 0.5})), 1, 0.25).item() == 0.0);
  CHECK_THROWS_AS(hinge(g.constant(row({0, 0})), 2), IndexOutOfBounds);
}

TEST_CASE("shape errors") {
  Graph g;
  auto a = g.constant(Mat::Zero(2, 3));
  auto b = g.constant(Mat::Zero(2, 3));
  CHECK_THROWS_AS(matmul(a, b), ShapeMismatch);
  CHECK_THROWS_AS(add(a, g.constant(Mat::Zero(3, 3))), ShapeMismatch);
  CHECK_THROWS_AS(concat_rows(a, g.constant(Mat::Zero(1, 2))), ShapeMismatch);
  CHECK_THROWS_AS(slice_cols(a, 2, 2), IndexOutOfBounds);
  CHECK_THROWS_AS(det(a), ShapeMismatch);
  CHECK_NOTHROW(add(a, g.constant(Mat::Zero(1, 3))));  // bias row
}

TEST_CASE("backward: linear and quadratic") {
  Param x("x", row({1, -2, 3, 4}));
  {
    Graph g;
    auto loss = sum(g.parameter(x));
    g.backward(loss);
    CHECK(g.size() == 0);  // reset after backward
  }
  CHECK(x.grad == row({1, 1, 1, 1}));

  Param y("y", row({1, -2}));
  Graph g;
  auto v = g.parameter(y);
  g.backward(scale(sum(mul(v, v)), 0.5));
  CHECK(y.grad == row({1, -2}));
}

TEST_CASE("backward error paths") {
  Graph g;
  CHECK_THROWS_AS(g.backward(Var{}), InvalidArgument);
  auto a = g.constant(Mat::Ones(2, 2));
  CHECK_THROWS_AS(g.backward(a), NonScalarLoss);
}

TEST_CASE("a parameter bound twice accumulates") {
  Param p("p", row({3}));
  Graph g;
  auto a = g.parameter(p);
  auto b = g.parameter(p);
  g.backward(mul(a, b));
  CHECK(p.grad(0, 0) == 6.0);
}

TEST_CASE("dropout") {
  Rng rng(9);
  Graph g;
  auto x = g.constant(Mat::Ones(20, 20));
  CHECK(dropout(x, 0.1, false, rng).id() == x.id());
  auto d = dropout(x, 0.5, true, rng);
  const auto zeros = (d.value().array() == 0).count();
  CHECK(zeros > 100);
  CHECK(zeros < 300);
  CHECK(((d.value().array() == 0) || (d.value().array() == 2)).all());
  CHECK_THROWS_AS(dropout(x, 1.0, true, rng), InvalidArgument);
}

TEST_CASE("dpp determinant kernel") {
  Graph g;
  Mat k(2, 2);
  k << 1, 0.25, 0.25, 1;
  CHECK(det(g.constant(k)).item() == doctest::Approx(1 - 0.0625));
  CHECK(num::detail::adjugate<double>(Mat::Ones(2, 2)) == (Mat(2, 2) << 1, -1, -1, 1).finished());
}

// ---------------------------------------------------------------------------
// Finite-difference checks for every differentiable op.

TEST_CASE("gradient check: every op") {
  for (const auto& c : op_cases()) {
    const auto r = check_op(c);
    INFO(c.name << " max rel error " << r.max_rel_error);
    CHECK(r.max_rel_error < c.tol);
  }
}

TEST_CASE("gradient check: one LSTM step") {
  const auto r = check_lstm_step();
  INFO("max rel error " << r.max_rel_error);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("backward is deterministic") {
  Rng rng(4);
  Param a("a", random_matrix(3, 3, rng));
  Mat first;
  for (int run = 0; run < 2; ++run) {
    a.zero_grad();
    Graph g;
    auto v = g.parameter(a);
    g.backward(sum(num::tanh(matmul(v, v))));
    if (run == 0) first = a.grad;
    else CHECK(a.grad == first);
  }
}

TEST_CASE("adam") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    Param p("p", row({0.3, -0.2}));
    p.zero_grad();
    p.has_grad = true;
    Param* ptrs[] = {&p};
    num::Adam<double> adam;
    adam.step(ptrs);
    CHECK(p.value == row({0.3, -0.2}));
  }
  SUBCASE("one step from p=0 with g=1") {
    Param p("p", row({0.0}));
    p.grad = row({1.0});
    p.has_grad = true;
    Param* ptrs[] = {&p};
    num::Adam<double> adam;
    adam.step(ptrs);
    // -lr * m_hat / (sqrt(v_hat) + eps) with m_hat = v_hat = 1
    CHECK(p.value(0, 0) == doctest::Approx(-0.005 / (1.0 + 1e-8)).epsilon(1e-14));
    CHECK(p.grad(0, 0) == 0.0);
    CHECK_FALSE(p.has_grad);
    CHECK(adam.step_count() == 1);
  }
  SUBCASE("two identical steps move monotonically against the gradient") {
    Param p("p", row({1.0}));
    Param* ptrs[] = {&p};
    num::Adam<double> adam;
    double prev = p.value(0, 0);
    for (int i = 0; i < 2; ++i) {
      p.grad = row({2.0});
      p.has_grad = true;
      adam.step(ptrs);
      CHECK(p.value(0, 0) < prev);
      prev = p.value(0, 0);
    }
  }
  SUBCASE("missing gradient") {
    Param p("p", row({1.0}));
    Param* ptrs[] = {&p};
    num::Adam<double> adam;
    CHECK_THROWS_AS(adam.step(ptrs), MissingGradient);
  }
}
