#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "aicmet/gradcheck.hpp"
#include "aicmet/params.hpp"
#include "aicmet/rng.hpp"
#include "aicmet/tape.hpp"
#include "aicmet/tensor.hpp"

using namespace aicmet;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.data) v = scale * rng.normal();
  return t;
}

}  // namespace

TEST_CASE("softmax of a constant row is uniform") {
  Tape t;
  Var y = softmax(t.constant(Tensor::vec({0.0, 0.0, 0.0})));
  for (int i = 0; i < 3; ++i) REQUIRE(y.value().at(i) == Catch::Approx(1.0 / 3).margin(1e-15));
}

TEST_CASE("softmax rows sum to one and stay positive") {
  Rng rng(11);
  Tape t;
  Var y = softmax(t.constant(random_tensor({5, 7}, rng, 40.0)));  // large logits: stability
  for (int i = 0; i < 5; ++i) {
    double s = 0.0;
    for (int j = 0; j < 7; ++j) {
      REQUIRE(y.value().at(i, j) > 0.0);
      s += y.value().at(i, j);
    }
    REQUIRE(s == Catch::Approx(1.0).margin(1e-12));
  }
}

TEST_CASE("matmul identity and exp/log inverse pair") {
  Rng rng(3);
  Tape t;
  Tensor eye = Tensor::zeros({3, 3});
  for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
  Tensor a = random_tensor({3, 4}, rng);
  Var prod = matmul(t.constant(eye), t.constant(a));
  for (size_t i = 0; i < a.data.size(); ++i) REQUIRE(prod.value().data[i] == a.data[i]);

  Tensor x = random_tensor({6}, rng);
  for (auto& v : x.data) v = std::exp(v);  // positive
  Var back = vexp(vlog(t.constant(x)));
  for (size_t i = 0; i < x.data.size(); ++i)
    REQUIRE(back.value().data[i] == Catch::Approx(x.data[i]).epsilon(1e-12));
}

TEST_CASE("backward of sum of squares") {
  ParameterStore ps;
  ps.add("x", Tensor::vec({1.0, -2.0}));
  Tape t(&ps);
  Var loss = sum_all(vsquare(t.param("x")));
  t.backward(loss);
  t.accumulate_param_grads(ps);
  REQUIRE(ps.get("x").grad.at(0) == Catch::Approx(2.0));
  REQUIRE(ps.get("x").grad.at(1) == Catch::Approx(-4.0));
}

TEST_CASE("unused parameter receives exactly zero gradient") {
  ParameterStore ps;
  ps.add("used", Tensor::vec({1.5}));
  ps.add("unused", Tensor::vec({2.5}));
  Tape t(&ps);
  Var unused = t.param("unused");
  (void)unused;
  Var loss = sum_all(vsquare(t.param("used")));
  t.backward(loss);
  t.accumulate_param_grads(ps);
  REQUIRE(ps.get("unused").grad.at(0) == 0.0);
}

TEST_CASE("backward demands a scalar loss and a nonempty tape") {
  ParameterStore ps;
  ps.add("x", Tensor::vec({1.0, 2.0}));
  Tape t(&ps);
  Var x = t.param("x");
  REQUIRE_THROWS_AS(t.backward(x), UsageError);
  Tape empty;
  REQUIRE_THROWS_AS(empty.backward(Var{&empty, 0}), UsageError);
}

TEST_CASE("shape mismatches name the op kind") {
  Tape t;
  Var a = t.constant(Tensor::zeros({2, 3}));
  Var b = t.constant(Tensor::zeros({3, 3}));
  REQUIRE_THROWS_WITH(add(a, b), Catch::Matchers::ContainsSubstring("add"));
  REQUIRE_THROWS_WITH(matmul(a, a), Catch::Matchers::ContainsSubstring("matmul"));
  REQUIRE_THROWS_WITH(slice_rows(a, 0, 5), Catch::Matchers::ContainsSubstring("slice"));
}

TEST_CASE("gradient check covers every op kind") {
  Rng rng(17);
  ParameterStore ps;
  ps.add("a", random_tensor({3, 4}, rng, 0.5));
  ps.add("b", random_tensor({3, 4}, rng, 0.5));
  ps.add("m", random_tensor({4, 5}, rng, 0.5));
  ps.add("w54", random_tensor({5, 4}, rng, 0.5));
  ps.add("b5", random_tensor({5}, rng, 0.5));
  ps.add("v", random_tensor({4}, rng, 0.5));
  ps.add("s", Tensor::scalar(0.7));

  auto check = [&](const char* what, const std::function<Var(Tape&)>& build, double tol = 1e-7) {
    INFO(what);
    GradCheckReport rep = grad_check(build, ps);
    REQUIRE(rep.pass(tol));
  };

  check("add/mul/sub", [&](Tape& t) {
    Var a = t.param("a"), b = t.param("b");
    return sum_all(mul(add(a, b), sub(a, b)));
  });
  check("matmul/transpose", [&](Tape& t) {
    return sum_all(vsquare(matmul(t.param("a"), t.param("m"))));
  });
  check("linear/affine", [&](Tape& t) {
    return sum_all(vtanh(affine(t.param("a"), t.param("w54"), t.param("b5"))));
  });
  check("exp/log/scale", [&](Tape& t) {
    return sum_all(vlog(add_const(vexp(scale(t.param("a"), 0.3)), 1.0)));
  });
  check("tanh/sigmoid/square", [&](Tape& t) {
    return sum_all(vsquare(vsigmoid(vtanh(t.param("a")))));
  });
  check("softmax/mean", [&](Tape& t) { return mean_all(vsquare(softmax(t.param("a")))); });
  check("masked softmax", [&](Tape& t) {
    return sum_all(vsquare(softmax_masked(t.param("a"), {1, 0, 1, 1})));
  });
  check("concat/slice", [&](Tape& t) {
    Var a = t.param("a");
    Var c = concat({slice_cols(a, 0, 2), slice_cols(a, 2, 4)}, 1);
    Var r = concat({slice_rows(c, 0, 1), slice_rows(c, 1, 3)}, 0);
    return sum_all(vsquare(r));
  });
  check("broadcasts/row_mean", [&](Tape& t) {
    Var a = t.param("a");
    Var centered = sub(a, bcast_col(row_mean(a), 4));
    Var scaled = mul(centered, bcast_row(t.param("v"), 3));
    return sum_all(vsquare(add(scaled, bcast_scalar(t.param("s"), {3, 4}))));
  });
  check("rsqrt/reshape/slice1d", [&](Tape& t) {
    Var v = t.param("v");
    Var u = rsqrt_eps(vsquare(v), 0.1);
    return sum_all(mul(slice(u, 0, 2), slice(u, 2, 4)));
  });
}

TEST_CASE("affine matches manual computation") {
  // regression for the linear/affine orientation: y = x W^T + b
  Tape t;
  Var x = t.constant(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
  Var w = t.constant(Tensor({2, 3}, {1, 0, 0, 0, 1, 0}));
  Var b = t.constant(Tensor::vec({10.0, 20.0}));
  Var y = affine(x, w, b);
  REQUIRE(y.value().at(0, 0) == 11.0);
  REQUIRE(y.value().at(0, 1) == 22.0);
  REQUIRE(y.value().at(1, 0) == 14.0);
  REQUIRE(y.value().at(1, 1) == 25.0);
}

TEST_CASE("gradient linearity") {
  Rng rng(23);
  ParameterStore ps;
  ps.add("x", random_tensor({4}, rng));

  auto grad_of = [&](double ca, double cb) {
    ps.zero_grads();
    Tape t(&ps);
    Var x = t.param("x");
    Var f = sum_all(vsquare(x));
    Var g = sum_all(vtanh(x));
    t.backward(add(scale(f, ca), scale(g, cb)));
    t.accumulate_param_grads(ps);
    return ps.get("x").grad;
  };
  const Tensor gf = grad_of(1.0, 0.0);
  const Tensor gg = grad_of(0.0, 1.0);
  const Tensor gmix = grad_of(2.0, -3.0);
  for (int i = 0; i < 4; ++i)
    REQUIRE(gmix.at(i) == Catch::Approx(2.0 * gf.at(i) - 3.0 * gg.at(i)).margin(1e-10));
}

TEST_CASE("replaying a tape is bit-identical") {
  Rng rng(29);
  ParameterStore ps;
  ps.add("w", random_tensor({4, 4}, rng));
  ps.add("x", random_tensor({2, 4}, rng));

  auto run = [&]() {
    ps.zero_grads();
    Tape t(&ps);
    Var y = sum_all(softmax(linear(vtanh(t.param("x")), t.param("w"))));
    t.backward(y);
    t.accumulate_param_grads(ps);
    return std::make_pair(y.value().data[0], ps.get("w").grad);
  };
  auto [v1, g1] = run();
  auto [v2, g2] = run();
  REQUIRE(v1 == v2);
  REQUIRE(g1.data == g2.data);
}

TEST_CASE("masked softmax rejects an all-masked axis and ignores masked keys") {
  Tape t;
  Var a = t.constant(Tensor({1, 3}, {1.0, 2.0, 3.0}));
  REQUIRE_THROWS_AS(softmax_masked(a, {0, 0, 0}), UsageError);

  Var b1 = t.constant(Tensor({1, 3}, {1.0, 50.0, 3.0}));
  Var b2 = t.constant(Tensor({1, 3}, {1.0, -7.0, 3.0}));
  Var m1 = softmax_masked(b1, {1, 0, 1});
  Var m2 = softmax_masked(b2, {1, 0, 1});
  REQUIRE(m1.value().data == m2.value().data);  // masked column cannot matter
  REQUIRE(m1.value().at(0, 1) == 0.0);
}

TEST_CASE("quadratic form gradient check is tight") {
  Rng rng(31);
  ParameterStore ps;
  ps.add("x", random_tensor({5}, rng));
  GradCheckReport rep = grad_check(
      [&](Tape& t) {
        Var x = t.param("x");
        return sum_all(vsquare(x));
      },
      ps);
  REQUIRE(rep.pass(1e-9));
}
