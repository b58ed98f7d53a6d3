#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "aicmet/pk/dynamics.hpp"
#include "aicmet/rng.hpp"

using namespace aicmet;
using namespace aicmet::pk;

namespace {

// Bateman closed form for oral dosing, one compartment.
double bateman(double u, double ka, double ke, double t) {
  return u * ka / (ka - ke) * (std::exp(-ke * t) - std::exp(-ka * t));
}

std::vector<double> theta_const(double ka, double ke, double v, std::vector<double> transfer = {}) {
  std::vector<double> th{std::log(ka), std::log(ke), std::log(v)};
  for (double k : transfer) th.push_back(std::log(k));
  return th;
}

std::vector<double> uniform_grid(double tmax, int steps) {
  std::vector<double> g(static_cast<size_t>(steps) + 1);
  for (int i = 0; i <= steps; ++i) g[static_cast<size_t>(i)] = tmax * i / steps;
  return g;
}

// Second, independent evaluation of the vector field for cross-checking.
std::vector<double> derivative_reference(const std::vector<double>& x, double ka, double ke,
                                         const std::vector<double>& kp,
                                         const std::vector<double>& km) {
  const size_t P = kp.size();
  std::vector<double> d(2 + P, 0.0);
  d[0] = -ka * x[0];
  d[1] = ka * x[0] - ke * x[1];
  for (size_t j = 0; j < P; ++j) {
    d[1] += -kp[j] * x[1] + km[j] * x[2 + j];
    d[2 + j] = kp[j] * x[1] - km[j] * x[2 + j];
  }
  return d;
}

}  // namespace

TEST_CASE("derivative matches hand evaluation") {
  SECTION("one compartment, elimination off") {
    CompartmentState s{1.0, 0.0, {}};
    KineticParams p{1.0, 0.0 + 1e-300, 10.0, {}, {}};
    p.k_e = 0.0;  // direct evaluation with elimination off
    CompartmentState d = derivative(s, p);
    REQUIRE(d.gut == -1.0);
    REQUIRE(d.central == 1.0);
  }
  SECTION("zero state is a fixed point") {
    CompartmentState s{0.0, 0.0, {0.0}};
    KineticParams p{0.7, 0.3, 5.0, {0.4}, {0.9}};
    CompartmentState d = derivative(s, p);
    REQUIRE(d.gut == 0.0);
    REQUIRE(d.central == 0.0);
    REQUIRE(d.peripheral[0] == 0.0);
  }
  SECTION("one peripheral compartment") {
    CompartmentState s{0.0, 2.0, {1.0}};
    KineticParams p{1.0, 0.5, 10.0, {0.3}, {0.2}};
    CompartmentState d = derivative(s, p);
    REQUIRE(d.central == Catch::Approx(-1.4));
    REQUIRE(d.peripheral[0] == Catch::Approx(0.4));
  }
}

TEST_CASE("derivative agrees with an independent implementation") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const int P = static_cast<int>(rng.uniform_int(0, 2));
    CompartmentState s;
    s.gut = std::exp(rng.normal());
    s.central = std::exp(rng.normal());
    KineticParams p;
    p.k_a = std::exp(rng.normal());
    p.k_e = std::exp(rng.normal());
    p.volume = 1.0;
    std::vector<double> x{s.gut, s.central};
    for (int j = 0; j < P; ++j) {
      s.peripheral.push_back(std::exp(rng.normal()));
      p.k_plus.push_back(std::exp(rng.normal()));
      p.k_minus.push_back(std::exp(rng.normal()));
      x.push_back(s.peripheral.back());
    }
    const CompartmentState d = derivative(s, p);
    const std::vector<double> ref = derivative_reference(x, p.k_a, p.k_e, p.k_plus, p.k_minus);
    REQUIRE(d.gut == Catch::Approx(ref[0]).margin(1e-12));
    REQUIRE(d.central == Catch::Approx(ref[1]).margin(1e-12));
    for (int j = 0; j < P; ++j)
      REQUIRE(d.peripheral[static_cast<size_t>(j)] ==
              Catch::Approx(ref[static_cast<size_t>(2 + j)]).margin(1e-12));
  }
}

TEST_CASE("derivative is linear in the state") {
  Rng rng(7);
  KineticParams p{1.3, 0.2, 8.0, {0.4}, {0.6}};
  for (int trial = 0; trial < 50; ++trial) {
    CompartmentState x{rng.normal(), rng.normal(), {rng.normal()}};
    CompartmentState y{rng.normal(), rng.normal(), {rng.normal()}};
    const double a = rng.normal(), b = rng.normal();
    CompartmentState mix{a * x.gut + b * y.gut, a * x.central + b * y.central,
                         {a * x.peripheral[0] + b * y.peripheral[0]}};
    const CompartmentState dmix = derivative(mix, p);
    const CompartmentState dx = derivative(x, p);
    const CompartmentState dy = derivative(y, p);
    REQUIRE(dmix.gut == Catch::Approx(a * dx.gut + b * dy.gut).margin(1e-12));
    REQUIRE(dmix.central == Catch::Approx(a * dx.central + b * dy.central).margin(1e-12));
    REQUIRE(dmix.peripheral[0] ==
            Catch::Approx(a * dx.peripheral[0] + b * dy.peripheral[0]).margin(1e-12));
  }
}

TEST_CASE("derivative rejects dimension mismatch") {
  CompartmentState s{1.0, 0.0, {0.0}};
  KineticParams p{1.0, 0.1, 10.0, {}, {}};
  REQUIRE_THROWS_AS(derivative(s, p), ModelError);
}

TEST_CASE("apply_dose initializes by route") {
  CompartmentState oral = apply_dose({100.0, Route::kOral}, 1);
  REQUIRE(oral.gut == 100.0);
  REQUIRE(oral.central == 0.0);
  REQUIRE(oral.peripheral == std::vector<double>{0.0});

  CompartmentState iv = apply_dose({100.0, Route::kIntravenous}, 0);
  REQUIRE(iv.gut == 0.0);
  REQUIRE(iv.central == 100.0);

  CompartmentState oral2 = apply_dose({50.0, Route::kOral}, 2);
  REQUIRE(oral2.gut == 50.0);
  REQUIRE(oral2.peripheral == std::vector<double>{0.0, 0.0});

  REQUIRE_THROWS_AS(apply_dose({0.0, Route::kOral}, 0), ModelError);
}

TEST_CASE("integrate_path matches the Bateman oracle") {
  const double u = 100.0, ka = 1.0, ke = 0.1;
  const auto theta = theta_const(ka, ke, 10.0);
  const auto grid = uniform_grid(24.0, 512);
  const auto states = integrate_path(apply_dose({u, Route::kOral}, 0), theta, grid);

  double max_rel = 0.0;
  for (size_t i = 1; i < grid.size(); ++i) {
    const double exact = bateman(u, ka, ke, grid[i]);
    max_rel = std::max(max_rel, std::fabs(states[i].central - exact) / exact);
  }
  REQUIRE(max_rel < 1e-6);

  // spot value from the closed form
  const auto one = integrate_path(apply_dose({u, Route::kOral}, 0), theta, uniform_grid(1.0, 64));
  REQUIRE(one.back().central == Catch::Approx(bateman(u, ka, ke, 1.0)).epsilon(1e-8));
  REQUIRE(bateman(u, ka, ke, 1.0) == Catch::Approx(59.66).margin(0.005));

  // halving the step shrinks the error by at least 12x (order 4)
  const auto coarse = integrate_path(apply_dose({u, Route::kOral}, 0), theta, uniform_grid(24.0, 256));
  double max_rel_coarse = 0.0;
  const auto cgrid = uniform_grid(24.0, 256);
  for (size_t i = 1; i < cgrid.size(); ++i) {
    const double exact = bateman(u, ka, ke, cgrid[i]);
    max_rel_coarse = std::max(max_rel_coarse, std::fabs(coarse[i].central - exact) / exact);
  }
  REQUIRE(max_rel_coarse / max_rel >= 12.0);
}

TEST_CASE("mass is conserved when elimination is off") {
  const auto theta = theta_const(0.8, 1e-300, 10.0, {0.4, 0.2});  // k_e = exp(log(1e-300)) ~ 0
  std::vector<double> th = theta;
  th[1] = -1e9;  // k_e = exp(-1e9) == 0 exactly in double
  const auto grid = uniform_grid(30.0, 256);
  const auto states = integrate_path(apply_dose({42.0, Route::kOral}, 1), th, grid);
  for (const auto& s : states) REQUIRE(s.total() == Catch::Approx(42.0).epsilon(1e-9));
}

TEST_CASE("states stay nonnegative and zero dose path stays zero") {
  const auto theta = theta_const(2.5, 0.9, 3.0, {1.0, 0.05});
  const auto grid = uniform_grid(50.0, 512);
  const auto states = integrate_path(apply_dose({1.0, Route::kOral}, 1), theta, grid);
  for (const auto& s : states) {
    REQUIRE(s.gut >= -1e-12);
    REQUIRE(s.central >= -1e-12);
    for (double p : s.peripheral) REQUIRE(p >= -1e-12);
  }

  CompartmentState zero;
  zero.peripheral = {0.0};
  const auto flat = integrate_path(zero, theta, grid);
  for (const auto& s : flat) REQUIRE(s.total() == 0.0);
}

TEST_CASE("numeric blowup carries the offending time") {
  // absurd absorption rate overflows the state within a step
  const auto theta = theta_const(std::exp(200.0), 0.1, 10.0);
  std::vector<double> th{200.0, std::log(0.1), std::log(10.0)};
  const auto grid = uniform_grid(10.0, 4);
  try {
    integrate_path(apply_dose({100.0, Route::kOral}, 0), th, grid);
    FAIL("expected NumericBlowupError");
  } catch (const NumericBlowupError& e) {
    REQUIRE(e.time > 0.0);
    REQUIRE(e.time <= 10.0);
  }
}

TEST_CASE("grid validation") {
  const auto theta = theta_const(1.0, 0.1, 10.0);
  REQUIRE_THROWS_AS(integrate_path(apply_dose({1.0, Route::kOral}, 0), theta, {0.5, 1.0}),
                    ModelError);
  REQUIRE_THROWS_AS(integrate_path(apply_dose({1.0, Route::kOral}, 0), theta, {0.0, 1.0, 1.0}),
                    ModelError);
}
