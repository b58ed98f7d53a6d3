#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "aicmet/pk/process.hpp"
#include "aicmet/rng.hpp"

using namespace aicmet;
using namespace aicmet::pk;

namespace {

HyperPriorConfig fixed_cfg() {
  HyperPriorConfig cfg;
  cfg.peripheral = {1, 1};
  cfg.individuals = {5, 5};
  return cfg;
}

std::vector<double> uniform_grid(double tmax, int steps) {
  std::vector<double> g(static_cast<size_t>(steps) + 1);
  for (int i = 0; i <= steps; ++i) g[static_cast<size_t>(i)] = tmax * i / steps;
  return g;
}

}  // namespace

TEST_CASE("degenerate uniform ranges pin the draws") {
  HyperPriorConfig cfg = fixed_cfg();
  cfg.stationary_var = {0.0, 0.0};
  Rng rng(1);
  const StudyHyperParams eta = sample_study_hyperparams(cfg, rng);
  REQUIRE(eta.coords.size() == 5);  // P = 1 -> 3 + 2P
  for (const auto& c : eta.coords) REQUIRE(c.sigma == 0.0);
}

TEST_CASE("sigma solved from the stationary-variance draw") {
  HyperPriorConfig cfg = fixed_cfg();
  cfg.lambda_sq = {1.0, 1.0};
  cfg.stationary_var = {0.5, 0.5};
  Rng rng(2);
  const StudyHyperParams eta = sample_study_hyperparams(cfg, rng);
  for (const auto& c : eta.coords) {
    REQUIRE(c.lambda == Catch::Approx(1.0));
    REQUIRE(c.sigma == Catch::Approx(1.0));  // sigma^2 = 2 lambda * 0.5
  }
}

TEST_CASE("population mean draws have the right first moment") {
  HyperPriorConfig cfg = fixed_cfg();
  cfg.m_log_ka = {-1.0, 1.0};
  Rng rng(3);
  double acc = 0.0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    StudyHyperParams eta = sample_study_hyperparams(cfg, rng);
    acc += eta.coords[0].m;
  }
  REQUIRE(acc / n == Catch::Approx(0.0).margin(0.02));
}

TEST_CASE("invalid ranges are configuration errors") {
  HyperPriorConfig cfg = fixed_cfg();
  cfg.mean_sd = {0.5, 0.1};
  Rng rng(4);
  REQUIRE_THROWS_AS(sample_study_hyperparams(cfg, rng), ConfigError);

  HyperPriorConfig cfg2 = fixed_cfg();
  cfg2.lambda_sq = {0.0, 0.0};
  REQUIRE_THROWS_AS(sample_study_hyperparams(cfg2, rng), ConfigError);
}

TEST_CASE("individual means collapse to m when s = 0") {
  HyperPriorConfig cfg = fixed_cfg();
  cfg.mean_sd = {0.0, 0.0};
  Rng rng(5);
  const StudyHyperParams eta = sample_study_hyperparams(cfg, rng);
  const IndividualMeans mu = sample_individual_means(eta, rng);
  REQUIRE(mu.mu.size() == eta.coords.size());
  for (size_t k = 0; k < mu.mu.size(); ++k) REQUIRE(mu.mu[k] == eta.coords[k].m);
}

TEST_CASE("individual mean variance matches s^2") {
  StudyHyperParams eta;
  eta.n_peripheral = 0;
  eta.n_individuals = 1;
  eta.coords = {{0.0, 2.0, 1.0, 0.0}};
  Rng rng(6);
  const int n = 10000;
  double acc = 0.0, acc2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double v = sample_individual_means(eta, rng).mu[0];
    acc += v;
    acc2 += v * v;
  }
  const double mean = acc / n;
  const double var = acc2 / n - mean * mean;
  REQUIRE(var > 3.8);
  REQUIRE(var < 4.2);
}

TEST_CASE("ou_step deterministic mean reversion") {
  Rng rng(7);
  const double out = ou_step(2.0, 0.0, 1.0, 0.0, std::log(2.0), rng);
  REQUIRE(out == Catch::Approx(1.0).margin(1e-14));

  const double fixed = ou_step(3.5, 3.5, 0.7, 0.0, 11.0, rng);
  REQUIRE(fixed == Catch::Approx(3.5).margin(1e-14));
}

TEST_CASE("ou_step reaches the stationary distribution for large dt") {
  Rng rng(8);
  const int n = 20000;
  double acc = 0.0, acc2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double v = ou_step(5.0, 0.0, 1.0, std::sqrt(2.0), 50.0, rng);
    acc += v;
    acc2 += v * v;
  }
  const double mean = acc / n;
  const double var = acc2 / n - mean * mean;
  REQUIRE(mean == Catch::Approx(0.0).margin(3.0 / std::sqrt(static_cast<double>(n))));
  REQUIRE(var == Catch::Approx(1.0).epsilon(0.05));
}

TEST_CASE("two-step OU composition matches a single step in distribution") {
  const double theta0 = 1.7, mu = 0.4, lambda = 0.8, sigma = 0.9;
  const double dt1 = 0.3, dt2 = 1.1;
  const int n = 100000;
  Rng rng(9);
  double acc_two = 0.0, acc2_two = 0.0, acc_one = 0.0, acc2_one = 0.0;
  for (int i = 0; i < n; ++i) {
    const double mid = ou_step(theta0, mu, lambda, sigma, dt1, rng);
    const double two = ou_step(mid, mu, lambda, sigma, dt2, rng);
    const double one = ou_step(theta0, mu, lambda, sigma, dt1 + dt2, rng);
    acc_two += two;
    acc2_two += two * two;
    acc_one += one;
    acc2_one += one * one;
  }
  const double mean_two = acc_two / n, mean_one = acc_one / n;
  const double var_two = acc2_two / n - mean_two * mean_two;
  const double var_one = acc2_one / n - mean_one * mean_one;
  const double sd = std::sqrt(var_one / n);
  REQUIRE(std::fabs(mean_two - mean_one) < 3.0 * sd * std::sqrt(2.0));
  REQUIRE(var_two == Catch::Approx(var_one).epsilon(0.05));
}

TEST_CASE("parameter paths are stationary with independent coordinates") {
  StudyHyperParams eta;
  eta.n_peripheral = 0;
  eta.n_individuals = 1;
  eta.coords = {{0.0, 0.0, 1.0, std::sqrt(2.0) * 0.5},  // stationary var 0.25
                {1.0, 0.0, 0.5, 0.5},
                {-1.0, 0.0, 2.0, 1.0}};
  IndividualMeans mu{{0.0, 1.0, -1.0}};
  const auto grid = uniform_grid(8.0, 16);

  const int n = 10000;
  Rng rng(10);
  const size_t probe[3] = {0, 8, 16};
  double acc[3][3] = {};
  double acc2[3][3] = {};
  double cross = 0.0;   // corr between coord 0 and 1 at node 8
  double lag_acc = 0.0; // coord 0: node 8 vs node 10 (lag 1.0)
  double lag_mean_a = 0.0, lag_mean_b = 0.0;
  for (int i = 0; i < n; ++i) {
    const ParameterPath path = sample_parameter_path(eta, mu, grid, rng);
    for (int pi = 0; pi < 3; ++pi)
      for (int k = 0; k < 3; ++k) {
        const double v = path.theta[probe[pi]][static_cast<size_t>(k)];
        acc[pi][k] += v;
        acc2[pi][k] += v * v;
      }
    cross += path.theta[8][0] * path.theta[8][1];
    lag_acc += path.theta[8][0] * path.theta[10][0];
    lag_mean_a += path.theta[8][0];
    lag_mean_b += path.theta[10][0];
  }
  for (int pi = 0; pi < 3; ++pi)
    for (int k = 0; k < 3; ++k) {
      const auto& c = eta.coords[static_cast<size_t>(k)];
      const double expect_var = c.stationary_var();
      const double mean = acc[pi][k] / n;
      const double var = acc2[pi][k] / n - mean * mean;
      const double se = std::sqrt(expect_var / n);
      REQUIRE(mean == Catch::Approx(mu.mu[static_cast<size_t>(k)]).margin(3.0 * se));
      REQUIRE(var == Catch::Approx(expect_var).epsilon(0.05));
    }
  // independence across coordinates
  const double mean0 = acc[1][0] / n, mean1 = acc[1][1] / n;
  const double var0 = acc2[1][0] / n - mean0 * mean0;
  const double var1 = acc2[1][1] / n - mean1 * mean1;
  const double corr = (cross / n - mean0 * mean1) / std::sqrt(var0 * var1);
  REQUIRE(std::fabs(corr) < 3.0 / std::sqrt(static_cast<double>(n)));
  // lag autocovariance: var * exp(-lambda * lag), lag = 2 nodes * 0.5
  const double lag_cov = lag_acc / n - (lag_mean_a / n) * (lag_mean_b / n);
  const auto& c0 = eta.coords[0];
  REQUIRE(lag_cov == Catch::Approx(c0.stationary_var() * std::exp(-c0.lambda * 1.0)).epsilon(0.10));
}

TEST_CASE("degenerate OU paths sit on the mean") {
  StudyHyperParams eta;
  eta.coords = {{0.3, 0.0, 1.0, 0.0}, {-0.2, 0.0, 0.4, 0.0}};
  IndividualMeans mu{{0.3, -0.2}};
  Rng rng(11);
  const ParameterPath path = sample_parameter_path(eta, mu, uniform_grid(4.0, 8), rng);
  for (const auto& row : path.theta) {
    REQUIRE(row[0] == 0.3);
    REQUIRE(row[1] == -0.2);
  }
}

TEST_CASE("same seed gives bit-identical paths") {
  StudyHyperParams eta;
  eta.coords = {{0.0, 0.1, 1.0, 0.3}};
  IndividualMeans mu{{0.0}};
  const auto grid = uniform_grid(4.0, 32);
  Rng a(42), b(42);
  const ParameterPath pa = sample_parameter_path(eta, mu, grid, a);
  const ParameterPath pb = sample_parameter_path(eta, mu, grid, b);
  REQUIRE(pa.theta == pb.theta);
}
