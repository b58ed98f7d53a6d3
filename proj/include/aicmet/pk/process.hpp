#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "aicmet/pk/dynamics.hpp"
#include "aicmet/rng.hpp"

namespace aicmet {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace aicmet

namespace aicmet::pk {

struct Range {
  double lo = 0.0;
  double hi = 0.0;
  void validate(const std::string& name) const {
    if (!(lo <= hi)) throw ConfigError(name + ": lower bound " + std::to_string(lo) + " exceeds upper " + std::to_string(hi));
  }
  bool operator==(const Range&) const = default;
};

struct IntRange {
  int lo = 0;
  int hi = 0;
  void validate(const std::string& name) const {
    if (lo > hi) throw ConfigError(name + ": lower bound exceeds upper");
  }
  bool operator==(const IntRange&) const = default;
};

// Dose distribution: log-uniform amount, Bernoulli route.
struct DoseLaw {
  Range amount{1.0, 1000.0};
  double p_oral = 0.5;
  bool operator==(const DoseLaw&) const = default;
};

// Hyperprior ranges for the population-level draws. All of these are
// configuration, not constants; defaults span typical small-molecule
// kinetics on the hourly scale.
struct HyperPriorConfig {
  Range m_log_ka{std::log(0.3), std::log(3.0)};
  Range m_log_ke{std::log(0.02), std::log(0.7)};
  Range m_log_v{std::log(5.0), std::log(100.0)};
  Range m_log_transfer{std::log(0.05), std::log(1.0)};
  Range mean_sd{0.05, 0.5};            // s_k
  Range lambda_sq{0.01, 1.0};          // lambda_k^2
  Range stationary_var{0.0, 0.05};     // sigma_k^2 / (2 lambda_k)
  IntRange peripheral{0, 2};           // P
  IntRange individuals{5, 20};         // I
  DoseLaw dose;
  Range sigma_obs{0.05, 0.25};

  void validate() const {
    m_log_ka.validate("m_log_ka");
    m_log_ke.validate("m_log_ke");
    m_log_v.validate("m_log_v");
    m_log_transfer.validate("m_log_transfer");
    mean_sd.validate("mean_sd");
    lambda_sq.validate("lambda_sq");
    if (!(lambda_sq.lo > 0.0)) throw ConfigError("lambda_sq: range must be strictly positive");
    stationary_var.validate("stationary_var");
    peripheral.validate("peripheral");
    if (peripheral.lo < 0) throw ConfigError("peripheral: negative count");
    individuals.validate("individuals");
    if (individuals.lo < 1) throw ConfigError("individuals: at least 1 required");
    dose.amount.validate("dose.amount");
    if (!(dose.amount.lo > 0.0)) throw ConfigError("dose.amount: must be positive");
    if (dose.p_oral < 0.0 || dose.p_oral > 1.0) throw ConfigError("dose.p_oral: not a probability");
    sigma_obs.validate("sigma_obs");
    if (sigma_obs.lo < 0.0) throw ConfigError("sigma_obs: negative scale");
  }
  bool operator==(const HyperPriorConfig&) const = default;
};

// Per-coordinate population quantities eta_k = (m_k, s_k, lambda_k, sigma_k).
struct CoordinateHyperParams {
  double m = 0.0;       // prior mean of the individual mean (log scale)
  double s = 0.0;       // prior spread of the individual mean
  double lambda = 0.0;  // OU mean-reversion rate
  double sigma = 0.0;   // OU diffusion scale

  double stationary_var() const { return sigma * sigma / (2.0 * lambda); }
};

struct StudyHyperParams {
  std::vector<CoordinateHyperParams> coords;  // 3 + 2P entries
  int n_peripheral = 0;
  int n_individuals = 0;
  DoseLaw dose_law;
  double sigma_obs = 0.0;
};

struct IndividualMeans {
  std::vector<double> mu;  // 3 + 2P entries
};

// Per-individual log-kinetic-parameter trajectory on the simulation grid.
struct ParameterPath {
  std::vector<double> grid;
  std::vector<std::vector<double>> theta;  // node -> coordinate vector
  IndividualMeans mu;
};

inline StudyHyperParams sample_study_hyperparams(const HyperPriorConfig& cfg, Rng& rng) {
  cfg.validate();
  StudyHyperParams eta;
  eta.n_peripheral = static_cast<int>(rng.uniform_int(cfg.peripheral.lo, cfg.peripheral.hi));
  eta.n_individuals = static_cast<int>(rng.uniform_int(cfg.individuals.lo, cfg.individuals.hi));
  const int K = n_coords(eta.n_peripheral);
  eta.coords.resize(static_cast<size_t>(K));
  for (int k = 0; k < K; ++k) {
    const Range& m_range = k == 0   ? cfg.m_log_ka
                           : k == 1 ? cfg.m_log_ke
                           : k == 2 ? cfg.m_log_v
                                    : cfg.m_log_transfer;
    CoordinateHyperParams& c = eta.coords[static_cast<size_t>(k)];
    c.m = rng.uniform(m_range.lo, m_range.hi);
    c.s = rng.uniform(cfg.mean_sd.lo, cfg.mean_sd.hi);
    c.lambda = std::sqrt(rng.uniform(cfg.lambda_sq.lo, cfg.lambda_sq.hi));
    const double v_stat = rng.uniform(cfg.stationary_var.lo, cfg.stationary_var.hi);
    c.sigma = std::sqrt(2.0 * c.lambda * v_stat);
  }
  eta.dose_law = cfg.dose;
  eta.sigma_obs = rng.uniform(cfg.sigma_obs.lo, cfg.sigma_obs.hi);
  return eta;
}

inline IndividualMeans sample_individual_means(const StudyHyperParams& eta, Rng& rng) {
  IndividualMeans im;
  im.mu.reserve(eta.coords.size());
  for (const auto& c : eta.coords) im.mu.push_back(rng.normal(c.m, c.s));
  return im;
}

inline DoseEvent sample_dose(const DoseLaw& law, Rng& rng) {
  DoseEvent d;
  d.amount = std::exp(rng.uniform(std::log(law.amount.lo), std::log(law.amount.hi)));
  d.route = rng.bernoulli(law.p_oral) ? Route::kOral : Route::kIntravenous;
  return d;
}

// Exact OU transition: theta_{t+dt} | theta_t ~ N(mu + (theta_t - mu) e^{-l dt},
// sigma^2/(2l) (1 - e^{-2 l dt})). No Euler-Maruyama error.
inline double ou_step(double theta_t, double mu, double lambda, double sigma, double dt, Rng& rng) {
  const double decay = std::exp(-lambda * dt);
  const double mean = mu + (theta_t - mu) * decay;
  const double var = sigma * sigma / (2.0 * lambda) * (1.0 - decay * decay);
  return rng.normal(mean, std::sqrt(var));
}

// Stationary initialization, then exact transitions over consecutive grid
// gaps; coordinates evolve independently.
inline ParameterPath sample_parameter_path(const StudyHyperParams& eta, const IndividualMeans& mu,
                                           const std::vector<double>& grid, Rng& rng) {
  const int K = static_cast<int>(eta.coords.size());
  ParameterPath path;
  path.grid = grid;
  path.mu = mu;
  path.theta.resize(grid.size(), std::vector<double>(static_cast<size_t>(K)));
  for (int k = 0; k < K; ++k) {
    const auto& c = eta.coords[static_cast<size_t>(k)];
    path.theta[0][static_cast<size_t>(k)] =
        rng.normal(mu.mu[static_cast<size_t>(k)], std::sqrt(c.stationary_var()));
  }
  for (size_t i = 1; i < grid.size(); ++i) {
    const double dt = grid[i] - grid[i - 1];
    for (int k = 0; k < K; ++k) {
      const auto& c = eta.coords[static_cast<size_t>(k)];
      path.theta[i][static_cast<size_t>(k)] =
          ou_step(path.theta[i - 1][static_cast<size_t>(k)], mu.mu[static_cast<size_t>(k)], c.lambda,
                  c.sigma, dt, rng);
    }
  }
  return path;
}

}  // namespace aicmet::pk
