#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "aicmet/pk/dynamics.hpp"
#include "aicmet/pk/process.hpp"
#include "aicmet/rng.hpp"

namespace aicmet::pk {

struct PartitionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Timescales {
  double t_peak = 0.0;
  double t_half = 0.0;
};

// Pre-subsampling observation design; mask marks entries kept after
// subsampling.
struct Schedule {
  std::vector<double> times;
  std::vector<uint8_t> mask;
};

// One observable individual: dosing, sampling times, concentrations and
// validity flags. Imported and simulated records are structurally identical.
struct IndividualRecord {
  DoseEvent dose;
  std::vector<double> times;
  std::vector<double> obs;
  std::vector<uint8_t> mask;

  int n_valid() const {
    int n = 0;
    for (uint8_t m : mask) n += m ? 1 : 0;
    return n;
  }
  std::vector<int> valid_indices() const {
    std::vector<int> idx;
    for (size_t j = 0; j < mask.size(); ++j)
      if (mask[j]) idx.push_back(static_cast<int>(j));
    return idx;
  }
};

// Simulation-only ground truth kept alongside a study.
struct StudyLatents {
  StudyHyperParams hyper;
  Timescales timescales;
  std::vector<double> design_times;
  std::vector<double> grid;
  std::vector<ParameterPath> paths;                   // per individual
  std::vector<std::vector<CompartmentState>> states;  // per individual
};

struct StudyRecord {
  std::string study_id;
  std::vector<IndividualRecord> individuals;
  std::optional<StudyLatents> latents;

  int n_individuals() const { return static_cast<int>(individuals.size()); }
};

struct SimulationConfig {
  HyperPriorConfig hyper;
  int grid_steps = 512;
  IntRange schedule_size{4, 10};

  void validate() const {
    hyper.validate();
    if (grid_steps < 1) throw ConfigError("grid_steps: must be positive");
    schedule_size.validate("schedule_size");
    if (schedule_size.lo < 1 || schedule_size.hi > 10)
      throw ConfigError("schedule_size: must lie within {1,...,10}");
  }
  bool operator==(const SimulationConfig&) const = default;
};

// T_peak and T_half of a one-compartment model at typical study-level
// parameters kbar_a = e^{m_1}, kbar_e = e^{m_2}.
inline Timescales characteristic_timescales(const StudyHyperParams& eta) {
  const double ka = std::exp(eta.coords[0].m);
  const double ke = std::exp(eta.coords[1].m);
  Timescales ts;
  ts.t_half = std::log(2.0) / ke;
  if (std::fabs(ka - ke) < 1e-9)
    ts.t_peak = 1.0 / ke;  // analytic limit of (log ka - log ke)/(ka - ke)
  else
    ts.t_peak = (std::log(ka) - std::log(ke)) / (ka - ke);
  return ts;
}

// 4 equally spaced times up to the peak, then 6 increasingly spaced times in
// units of the half-life.
inline Schedule build_schedule(const Timescales& ts) {
  Schedule s;
  for (int j = 1; j <= 4; ++j) s.times.push_back(ts.t_peak * j / 4.0);
  for (double c : {0.25, 0.5, 1.0, 2.0, 4.0, 8.0}) s.times.push_back(ts.t_peak + c * ts.t_half);
  s.mask.assign(s.times.size(), 1);
  return s;
}

// Keeps a uniformly random size-n subset (order preserved); dropped entries
// get mask = false.
inline Schedule subsample_schedule(const Schedule& s, const IntRange& size_law, Rng& rng) {
  const int total = static_cast<int>(s.times.size());
  if (size_law.lo < 1 || size_law.hi > total) throw ConfigError("schedule size law out of range");
  const int n = static_cast<int>(rng.uniform_int(size_law.lo, size_law.hi));
  std::vector<int> idx(static_cast<size_t>(total));
  for (int i = 0; i < total; ++i) idx[static_cast<size_t>(i)] = i;
  for (int i = 0; i < n; ++i) {
    const int j = static_cast<int>(rng.uniform_int(i, total - 1));
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
  }
  Schedule out = s;
  out.mask.assign(s.times.size(), 0);
  for (int i = 0; i < n; ++i) out.mask[static_cast<size_t>(idx[static_cast<size_t>(i)])] = 1;
  return out;
}

inline double lerp_at(const std::vector<double>& grid, const std::vector<double>& values, double t) {
  if (t <= grid.front()) return values.front();
  if (t >= grid.back()) return values.back();
  const auto it = std::upper_bound(grid.begin(), grid.end(), t);
  const size_t hi = static_cast<size_t>(it - grid.begin());
  const size_t lo = hi - 1;
  const double w = (t - grid[lo]) / (grid[hi] - grid[lo]);
  return values[lo] * (1.0 - w) + values[hi] * w;
}

// Proportional-error observation model at the kept schedule times; the
// multiplicative factor is clamped below at 0.01 to keep concentrations
// positive on log scale.
inline std::vector<double> observe(const std::vector<double>& grid,
                                   const std::vector<double>& central,
                                   const std::vector<double>& volume, const Schedule& schedule,
                                   double sigma_obs, Rng& rng) {
  std::vector<double> y;
  for (size_t j = 0; j < schedule.times.size(); ++j) {
    if (!schedule.mask[j]) continue;
    const double xc = lerp_at(grid, central, schedule.times[j]);
    const double v = lerp_at(grid, volume, schedule.times[j]);
    const double factor = std::max(1.0 + sigma_obs * rng.normal(), 0.01);
    y.push_back(xc / v * factor);
  }
  return y;
}

inline std::vector<double> make_grid(double tau_max, int steps) {
  std::vector<double> grid(static_cast<size_t>(steps) + 1);
  for (int i = 0; i <= steps; ++i) grid[static_cast<size_t>(i)] = tau_max * i / steps;
  return grid;
}

// Runs the full generative factorization: population hyperparameters, study
// design, per-individual OU parameter paths, compartment ODE solutions and
// noisy observations. Latent ground truth is kept on the record.
inline StudyRecord generate_study(const SimulationConfig& cfg, Rng& rng,
                                  const std::string& study_id = "study") {
  cfg.validate();
  StudyRecord study;
  study.study_id = study_id;
  StudyLatents latents;
  latents.hyper = sample_study_hyperparams(cfg.hyper, rng);
  latents.timescales = characteristic_timescales(latents.hyper);
  const Schedule design = build_schedule(latents.timescales);
  latents.design_times = design.times;
  latents.grid = make_grid(design.times.back(), cfg.grid_steps);

  const int P = latents.hyper.n_peripheral;
  for (int i = 0; i < latents.hyper.n_individuals; ++i) {
    const IndividualMeans mu = sample_individual_means(latents.hyper, rng);
    const DoseEvent dose = sample_dose(latents.hyper.dose_law, rng);
    const Schedule sched = subsample_schedule(design, cfg.schedule_size, rng);
    ParameterPath path = sample_parameter_path(latents.hyper, mu, latents.grid, rng);

    std::vector<CompartmentState> states;
    try {
      states = integrate_path(
          apply_dose(dose, P),
          [&](int node) -> const std::vector<double>& { return path.theta[static_cast<size_t>(node)]; },
          latents.grid);
    } catch (const NumericBlowupError& e) {
      throw ModelError("study " + study_id + ", individual " + std::to_string(i) + ": " + e.what());
    }

    std::vector<double> central(states.size()), volume(states.size());
    for (size_t n = 0; n < states.size(); ++n) {
      central[n] = states[n].central;
      volume[n] = std::exp(path.theta[n][2]);
    }
    const std::vector<double> y = observe(latents.grid, central, volume, sched, latents.hyper.sigma_obs, rng);

    IndividualRecord rec;
    rec.dose = dose;
    size_t yi = 0;
    for (size_t j = 0; j < sched.times.size(); ++j) {
      if (!sched.mask[j]) continue;
      rec.times.push_back(sched.times[j]);
      rec.obs.push_back(y[yi++]);
      rec.mask.push_back(1);
    }
    study.individuals.push_back(std::move(rec));
    latents.paths.push_back(std::move(path));
    latents.states.push_back(std::move(states));
  }
  study.latents = std::move(latents);
  return study;
}

// First `count` valid observations of a record, as a standalone record.
inline IndividualRecord take_first_valid(const IndividualRecord& rec, int count) {
  IndividualRecord out;
  out.dose = rec.dose;
  int taken = 0;
  for (size_t j = 0; j < rec.times.size() && taken < count; ++j) {
    if (!rec.mask[j]) continue;
    out.times.push_back(rec.times[j]);
    out.obs.push_back(rec.obs[j]);
    out.mask.push_back(1);
    ++taken;
  }
  return out;
}

// Valid observations after the first `count`, as a standalone record.
inline IndividualRecord drop_first_valid(const IndividualRecord& rec, int count) {
  IndividualRecord out;
  out.dose = rec.dose;
  int seen = 0;
  for (size_t j = 0; j < rec.times.size(); ++j) {
    if (!rec.mask[j]) continue;
    if (seen++ < count) continue;
    out.times.push_back(rec.times[j]);
    out.obs.push_back(rec.obs[j]);
    out.mask.push_back(1);
  }
  return out;
}

struct HoldoutSplit {
  StudyRecord context;  // observable copy without the held-out individual
  IndividualRecord held_out;
  int held_out_index = -1;
};

struct ForecastSplit {
  std::vector<IndividualRecord> context;  // chronological prefix per individual
  std::vector<IndividualRecord> target;   // remaining observations
  std::vector<int> context_len;
};

inline HoldoutSplit partition_holdout(const StudyRecord& s, Rng& rng) {
  if (s.n_individuals() < 2) throw PartitionError("holdout partition requires at least 2 individuals");
  HoldoutSplit split;
  split.held_out_index = static_cast<int>(rng.uniform_int(0, s.n_individuals() - 1));
  split.held_out = s.individuals[static_cast<size_t>(split.held_out_index)];
  split.context.study_id = s.study_id;
  for (int i = 0; i < s.n_individuals(); ++i)
    if (i != split.held_out_index) split.context.individuals.push_back(s.individuals[static_cast<size_t>(i)]);
  return split;
}

// Chronological context/target split per individual; J drawn uniformly on
// {0, ..., min(max_context, T_i - 1)}.
inline ForecastSplit partition_context_target(const StudyRecord& s, Rng& rng, int max_context = 4) {
  ForecastSplit split;
  for (int i = 0; i < s.n_individuals(); ++i) {
    const IndividualRecord& rec = s.individuals[static_cast<size_t>(i)];
    const int T = rec.n_valid();
    if (T < 2)
      throw PartitionError("context/target partition: individual " + std::to_string(i) +
                           " has fewer than 2 valid observations");
    const int J = static_cast<int>(rng.uniform_int(0, std::min(max_context, T - 1)));
    split.context_len.push_back(J);
    split.context.push_back(take_first_valid(rec, J));
    split.target.push_back(drop_first_valid(rec, J));
  }
  return split;
}

}  // namespace aicmet::pk
