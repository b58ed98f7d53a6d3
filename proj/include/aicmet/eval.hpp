#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "aicmet/model.hpp"
#include "aicmet/pk/simulate.hpp"
#include "aicmet/pk/study_io.hpp"

namespace aicmet {

struct EvalProtocolConfig {
  int context_observations = 4;  // J0
  int mc_samples = 256;
  std::vector<double> vpc_percentiles{5.0, 50.0, 95.0};
  int vpc_replicates = 500;
  int time_bins = 10;

  void validate() const {
    if (context_observations < 0) throw ConfigError("eval.context_observations: negative");
    if (mc_samples < 1) throw ConfigError("eval.mc_samples: must be >= 1");
    if (vpc_replicates < 2) throw ConfigError("eval.vpc_replicates: must be >= 2");
    if (time_bins < 1) throw ConfigError("eval.time_bins: must be >= 1");
    if (vpc_percentiles.empty()) throw ConfigError("eval.vpc_percentiles: empty");
    for (size_t i = 0; i < vpc_percentiles.size(); ++i) {
      if (!(vpc_percentiles[i] > 0.0 && vpc_percentiles[i] < 100.0))
        throw ConfigError("eval.vpc_percentiles: levels must lie in (0, 100)");
      if (i > 0 && !(vpc_percentiles[i] > vpc_percentiles[i - 1]))
        throw ConfigError("eval.vpc_percentiles: levels must be strictly increasing");
    }
  }

  bool operator==(const EvalProtocolConfig&) const = default;
};

// Sort-and-index percentile: element at ceil(p/100 * n) - 1 of the sorted
// sample, clamped to the valid range.
inline double percentile_sorted(const std::vector<double>& sorted, double p) {
  const int n = static_cast<int>(sorted.size());
  int idx = static_cast<int>(std::ceil(p / 100.0 * n)) - 1;
  idx = std::clamp(idx, 0, n - 1);
  return sorted[static_cast<size_t>(idx)];
}

struct PredictionReport {
  std::vector<double> times;
  std::vector<double> pred_mean;                 // concentration scale
  std::vector<std::vector<double>> quantiles;    // per time, per configured level
  std::vector<double> observed;                  // empty when not supplied
  std::vector<double> sq_log_err;                // empty when not supplied
};

// Monte Carlo posterior prediction: draws (z_s, z_n) pairs from the study
// and context posteriors, decodes each target time and samples the
// observation-level Gaussian; aggregates the mixture mean and empirical
// quantiles per time.
inline PredictionReport posterior_predictive(const AicmetModel& model, const ParameterStore& store,
                                             const pk::StudyRecord& s_context,
                                             const pk::IndividualRecord& d_partial,
                                             const std::vector<double>& targets,
                                             const EvalProtocolConfig& cfg, Rng& rng,
                                             const std::vector<double>* observed = nullptr) {
  if (targets.empty()) throw UsageError("posterior_predictive: no target times");
  cfg.validate();
  Tape tape(&store);
  const GaussianPosterior q_s = model.encode_study(tape, s_context).materialize();
  const GaussianPosterior q_n = model.encode_individual(tape, d_partial).materialize();

  const size_t T = targets.size();
  const int M = cfg.mc_samples;
  std::vector<double> mean_acc(T, 0.0);
  std::vector<std::vector<double>> samples(T);
  for (auto& v : samples) v.reserve(static_cast<size_t>(M));

  for (int m = 0; m < M; ++m) {
    Var z_s = tape.constant(sample_gaussian_row(q_s, rng));
    Var z_n = tape.constant(sample_gaussian_row(q_n, rng));
    const PredictiveVar pred = model.decode_at_times(tape, targets, z_n, z_s, d_partial.dose);
    const Tensor& mu = pred.mean.value();
    const Tensor& lv = pred.log_var.value();
    for (size_t j = 0; j < T; ++j) {
      const double sd = std::exp(0.5 * lv.at(static_cast<int>(j)));
      const double draw = mu.at(static_cast<int>(j)) + sd * rng.normal();
      if (model.cfg.log_scale_targets) {
        // lognormal component mean exp(mu + sigma^2/2)
        mean_acc[j] += std::exp(mu.at(static_cast<int>(j)) + 0.5 * sd * sd);
        samples[j].push_back(std::exp(draw));
      } else {
        mean_acc[j] += mu.at(static_cast<int>(j));
        samples[j].push_back(draw);
      }
    }
  }

  PredictionReport report;
  report.times = targets;
  report.pred_mean.resize(T);
  report.quantiles.resize(T);
  for (size_t j = 0; j < T; ++j) {
    report.pred_mean[j] = mean_acc[j] / M;
    std::sort(samples[j].begin(), samples[j].end());
    for (double p : cfg.vpc_percentiles)
      report.quantiles[j].push_back(percentile_sorted(samples[j], p));
  }
  if (observed != nullptr) {
    if (observed->size() != T) throw UsageError("posterior_predictive: observed length mismatch");
    report.observed = *observed;
    for (size_t j = 0; j < T; ++j) {
      const double d = std::log(report.pred_mean[j]) - std::log((*observed)[j]);
      report.sq_log_err.push_back(d * d);
    }
  }
  return report;
}

// Mean log mixture density of held-out targets on model scale; used as the
// held-out forecast metric during training.
inline double predictive_log_likelihood(const AicmetModel& model, const ParameterStore& store,
                                        const pk::StudyRecord& study, const EvalProtocolConfig& cfg,
                                        Rng& rng) {
  double total = 0.0;
  int count = 0;
  for (int i = 0; i < study.n_individuals(); ++i) {
    const pk::IndividualRecord& rec = study.individuals[static_cast<size_t>(i)];
    if (rec.n_valid() <= cfg.context_observations) continue;
    pk::StudyRecord others;
    others.study_id = study.study_id;
    for (int k = 0; k < study.n_individuals(); ++k)
      if (k != i) others.individuals.push_back(study.individuals[static_cast<size_t>(k)]);
    const pk::IndividualRecord ctx = pk::take_first_valid(rec, cfg.context_observations);
    const pk::IndividualRecord tgt = pk::drop_first_valid(rec, cfg.context_observations);

    Tape tape(&store);
    const GaussianPosterior q_s = model.encode_study(tape, others).materialize();
    const GaussianPosterior q_n = model.encode_individual(tape, ctx).materialize();
    const size_t T = tgt.times.size();
    std::vector<double> log_terms(T, -std::numeric_limits<double>::infinity());
    const int M = cfg.mc_samples;
    for (int m = 0; m < M; ++m) {
      Var z_s = tape.constant(sample_gaussian_row(q_s, rng));
      Var z_n = tape.constant(sample_gaussian_row(q_n, rng));
      const PredictiveVar pred = model.decode_at_times(tape, tgt.times, z_n, z_s, rec.dose);
      for (size_t j = 0; j < T; ++j) {
        const double mu = pred.mean.value().at(static_cast<int>(j));
        const double lv = pred.log_var.value().at(static_cast<int>(j));
        const double y = model.cfg.log_scale_targets ? std::log(tgt.obs[j]) : tgt.obs[j];
        const double ll =
            -0.5 * (std::log(2.0 * std::numbers::pi) + lv + (y - mu) * (y - mu) * std::exp(-lv));
        // running log-sum-exp
        const double hi = std::max(log_terms[j], ll);
        log_terms[j] = hi + std::log(std::exp(log_terms[j] - hi) + std::exp(ll - hi));
      }
    }
    for (size_t j = 0; j < T; ++j) {
      total += log_terms[j] - std::log(static_cast<double>(M));
      ++count;
    }
  }
  if (count == 0) throw UsageError("predictive_log_likelihood: no usable targets");
  return total / count;
}

// Design anchor times of a study: true design for simulated studies, else
// the 10 empirical quantile anchors of pooled observed times.
inline std::vector<double> canonical_schedule(const pk::StudyRecord& s) {
  if (s.latents.has_value() && !s.latents->design_times.empty()) return s.latents->design_times;
  std::vector<double> pooled;
  for (const auto& rec : s.individuals)
    for (size_t j = 0; j < rec.times.size(); ++j)
      if (rec.mask[j]) pooled.push_back(rec.times[j]);
  if (pooled.empty()) throw UsageError("canonical_schedule: study has no valid observations");
  std::sort(pooled.begin(), pooled.end());
  std::vector<double> anchors;
  for (int j = 1; j <= 10; ++j) {
    const double q = percentile_sorted(pooled, (j - 0.5) * 10.0);
    if (anchors.empty() || q > anchors.back()) anchors.push_back(q);
  }
  return anchors;
}

// Virtual individuals: one shared z_s draw per call, z_n from the prior per
// individual, observation noise from the decoder head.
inline std::vector<pk::IndividualRecord> synthesize_population(
    const AicmetModel& model, const ParameterStore& store, const pk::StudyRecord& s_context,
    int n_virtual, const pk::DoseLaw& dose_law, const EvalProtocolConfig& cfg, Rng& rng) {
  if (n_virtual < 1) throw UsageError("synthesize_population: n_virtual must be >= 1");
  cfg.validate();
  const std::vector<double> schedule = canonical_schedule(s_context);
  Tape tape(&store);
  const GaussianPosterior q_s = model.encode_study(tape, s_context).materialize();
  Var z_s = tape.constant(sample_gaussian_row(q_s, rng));

  std::vector<pk::IndividualRecord> virtuals;
  for (int v = 0; v < n_virtual; ++v) {
    pk::IndividualRecord rec;
    rec.dose = pk::sample_dose(dose_law, rng);
    LatentSample z_n = sample_latent_prior(tape, model.cfg.latent, rng);
    const PredictiveVar pred = model.decode_at_times(tape, schedule, z_n.z, z_s, rec.dose);
    for (size_t j = 0; j < schedule.size(); ++j) {
      const double mu = pred.mean.value().at(static_cast<int>(j));
      const double sd = std::exp(0.5 * pred.log_var.value().at(static_cast<int>(j)));
      const double draw = mu + sd * rng.normal();
      rec.times.push_back(schedule[j]);
      rec.obs.push_back(model.cfg.log_scale_targets ? std::exp(draw) : draw);
      rec.mask.push_back(1);
    }
    virtuals.push_back(std::move(rec));
  }
  return virtuals;
}

// Replicate studies for a VPC: the study design (doses, canonical schedule)
// is kept, z_s is redrawn per replicate, z_n per virtual individual. Returns
// all virtual records pooled.
inline std::vector<pk::IndividualRecord> simulate_vpc_replicates(const AicmetModel& model,
                                                                 const ParameterStore& store,
                                                                 const pk::StudyRecord& study,
                                                                 const EvalProtocolConfig& cfg,
                                                                 Rng& rng) {
  cfg.validate();
  const std::vector<double> schedule = canonical_schedule(study);
  GaussianPosterior q_s;
  {
    Tape tape(&store);
    q_s = model.encode_study(tape, study).materialize();
  }
  std::vector<pk::IndividualRecord> pooled;
  pooled.reserve(static_cast<size_t>(cfg.vpc_replicates) * study.individuals.size());
  for (int r = 0; r < cfg.vpc_replicates; ++r) {
    Tape tape(&store);
    Var z_s = tape.constant(sample_gaussian_row(q_s, rng));
    for (const auto& individual : study.individuals) {
      LatentSample z_n = sample_latent_prior(tape, model.cfg.latent, rng);
      const PredictiveVar pred = model.decode_at_times(tape, schedule, z_n.z, z_s, individual.dose);
      pk::IndividualRecord rec;
      rec.dose = individual.dose;
      for (size_t j = 0; j < schedule.size(); ++j) {
        const double mu = pred.mean.value().at(static_cast<int>(j));
        const double sd = std::exp(0.5 * pred.log_var.value().at(static_cast<int>(j)));
        const double draw = mu + sd * rng.normal();
        rec.times.push_back(schedule[j]);
        rec.obs.push_back(model.cfg.log_scale_targets ? std::exp(draw) : draw);
        rec.mask.push_back(1);
      }
      pooled.push_back(std::move(rec));
    }
  }
  return pooled;
}

inline double log_rmse(const std::vector<double>& predictions, const std::vector<double>& observations) {
  if (predictions.size() != observations.size() || predictions.empty())
    throw UsageError("log_rmse: length mismatch or empty input");
  double acc = 0.0;
  for (size_t i = 0; i < predictions.size(); ++i) {
    if (!(observations[i] > 0.0)) throw UsageError("log_rmse: observations must be positive");
    const double d = std::log(predictions[i]) - std::log(observations[i]);
    acc += d * d;
  }
  return std::sqrt(acc / predictions.size());
}

struct VpcRow {
  double bin_time = 0.0;
  std::vector<double> sim_p;
  std::vector<double> obs_p;
  int n_obs = 0;
};

struct VpcTable {
  std::vector<double> levels;
  std::vector<VpcRow> rows;
  std::vector<std::string> warnings;
};

// Percentiles of pooled simulated concentrations and of the observed data,
// per design-time bin (nearest anchor). Empty bins are dropped with a
// warning record.
inline VpcTable vpc_percentiles(const std::vector<double>& anchors,
                                const std::vector<pk::IndividualRecord>& simulated,
                                const pk::StudyRecord& observed, const EvalProtocolConfig& cfg) {
  cfg.validate();
  if (anchors.empty()) throw UsageError("vpc_percentiles: no bin anchors");
  auto nearest = [&](double t) {
    size_t best = 0;
    double bd = std::fabs(t - anchors[0]);
    for (size_t a = 1; a < anchors.size(); ++a) {
      const double d = std::fabs(t - anchors[a]);
      if (d < bd) {
        bd = d;
        best = a;
      }
    }
    return best;
  };
  std::vector<std::vector<double>> sim_bins(anchors.size()), obs_bins(anchors.size());
  for (const auto& rec : simulated)
    for (size_t j = 0; j < rec.times.size(); ++j)
      if (rec.mask[j]) sim_bins[nearest(rec.times[j])].push_back(rec.obs[j]);
  for (const auto& rec : observed.individuals)
    for (size_t j = 0; j < rec.times.size(); ++j)
      if (rec.mask[j]) obs_bins[nearest(rec.times[j])].push_back(rec.obs[j]);

  VpcTable table;
  table.levels = cfg.vpc_percentiles;
  for (size_t a = 0; a < anchors.size(); ++a) {
    if (sim_bins[a].empty() || obs_bins[a].empty()) {
      table.warnings.push_back("bin t=" + pk::fmt_double(anchors[a]) + ": empty, dropped");
      continue;
    }
    std::sort(sim_bins[a].begin(), sim_bins[a].end());
    std::sort(obs_bins[a].begin(), obs_bins[a].end());
    VpcRow row;
    row.bin_time = anchors[a];
    row.n_obs = static_cast<int>(obs_bins[a].size());
    for (double p : cfg.vpc_percentiles) {
      row.sim_p.push_back(percentile_sorted(sim_bins[a], p));
      row.obs_p.push_back(percentile_sorted(obs_bins[a], p));
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

inline std::string vpc_csv(const VpcTable& table) {
  std::string out = "bin_time,sim_p5,sim_p50,sim_p95,obs_p5,obs_p50,obs_p95,n_obs\n";
  for (const auto& r : table.rows) {
    out += pk::fmt_double(r.bin_time);
    for (double v : r.sim_p) out += "," + pk::fmt_double(v);
    for (double v : r.obs_p) out += "," + pk::fmt_double(v);
    out += "," + std::to_string(r.n_obs) + "\n";
  }
  return out;
}

struct IndividualEval {
  int index = -1;
  double rmse = 0.0;
  int n_targets = 0;
  std::string skip_reason;  // nonempty when the individual was skipped
};

struct StudyEval {
  std::vector<IndividualEval> per_individual;
  double pooled_log_rmse = 0.0;
  int n_pooled_points = 0;
};

// Test seam: supplies concentration-scale predictions for an individual's
// target times in place of the model.
using PredictorSeam =
    std::function<std::vector<double>(int individual, const std::vector<double>& target_times)>;

// Leave-one-in protocol: context is every other individual plus the first
// J0 samples of the individual under evaluation; targets are the rest.
inline StudyEval evaluate_study(const AicmetModel& model, const ParameterStore& store,
                                const pk::StudyRecord& study, const EvalProtocolConfig& cfg, Rng& rng,
                                const PredictorSeam& seam = nullptr) {
  cfg.validate();
  StudyEval out;
  double pooled_acc = 0.0;
  for (int i = 0; i < study.n_individuals(); ++i) {
    const pk::IndividualRecord& rec = study.individuals[static_cast<size_t>(i)];
    IndividualEval ev;
    ev.index = i;
    if (rec.n_valid() <= cfg.context_observations) {
      ev.skip_reason = "needs more than " + std::to_string(cfg.context_observations) + " observations";
      out.per_individual.push_back(std::move(ev));
      continue;
    }
    pk::StudyRecord others;
    others.study_id = study.study_id;
    for (int k = 0; k < study.n_individuals(); ++k)
      if (k != i) others.individuals.push_back(study.individuals[static_cast<size_t>(k)]);
    const pk::IndividualRecord ctx = pk::take_first_valid(rec, cfg.context_observations);
    const pk::IndividualRecord tgt = pk::drop_first_valid(rec, cfg.context_observations);

    std::vector<double> preds;
    if (seam) {
      preds = seam(i, tgt.times);
    } else {
      const PredictionReport rep =
          posterior_predictive(model, store, others, ctx, tgt.times, cfg, rng, &tgt.obs);
      preds = rep.pred_mean;
    }
    ev.rmse = log_rmse(preds, tgt.obs);
    ev.n_targets = static_cast<int>(tgt.times.size());
    for (size_t j = 0; j < preds.size(); ++j) {
      const double d = std::log(preds[j]) - std::log(tgt.obs[j]);
      pooled_acc += d * d;
      ++out.n_pooled_points;
    }
    out.per_individual.push_back(std::move(ev));
  }
  out.pooled_log_rmse = out.n_pooled_points > 0 ? std::sqrt(pooled_acc / out.n_pooled_points) : 0.0;
  return out;
}

}  // namespace aicmet
