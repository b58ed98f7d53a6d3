#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "aicmet/eval.hpp"
#include "aicmet/model.hpp"
#include "aicmet/nn/primitives.hpp"
#include "aicmet/pk/simulate.hpp"

namespace aicmet {

struct TrainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Closed-form KL between diagonal Gaussians, as a graph node.
inline Var kl_diag_gaussian(Tape& t, const PosteriorVar& q1, const PosteriorVar& q2) {
  if (!q1.mean.value().same_shape(q2.mean.value()))
    throw TensorError("kl: posterior width mismatch");
  Var lv_diff = sub(q1.log_var, q2.log_var);
  Var mean_term = mul(vsquare(sub(q2.mean, q1.mean)), vexp(neg(q2.log_var)));
  Var inner = add(add(vexp(lv_diff), mean_term), add_const(neg(lv_diff), -1.0));
  return scale(sum_all(inner), 0.5);
}

inline double kl_diag_gaussian(const GaussianPosterior& q1, const GaussianPosterior& q2) {
  if (q1.mean.data.size() != q2.mean.data.size()) throw TensorError("kl: posterior width mismatch");
  double acc = 0.0;
  for (size_t d = 0; d < q1.mean.data.size(); ++d) {
    const double lv1 = q1.log_var.data[d], lv2 = q2.log_var.data[d];
    const double dm = q2.mean.data[d] - q1.mean.data[d];
    acc += 0.5 * (std::exp(lv1 - lv2) + dm * dm * std::exp(-lv2) - 1.0 + lv2 - lv1);
  }
  return acc;
}

inline PosteriorVar standard_normal_posterior(Tape& t, int width) {
  return PosteriorVar{t.constant(Tensor::zeros({1, width})), t.constant(Tensor::zeros({1, width}))};
}

// sum_j log N(y_j | mean_j, exp(log_var_j))
inline Var gaussian_log_likelihood(Tape& t, Var mean, Var log_var, const std::vector<double>& y) {
  if (mean.value().numel() != static_cast<int64_t>(y.size()))
    throw TensorError("gaussian_log_likelihood: length mismatch");
  Var y_c = t.constant(Tensor::vec(y));
  Var quad = mul(vsquare(sub(y_c, mean)), vexp(neg(log_var)));
  Var terms = add(add_const(log_var, std::log(2.0 * std::numbers::pi)), quad);
  return scale(sum_all(terms), -0.5);
}

// Named negative-ELBO components; KL values are >= 0 up to roundoff.
struct ElboBreakdown {
  double reconstruction = 0.0;  // negative log-likelihood term
  double kl_s_context = 0.0;
  double kl_s_prior = 0.0;
  double kl_n_prior = 0.0;
  double kl_i_refine = 0.0;
};

struct ElboNewGraph {
  Var recon_loss;  // scalar, minimization sign
  Var kl_s_context, kl_s_prior, kl_n_prior;
  ElboBreakdown values;
};

struct ElboForecastGraph {
  Var recon_loss;
  Var kl_i_refine;
  ElboBreakdown values;
};

inline std::vector<double> target_values(const AicmetModel& model, const pk::IndividualRecord& rec) {
  std::vector<double> y;
  for (size_t j = 0; j < rec.times.size(); ++j) {
    if (!rec.mask[j]) continue;
    y.push_back(model.cfg.log_scale_targets ? std::log(rec.obs[j]) : rec.obs[j]);
  }
  return y;
}

inline std::vector<double> valid_times(const pk::IndividualRecord& rec) {
  std::vector<double> t;
  for (size_t j = 0; j < rec.times.size(); ++j)
    if (rec.mask[j]) t.push_back(rec.times[j]);
  return t;
}

// New-individual bound: reconstruction of the held-out individual under
// z_s ~ q(z_s | S u {D_n}) and z_n ~ q(z_n | D_n), minus the three KL terms.
// kl_weight_override = 0 isolates the reconstruction (diagnostic mode).
inline ElboNewGraph elbo_new(Tape& t, const AicmetModel& model,
                             const std::vector<pk::IndividualRecord>& context,
                             const pk::IndividualRecord& d_new, int mc_samples, Rng& rng) {
  if (context.empty()) throw UsageError("elbo_new: empty study context");
  if (d_new.n_valid() < 1) throw UsageError("elbo_new: held-out individual has no observations");

  std::vector<Var> ctx_summaries;
  for (const auto& rec : context)
    if (rec.n_valid() > 0) ctx_summaries.push_back(model.individual_summary(t, rec));
  if (ctx_summaries.empty()) throw UsageError("elbo_new: context has no usable individuals");
  Var c_n = model.individual_summary(t, d_new);

  std::vector<Var> all_summaries = ctx_summaries;
  all_summaries.push_back(c_n);
  PosteriorVar q_all = model.pool_study_summaries(t, all_summaries);
  PosteriorVar q_ctx = model.pool_study_summaries(t, ctx_summaries);
  PosteriorVar q_n = model.heads_individual(t, c_n);

  const std::vector<double> tau = valid_times(d_new);
  const std::vector<double> y = target_values(model, d_new);
  Var ll_sum = t.constant(Tensor::scalar(0.0));
  for (int m = 0; m < mc_samples; ++m) {
    LatentSample z_s = sample_latent(t, q_all, rng);
    LatentSample z_n = sample_latent(t, q_n, rng);
    PredictiveVar pred = model.decode_at_times(t, tau, z_n.z, z_s.z, d_new.dose);
    ll_sum = add(ll_sum, gaussian_log_likelihood(t, pred.mean, pred.log_var, y));
  }
  ElboNewGraph g;
  g.recon_loss = neg(scale(ll_sum, 1.0 / mc_samples));
  PosteriorVar prior = standard_normal_posterior(t, model.cfg.latent);
  g.kl_s_context = kl_diag_gaussian(t, q_all, q_ctx);
  g.kl_s_prior = kl_diag_gaussian(t, q_all, prior);
  g.kl_n_prior = kl_diag_gaussian(t, q_n, prior);
  g.values.reconstruction = g.recon_loss.value().data[0];
  g.values.kl_s_context = g.kl_s_context.value().data[0];
  g.values.kl_s_prior = g.kl_s_prior.value().data[0];
  g.values.kl_n_prior = g.kl_n_prior.value().data[0];
  return g;
}

// Forecast bound: z_s from the full observed corpus, z_i from the full
// record of each individual; reconstruction over target subsets only, plus
// the per-individual refinement KL. Individuals with empty targets
// contribute only through the study posterior.
inline ElboForecastGraph elbo_forecast(Tape& t, const AicmetModel& model, const pk::StudyRecord& s,
                                       const pk::ForecastSplit& split, int mc_samples, Rng& rng) {
  std::vector<Var> summaries;
  std::vector<int> summary_index(s.individuals.size(), -1);
  for (size_t i = 0; i < s.individuals.size(); ++i) {
    if (s.individuals[i].n_valid() == 0) continue;
    summary_index[i] = static_cast<int>(summaries.size());
    summaries.push_back(model.individual_summary(t, s.individuals[i]));
  }
  PosteriorVar q_s = model.pool_study_summaries(t, summaries);

  Var recon_sum = t.constant(Tensor::scalar(0.0));
  Var kl_sum = t.constant(Tensor::scalar(0.0));
  for (int m = 0; m < mc_samples; ++m) {
    LatentSample z_s = sample_latent(t, q_s, rng);
    for (size_t i = 0; i < s.individuals.size(); ++i) {
      if (summary_index[i] < 0) continue;
      if (split.target[i].n_valid() == 0) continue;
      PosteriorVar q_full = model.heads_individual(t, summaries[static_cast<size_t>(summary_index[i])]);
      LatentSample z_i = sample_latent(t, q_full, rng);
      PredictiveVar pred = model.decode_at_times(t, valid_times(split.target[i]), z_i.z, z_s.z,
                                                 s.individuals[i].dose);
      recon_sum =
          add(recon_sum, gaussian_log_likelihood(t, pred.mean, pred.log_var,
                                                 target_values(model, split.target[i])));
    }
  }
  for (size_t i = 0; i < s.individuals.size(); ++i) {
    if (summary_index[i] < 0 || split.target[i].n_valid() == 0) continue;
    PosteriorVar q_full = model.heads_individual(t, summaries[static_cast<size_t>(summary_index[i])]);
    PosteriorVar q_ctx = model.encode_individual(t, split.context[i]);
    kl_sum = add(kl_sum, kl_diag_gaussian(t, q_full, q_ctx));
  }

  ElboForecastGraph g;
  g.recon_loss = neg(scale(recon_sum, 1.0 / mc_samples));
  g.kl_i_refine = kl_sum;
  g.values.reconstruction = g.recon_loss.value().data[0];
  g.values.kl_i_refine = g.kl_i_refine.value().data[0];
  return g;
}

// ---- optimizer ----

struct AdamState {
  std::map<std::string, std::pair<Tensor, Tensor>> moments;  // first, second
  int64_t step_count = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void ensure(const ParameterStore& store) {
    for (const auto& [name, p] : store.entries())
      if (!moments.count(name))
        moments.emplace(name, std::make_pair(Tensor::zeros(p.value.shape), Tensor::zeros(p.value.shape)));
  }

  void step(ParameterStore& store, double lr) {
    ensure(store);
    ++step_count;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (auto& [name, p] : store.entries()) {
      auto& [m, v] = moments.at(name);
      for (size_t i = 0; i < p.value.data.size(); ++i) {
        const double g = p.grad.data[i];
        m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * g;
        v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * g * g;
        p.value.data[i] -= lr * (m.data[i] / c1) / (std::sqrt(v.data[i] / c2) + eps);
      }
    }
  }
};

struct TrainerConfig {
  double learning_rate = 1e-4;
  int batch_size = 128;
  int iterations = 5000;
  uint64_t seed = 1;
  int mc_samples = 1;
  int context_length_max = 4;
  int snapshot_every = 1000;
  int eval_every = 100;
  int eval_studies = 8;
  int eval_mc_samples = 32;

  void validate() const {
    if (!(learning_rate >= 0.0)) throw ConfigError("trainer.learning_rate: negative");
    if (batch_size < 1) throw ConfigError("trainer.batch_size: must be >= 1");
    if (iterations < 0) throw ConfigError("trainer.iterations: negative");
    if (mc_samples < 1) throw ConfigError("trainer.mc_samples: must be >= 1");
    if (context_length_max < 0) throw ConfigError("trainer.context_length_max: negative");
    if (snapshot_every < 1) throw ConfigError("trainer.snapshot_every: must be >= 1");
    if (eval_every < 1) throw ConfigError("trainer.eval_every: must be >= 1");
    if (eval_studies < 1) throw ConfigError("trainer.eval_studies: must be >= 1");
    if (eval_mc_samples < 1) throw ConfigError("trainer.eval_mc_samples: must be >= 1");
  }

  bool operator==(const TrainerConfig&) const = default;
};

// Loss components, in metrics-column order.
inline constexpr int kLossComponents = 6;

struct StepMetrics {
  double loss_total = 0.0;
  double recon_new = 0.0;
  double kl_s_ctx = 0.0;
  double kl_s_prior = 0.0;
  double kl_n_prior = 0.0;
  double recon_forecast = 0.0;
  double kl_i_refine = 0.0;
  double grad_norm = 0.0;
};

// One optimization step over a batch of studies: both objectives per study,
// uncertainty-weighted combination, backprop, single Adam update.
inline StepMetrics training_step(const std::vector<pk::StudyRecord>& batch, const AicmetModel& model,
                                 ParameterStore& store, const nn::LossWeights& lw, AdamState& adam,
                                 const TrainerConfig& cfg, int64_t step) {
  if (batch.empty()) throw UsageError("training_step: empty batch");
  store.zero_grads();
  StepMetrics metrics;
  const double inv_b = 1.0 / static_cast<double>(batch.size());

  for (size_t j = 0; j < batch.size(); ++j) {
    Rng srng = derive_rng(cfg.seed, {kStreamStep, static_cast<uint64_t>(step), j});
    const pk::StudyRecord& study = batch[j];

    Tape tape(&store);
    pk::HoldoutSplit holdout = pk::partition_holdout(study, srng);
    ElboNewGraph enew =
        elbo_new(tape, model, holdout.context.individuals, holdout.held_out, cfg.mc_samples, srng);
    pk::ForecastSplit fsplit = pk::partition_context_target(study, srng, cfg.context_length_max);
    ElboForecastGraph efore = elbo_forecast(tape, model, study, fsplit, cfg.mc_samples, srng);

    std::vector<Var> components{enew.recon_loss, enew.kl_s_context, enew.kl_s_prior,
                                enew.kl_n_prior, efore.recon_loss, efore.kl_i_refine};
    Var total = nn::weighted_total_loss(tape, components, lw);
    const double total_v = total.value().data[0];
    if (!std::isfinite(total_v))
      throw TrainError("non-finite loss at step " + std::to_string(step) + ", batch slot " +
                       std::to_string(j) + " (seed " + std::to_string(cfg.seed) + ")");
    Var contribution = scale(total, inv_b);
    tape.backward(contribution);
    tape.accumulate_param_grads(store);

    metrics.loss_total += total_v * inv_b;
    metrics.recon_new += enew.values.reconstruction * inv_b;
    metrics.kl_s_ctx += enew.values.kl_s_context * inv_b;
    metrics.kl_s_prior += enew.values.kl_s_prior * inv_b;
    metrics.kl_n_prior += enew.values.kl_n_prior * inv_b;
    metrics.recon_forecast += efore.values.reconstruction * inv_b;
    metrics.kl_i_refine += efore.values.kl_i_refine * inv_b;
  }
  metrics.grad_norm = store.grad_norm();
  adam.step(store, cfg.learning_rate);
  return metrics;
}

// ---- snapshots ----

inline constexpr int kSnapshotFormatVersion = 1;

inline nlohmann::ordered_json model_config_to_json(const ModelConfig& cfg) {
  return {{"hidden", cfg.hidden},
          {"latent", cfg.latent},
          {"heads", cfg.heads},
          {"layers", cfg.layers},
          {"log_scale_targets", cfg.log_scale_targets}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.hidden = j.at("hidden").get<int>();
  cfg.latent = j.at("latent").get<int>();
  cfg.heads = j.at("heads").get<int>();
  cfg.layers = j.at("layers").get<int>();
  cfg.log_scale_targets = j.at("log_scale_targets").get<bool>();
  cfg.validate();
  return cfg;
}

inline void save_snapshot(const std::string& path, const ModelConfig& model_cfg,
                          const ParameterStore& store, const AdamState& adam, int64_t step) {
  nlohmann::ordered_json doc;
  doc["format_version"] = kSnapshotFormatVersion;
  doc["model"] = model_config_to_json(model_cfg);
  doc["step"] = step;
  doc["adam"] = {{"step_count", adam.step_count},
                 {"beta1", adam.beta1},
                 {"beta2", adam.beta2},
                 {"eps", adam.eps}};
  doc["params"] = nlohmann::ordered_json::array();
  for (const auto& [name, p] : store.entries()) {
    nlohmann::ordered_json jp;
    jp["name"] = name;
    jp["shape"] = p.value.shape;
    jp["value"] = p.value.data;
    auto it = adam.moments.find(name);
    if (it != adam.moments.end()) {
      jp["m"] = it->second.first.data;
      jp["v"] = it->second.second.data;
    }
    doc["params"].push_back(std::move(jp));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << doc.dump(2) << "\n";
}

struct Snapshot {
  ModelConfig model_cfg;
  ParameterStore store;
  AdamState adam;
  int64_t step = 0;
};

inline Snapshot load_snapshot(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open snapshot " + path);
  nlohmann::json doc;
  in >> doc;
  if (!doc.contains("format_version") || doc.at("format_version").get<int>() != kSnapshotFormatVersion)
    throw std::runtime_error("snapshot " + path + ": unsupported format version");
  Snapshot snap;
  snap.model_cfg = model_config_from_json(doc.at("model"));
  snap.step = doc.at("step").get<int64_t>();
  snap.adam.step_count = doc.at("adam").at("step_count").get<int64_t>();
  snap.adam.beta1 = doc.at("adam").at("beta1").get<double>();
  snap.adam.beta2 = doc.at("adam").at("beta2").get<double>();
  snap.adam.eps = doc.at("adam").at("eps").get<double>();
  for (const auto& jp : doc.at("params")) {
    const std::string name = jp.at("name").get<std::string>();
    Tensor value(jp.at("shape").get<std::vector<int>>(), jp.at("value").get<std::vector<double>>());
    snap.store.add(name, value);
    if (jp.contains("m")) {
      Tensor m(value.shape, jp.at("m").get<std::vector<double>>());
      Tensor v(value.shape, jp.at("v").get<std::vector<double>>());
      snap.adam.moments.emplace(name, std::make_pair(std::move(m), std::move(v)));
    }
  }
  return snap;
}

// ---- training loop ----

inline constexpr const char* kMetricsHeader =
    "step,loss_total,recon_new,kl_s_ctx,kl_s_prior,kl_n_prior,recon_forecast,kl_i_refine,"
    "grad_norm,wall_time_s\n";

struct TrainResult {
  int64_t final_step = 0;
  double init_heldout_ll = 0.0;
  double final_heldout_ll = 0.0;
  std::string snapshot_path;
};

inline std::string loss_weight_name() { return "loss.u"; }

inline ParameterStore init_parameters(const ModelConfig& model_cfg, uint64_t seed) {
  ParameterStore store;
  AicmetModel model(model_cfg);
  Rng rng = derive_rng(seed, {kStreamInit});
  model.init_params(store, rng);
  nn::LossWeights lw(loss_weight_name(), kLossComponents);
  lw.init(store, rng);
  return store;
}

// Streams freshly simulated studies, runs both objectives, snapshots
// periodically and logs metrics. Studies depend only on (seed, global
// study index), so resumed runs reproduce the unbroken run.
inline TrainResult train(const TrainerConfig& cfg, const pk::SimulationConfig& sim_cfg,
                         const ModelConfig& model_cfg, const std::string& out_dir,
                         const std::string& resume_snapshot = "") {
  cfg.validate();
  sim_cfg.validate();
  model_cfg.validate();
  if (sim_cfg.hyper.individuals.lo < 2)
    throw ConfigError("training requires at least 2 individuals per study");
  std::filesystem::create_directories(out_dir);

  AicmetModel model(model_cfg);
  ParameterStore store;
  AdamState adam;
  int64_t start_step = 0;
  if (!resume_snapshot.empty()) {
    Snapshot snap = load_snapshot(resume_snapshot);
    if (!(snap.model_cfg == model_cfg))
      throw ConfigError("snapshot model config does not match run config");
    store = std::move(snap.store);
    adam = std::move(snap.adam);
    start_step = snap.step;
  } else {
    store = init_parameters(model_cfg, cfg.seed);
    adam.ensure(store);
  }
  nn::LossWeights lw(loss_weight_name(), kLossComponents);

  // Held-out studies from a dedicated stream, never touched by training.
  std::vector<pk::StudyRecord> eval_studies;
  for (int i = 0; i < cfg.eval_studies; ++i) {
    Rng rng = derive_rng(cfg.seed, {kStreamEval, static_cast<uint64_t>(i)});
    eval_studies.push_back(pk::generate_study(sim_cfg, rng, "eval_" + std::to_string(i)));
  }
  EvalProtocolConfig eval_cfg;
  eval_cfg.mc_samples = cfg.eval_mc_samples;
  auto heldout_ll = [&](int64_t step) {
    double acc = 0.0;
    for (size_t i = 0; i < eval_studies.size(); ++i) {
      Rng rng = derive_rng(cfg.seed, {kStreamEval, 0xf00d, static_cast<uint64_t>(step), i});
      acc += predictive_log_likelihood(model, store, eval_studies[i], eval_cfg, rng);
    }
    return acc / static_cast<double>(eval_studies.size());
  };

  std::ofstream metrics(out_dir + "/metrics.csv", std::ios::binary);
  metrics << kMetricsHeader;
  std::ofstream eval_log(out_dir + "/eval_log.csv", std::ios::binary);
  eval_log << "step,heldout_forecast_ll\n";

  TrainResult result;
  result.final_step = start_step;
  result.init_heldout_ll = heldout_ll(start_step);
  result.final_heldout_ll = result.init_heldout_ll;
  eval_log << start_step << "," << pk::fmt_double(result.init_heldout_ll) << "\n";

  const auto t0 = std::chrono::steady_clock::now();
  for (int64_t step = start_step; step < cfg.iterations; ++step) {
    std::vector<pk::StudyRecord> batch;
    batch.reserve(static_cast<size_t>(cfg.batch_size));
    for (int j = 0; j < cfg.batch_size; ++j) {
      const uint64_t g = static_cast<uint64_t>(step) * cfg.batch_size + static_cast<uint64_t>(j);
      Rng rng = derive_rng(cfg.seed, {kStreamSim, g});
      batch.push_back(pk::generate_study(sim_cfg, rng, "train_" + std::to_string(g)));
    }
    const StepMetrics m = training_step(batch, model, store, lw, adam, cfg, step);
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    metrics << step << "," << pk::fmt_double(m.loss_total) << "," << pk::fmt_double(m.recon_new)
            << "," << pk::fmt_double(m.kl_s_ctx) << "," << pk::fmt_double(m.kl_s_prior) << ","
            << pk::fmt_double(m.kl_n_prior) << "," << pk::fmt_double(m.recon_forecast) << ","
            << pk::fmt_double(m.kl_i_refine) << "," << pk::fmt_double(m.grad_norm) << ","
            << pk::fmt_double(wall) << "\n";

    const int64_t done = step + 1;
    if (done % cfg.eval_every == 0 || done == cfg.iterations) {
      result.final_heldout_ll = heldout_ll(done);
      eval_log << done << "," << pk::fmt_double(result.final_heldout_ll) << "\n";
    }
    if (done % cfg.snapshot_every == 0 && done != cfg.iterations) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "snapshot_step%06lld.json", static_cast<long long>(done));
      save_snapshot(out_dir + "/" + buf, model_cfg, store, adam, done);
    }
    result.final_step = done;
  }
  result.snapshot_path = out_dir + "/snapshot.json";
  save_snapshot(result.snapshot_path, model_cfg, store, adam, result.final_step);
  return result;
}

}  // namespace aicmet
