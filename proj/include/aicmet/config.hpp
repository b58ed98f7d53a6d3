#pragma once

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "aicmet/eval.hpp"
#include "aicmet/model.hpp"
#include "aicmet/objectives.hpp"
#include "aicmet/pk/simulate.hpp"

namespace aicmet {

struct IoConfig {
  std::string out_dir = "out";
  std::string snapshot;
  std::string studies;
  int n_studies = 1;
  int n_virtual = 10;
  bool include_latents = true;

  void validate() const {
    if (n_studies < 1) throw ConfigError("io.n_studies: must be >= 1");
    if (n_virtual < 1) throw ConfigError("io.n_virtual: must be >= 1");
  }

  bool operator==(const IoConfig&) const = default;
};

struct RunConfig {
  uint64_t seed = 1;
  IoConfig io;
  pk::SimulationConfig simulation;
  ModelConfig model;
  TrainerConfig trainer;
  EvalProtocolConfig eval;

  void validate() const {
    io.validate();
    simulation.validate();
    model.validate();
    trainer.validate();
    eval.validate();
  }

  bool operator==(const RunConfig&) const = default;
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                       const std::string& path) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
  for (const auto& item : j.items())
    if (!allowed.count(item.key())) throw ConfigError(path + "." + item.key() + ": unknown key");
}

inline void read_range(const nlohmann::json& j, const char* key, pk::Range& out,
                       const std::string& path) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_array() || v.size() != 2) throw ConfigError(path + "." + key + ": expected [lo, hi]");
  out.lo = v[0].get<double>();
  out.hi = v[1].get<double>();
}

inline void read_int_range(const nlohmann::json& j, const char* key, pk::IntRange& out,
                           const std::string& path) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_array() || v.size() != 2) throw ConfigError(path + "." + key + ": expected [lo, hi]");
  out.lo = v[0].get<int>();
  out.hi = v[1].get<int>();
}

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline RunConfig parse_config(const nlohmann::json& doc) {
  RunConfig cfg;
  detail::check_keys(doc, {"seed", "io", "simulation", "model", "trainer", "eval"}, "config");
  detail::read_field(doc, "seed", cfg.seed);

  if (doc.contains("io")) {
    const auto& j = doc.at("io");
    detail::check_keys(j, {"out_dir", "snapshot", "studies", "n_studies", "n_virtual", "include_latents"},
                       "io");
    detail::read_field(j, "out_dir", cfg.io.out_dir);
    detail::read_field(j, "snapshot", cfg.io.snapshot);
    detail::read_field(j, "studies", cfg.io.studies);
    detail::read_field(j, "n_studies", cfg.io.n_studies);
    detail::read_field(j, "n_virtual", cfg.io.n_virtual);
    detail::read_field(j, "include_latents", cfg.io.include_latents);
  }

  if (doc.contains("simulation")) {
    const auto& j = doc.at("simulation");
    detail::check_keys(j, {"grid_steps", "schedule_size", "hyperprior"}, "simulation");
    detail::read_field(j, "grid_steps", cfg.simulation.grid_steps);
    detail::read_int_range(j, "schedule_size", cfg.simulation.schedule_size, "simulation");
    if (j.contains("hyperprior")) {
      const auto& h = j.at("hyperprior");
      detail::check_keys(h,
                         {"log_ka_mean", "log_ke_mean", "log_v_mean", "log_transfer_mean", "mean_sd",
                          "lambda_sq", "stationary_var", "peripheral", "individuals", "dose_amount",
                          "dose_p_oral", "sigma_obs"},
                         "simulation.hyperprior");
      auto& hp = cfg.simulation.hyper;
      detail::read_range(h, "log_ka_mean", hp.m_log_ka, "simulation.hyperprior");
      detail::read_range(h, "log_ke_mean", hp.m_log_ke, "simulation.hyperprior");
      detail::read_range(h, "log_v_mean", hp.m_log_v, "simulation.hyperprior");
      detail::read_range(h, "log_transfer_mean", hp.m_log_transfer, "simulation.hyperprior");
      detail::read_range(h, "mean_sd", hp.mean_sd, "simulation.hyperprior");
      detail::read_range(h, "lambda_sq", hp.lambda_sq, "simulation.hyperprior");
      detail::read_range(h, "stationary_var", hp.stationary_var, "simulation.hyperprior");
      detail::read_int_range(h, "peripheral", hp.peripheral, "simulation.hyperprior");
      detail::read_int_range(h, "individuals", hp.individuals, "simulation.hyperprior");
      detail::read_range(h, "dose_amount", hp.dose.amount, "simulation.hyperprior");
      detail::read_field(h, "dose_p_oral", hp.dose.p_oral);
      detail::read_range(h, "sigma_obs", hp.sigma_obs, "simulation.hyperprior");
    }
  }

  if (doc.contains("model")) {
    const auto& j = doc.at("model");
    detail::check_keys(j, {"hidden", "latent", "heads", "layers", "log_scale_targets"}, "model");
    detail::read_field(j, "hidden", cfg.model.hidden);
    detail::read_field(j, "latent", cfg.model.latent);
    detail::read_field(j, "heads", cfg.model.heads);
    detail::read_field(j, "layers", cfg.model.layers);
    detail::read_field(j, "log_scale_targets", cfg.model.log_scale_targets);
  }

  if (doc.contains("trainer")) {
    const auto& j = doc.at("trainer");
    detail::check_keys(j,
                       {"learning_rate", "batch_size", "iterations", "mc_samples",
                        "context_length_max", "snapshot_every", "eval_every", "eval_studies",
                        "eval_mc_samples"},
                       "trainer");
    detail::read_field(j, "learning_rate", cfg.trainer.learning_rate);
    detail::read_field(j, "batch_size", cfg.trainer.batch_size);
    detail::read_field(j, "iterations", cfg.trainer.iterations);
    detail::read_field(j, "mc_samples", cfg.trainer.mc_samples);
    detail::read_field(j, "context_length_max", cfg.trainer.context_length_max);
    detail::read_field(j, "snapshot_every", cfg.trainer.snapshot_every);
    detail::read_field(j, "eval_every", cfg.trainer.eval_every);
    detail::read_field(j, "eval_studies", cfg.trainer.eval_studies);
    detail::read_field(j, "eval_mc_samples", cfg.trainer.eval_mc_samples);
  }

  if (doc.contains("eval")) {
    const auto& j = doc.at("eval");
    detail::check_keys(
        j, {"context_observations", "mc_samples", "vpc_percentiles", "vpc_replicates", "time_bins"},
        "eval");
    detail::read_field(j, "context_observations", cfg.eval.context_observations);
    detail::read_field(j, "mc_samples", cfg.eval.mc_samples);
    detail::read_field(j, "vpc_percentiles", cfg.eval.vpc_percentiles);
    detail::read_field(j, "vpc_replicates", cfg.eval.vpc_replicates);
    detail::read_field(j, "time_bins", cfg.eval.time_bins);
  }

  cfg.trainer.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

inline nlohmann::ordered_json config_to_json(const RunConfig& cfg) {
  nlohmann::ordered_json doc;
  doc["seed"] = cfg.seed;
  doc["io"] = {{"out_dir", cfg.io.out_dir},       {"snapshot", cfg.io.snapshot},
               {"studies", cfg.io.studies},       {"n_studies", cfg.io.n_studies},
               {"n_virtual", cfg.io.n_virtual},   {"include_latents", cfg.io.include_latents}};
  const auto& hp = cfg.simulation.hyper;
  doc["simulation"] = {
      {"grid_steps", cfg.simulation.grid_steps},
      {"schedule_size", {cfg.simulation.schedule_size.lo, cfg.simulation.schedule_size.hi}},
      {"hyperprior",
       {{"log_ka_mean", {hp.m_log_ka.lo, hp.m_log_ka.hi}},
        {"log_ke_mean", {hp.m_log_ke.lo, hp.m_log_ke.hi}},
        {"log_v_mean", {hp.m_log_v.lo, hp.m_log_v.hi}},
        {"log_transfer_mean", {hp.m_log_transfer.lo, hp.m_log_transfer.hi}},
        {"mean_sd", {hp.mean_sd.lo, hp.mean_sd.hi}},
        {"lambda_sq", {hp.lambda_sq.lo, hp.lambda_sq.hi}},
        {"stationary_var", {hp.stationary_var.lo, hp.stationary_var.hi}},
        {"peripheral", {hp.peripheral.lo, hp.peripheral.hi}},
        {"individuals", {hp.individuals.lo, hp.individuals.hi}},
        {"dose_amount", {hp.dose.amount.lo, hp.dose.amount.hi}},
        {"dose_p_oral", hp.dose.p_oral},
        {"sigma_obs", {hp.sigma_obs.lo, hp.sigma_obs.hi}}}}};
  doc["model"] = model_config_to_json(cfg.model);
  doc["trainer"] = {{"learning_rate", cfg.trainer.learning_rate},
                    {"batch_size", cfg.trainer.batch_size},
                    {"iterations", cfg.trainer.iterations},
                    {"mc_samples", cfg.trainer.mc_samples},
                    {"context_length_max", cfg.trainer.context_length_max},
                    {"snapshot_every", cfg.trainer.snapshot_every},
                    {"eval_every", cfg.trainer.eval_every},
                    {"eval_studies", cfg.trainer.eval_studies},
                    {"eval_mc_samples", cfg.trainer.eval_mc_samples}};
  doc["eval"] = {{"context_observations", cfg.eval.context_observations},
                 {"mc_samples", cfg.eval.mc_samples},
                 {"vpc_percentiles", cfg.eval.vpc_percentiles},
                 {"vpc_replicates", cfg.eval.vpc_replicates},
                 {"time_bins", cfg.eval.time_bins}};
  return doc;
}

inline RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return parse_config(doc);
}

}  // namespace aicmet
