#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "aicmet/config.hpp"
#include "aicmet/eval.hpp"
#include "aicmet/gradcheck.hpp"
#include "aicmet/objectives.hpp"
#include "aicmet/pk/study_io.hpp"
#include "aicmet/workpool.hpp"

namespace aicmet::cli {

namespace fs = std::filesystem;

inline bool glob_match(const std::string& pattern, const std::string& name) {
  size_t p = 0, n = 0, star = std::string::npos, star_n = 0;
  while (n < name.size()) {
    if (p < pattern.size() && (pattern[p] == '?' || pattern[p] == name[n])) {
      ++p;
      ++n;
    } else if (p < pattern.size() && pattern[p] == '*') {
      star = p++;
      star_n = n;
    } else if (star != std::string::npos) {
      p = star + 1;
      n = ++star_n;
    } else {
      return false;
    }
  }
  while (p < pattern.size() && pattern[p] == '*') ++p;
  return p == pattern.size();
}

// Expands a pattern whose final component may contain * or ?; returns sorted paths.
inline std::vector<std::string> expand_glob(const std::string& pattern) {
  if (pattern.empty()) throw ConfigError("--studies: empty pattern");
  const fs::path full(pattern);
  const std::string file_pat = full.filename().string();
  if (file_pat.find('*') == std::string::npos && file_pat.find('?') == std::string::npos) {
    if (!fs::exists(full)) throw ConfigError("--studies: no such file " + pattern);
    return {pattern};
  }
  const fs::path dir = full.parent_path().empty() ? fs::path(".") : full.parent_path();
  if (!fs::is_directory(dir)) throw ConfigError("--studies: no such directory " + dir.string());
  std::vector<std::string> out;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && glob_match(file_pat, entry.path().filename().string()))
      out.push_back(entry.path().string());
  std::sort(out.begin(), out.end());
  if (out.empty()) throw ConfigError("--studies: pattern matched no files: " + pattern);
  return out;
}

inline std::vector<pk::StudyRecord> load_studies(const std::string& pattern) {
  std::vector<pk::StudyRecord> studies;
  for (const auto& path : expand_glob(pattern))
    for (auto& s : pk::load_study_file(path)) studies.push_back(std::move(s));
  return studies;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << text;
}

// Every command echoes the resolved config (with the seed) into its output
// directory so any artifact is reproducible from that file alone.
inline void echo_config(const RunConfig& cfg) {
  fs::create_directories(cfg.io.out_dir);
  write_text(cfg.io.out_dir + "/config_resolved.json", config_to_json(cfg).dump(2) + "\n");
}

inline Snapshot require_snapshot(const RunConfig& cfg) {
  if (cfg.io.snapshot.empty()) throw ConfigError("--snapshot is required for this command");
  return load_snapshot(cfg.io.snapshot);
}

inline int cmd_simulate(const RunConfig& cfg, bool verbose) {
  echo_config(cfg);
  std::vector<pk::StudyRecord> studies(static_cast<size_t>(cfg.io.n_studies));
  parallel_for(cfg.io.n_studies, [&](int i) {
    Rng rng = derive_rng(cfg.seed, {kStreamSim, static_cast<uint64_t>(i)});
    char name[32];
    std::snprintf(name, sizeof(name), "study_%06d", i);
    studies[static_cast<size_t>(i)] = pk::generate_study(cfg.simulation, rng, name);
  });
  for (int i = 0; i < cfg.io.n_studies; ++i) {
    const auto& s = studies[static_cast<size_t>(i)];
    pk::save_study_file(s, cfg.io.out_dir + "/" + s.study_id + ".json", cfg.io.include_latents);
  }
  write_text(cfg.io.out_dir + "/observations.csv", pk::observations_csv(studies));
  if (verbose)
    std::cout << "simulated " << cfg.io.n_studies << " studies into " << cfg.io.out_dir << "\n";
  return 0;
}

inline int cmd_train(const RunConfig& cfg, bool verbose) {
  echo_config(cfg);
  const TrainResult result =
      train(cfg.trainer, cfg.simulation, cfg.model, cfg.io.out_dir, cfg.io.snapshot);
  std::cout << "trained to step " << result.final_step << "; held-out forecast log-likelihood "
            << pk::fmt_double(result.init_heldout_ll) << " -> "
            << pk::fmt_double(result.final_heldout_ll) << "\n";
  if (verbose) std::cout << "snapshot: " << result.snapshot_path << "\n";
  return 0;
}

inline int cmd_predict(const RunConfig& cfg, bool verbose) {
  echo_config(cfg);
  Snapshot snap = require_snapshot(cfg);
  AicmetModel model(snap.model_cfg);
  const auto studies = load_studies(cfg.io.studies);
  for (size_t si = 0; si < studies.size(); ++si) {
    const pk::StudyRecord& study = studies[si];
    std::string csv = "individual,time,y_obs,y_pred_mean,y_pred_p5,y_pred_p95\n";
    for (int i = 0; i < study.n_individuals(); ++i) {
      const auto& rec = study.individuals[static_cast<size_t>(i)];
      if (rec.n_valid() <= cfg.eval.context_observations) continue;
      pk::StudyRecord others;
      others.study_id = study.study_id;
      for (int k = 0; k < study.n_individuals(); ++k)
        if (k != i) others.individuals.push_back(study.individuals[static_cast<size_t>(k)]);
      const auto ctx = pk::take_first_valid(rec, cfg.eval.context_observations);
      const auto tgt = pk::drop_first_valid(rec, cfg.eval.context_observations);
      Rng rng = derive_rng(cfg.seed, {kStreamEval, 0x1, si, static_cast<uint64_t>(i)});
      const PredictionReport rep =
          posterior_predictive(model, snap.store, others, ctx, tgt.times, cfg.eval, rng, &tgt.obs);
      for (size_t j = 0; j < rep.times.size(); ++j)
        csv += std::to_string(i) + "," + pk::fmt_double(rep.times[j]) + "," +
               pk::fmt_double(rep.observed[j]) + "," + pk::fmt_double(rep.pred_mean[j]) + "," +
               pk::fmt_double(rep.quantiles[j].front()) + "," +
               pk::fmt_double(rep.quantiles[j].back()) + "\n";
    }
    write_text(cfg.io.out_dir + "/predictions_" + study.study_id + ".csv", csv);
    if (verbose) std::cout << "predictions for " << study.study_id << " written\n";
  }
  return 0;
}

inline int cmd_synthesize(const RunConfig& cfg, bool verbose) {
  echo_config(cfg);
  Snapshot snap = require_snapshot(cfg);
  AicmetModel model(snap.model_cfg);
  const auto studies = load_studies(cfg.io.studies);
  for (size_t si = 0; si < studies.size(); ++si) {
    const pk::StudyRecord& study = studies[si];
    Rng rng = derive_rng(cfg.seed, {kStreamEval, 0x2, si});
    pk::StudyRecord virtual_study;
    virtual_study.study_id = study.study_id + "_virtual";
    virtual_study.individuals = synthesize_population(model, snap.store, study, cfg.io.n_virtual,
                                                      cfg.simulation.hyper.dose, cfg.eval, rng);
    pk::save_study_file(virtual_study, cfg.io.out_dir + "/" + virtual_study.study_id + ".json",
                        /*include_latents=*/false);
    if (verbose) std::cout << virtual_study.study_id << ": " << cfg.io.n_virtual << " individuals\n";
  }
  return 0;
}

inline int cmd_vpc(const RunConfig& cfg, bool verbose) {
  echo_config(cfg);
  Snapshot snap = require_snapshot(cfg);
  AicmetModel model(snap.model_cfg);
  const auto studies = load_studies(cfg.io.studies);
  for (size_t si = 0; si < studies.size(); ++si) {
    const pk::StudyRecord& study = studies[si];
    Rng rng = derive_rng(cfg.seed, {kStreamEval, 0x3, si});
    const auto replicates = simulate_vpc_replicates(model, snap.store, study, cfg.eval, rng);
    const VpcTable table =
        vpc_percentiles(canonical_schedule(study), replicates, study, cfg.eval);
    write_text(cfg.io.out_dir + "/vpc_" + study.study_id + ".csv", vpc_csv(table));
    for (const auto& w : table.warnings) std::cerr << study.study_id << ": " << w << "\n";
    if (verbose) std::cout << "vpc_" << study.study_id << ".csv: " << table.rows.size() << " bins\n";
  }
  return 0;
}

inline int cmd_eval(const RunConfig& cfg, bool /*verbose*/) {
  echo_config(cfg);
  Snapshot snap = require_snapshot(cfg);
  AicmetModel model(snap.model_cfg);
  const auto studies = load_studies(cfg.io.studies);
  std::string csv = "study_id,individual,n_targets,log_rmse,note\n";
  for (size_t si = 0; si < studies.size(); ++si) {
    const pk::StudyRecord& study = studies[si];
    Rng rng = derive_rng(cfg.seed, {kStreamEval, 0x4, si});
    const StudyEval ev = evaluate_study(model, snap.store, study, cfg.eval, rng);
    for (const auto& ind : ev.per_individual) {
      if (ind.skip_reason.empty())
        csv += study.study_id + "," + std::to_string(ind.index) + "," +
               std::to_string(ind.n_targets) + "," + pk::fmt_double(ind.rmse) + ",\n";
      else
        csv += study.study_id + "," + std::to_string(ind.index) + ",0,,skipped: " +
               ind.skip_reason + "\n";
    }
    csv += study.study_id + ",pooled," + std::to_string(ev.n_pooled_points) + "," +
           pk::fmt_double(ev.pooled_log_rmse) + ",\n";
    std::cout << study.study_id << " pooled log-RMSE " << pk::fmt_double(ev.pooled_log_rmse)
              << " over " << ev.n_pooled_points << " points\n";
  }
  write_text(cfg.io.out_dir + "/eval_report.csv", csv);
  return 0;
}

inline int cmd_gradcheck(const RunConfig& cfg, bool verbose) {
  echo_config(cfg);
  ParameterStore store = init_parameters(cfg.model, cfg.seed);
  AicmetModel model(cfg.model);
  nn::LossWeights lw(loss_weight_name(), kLossComponents);

  pk::SimulationConfig sim = cfg.simulation;
  sim.hyper.individuals = {3, 3};
  sim.hyper.peripheral = {0, 1};
  sim.schedule_size = {4, 6};
  Rng sim_rng = derive_rng(cfg.seed, {kStreamSim, 0xdead});
  const pk::StudyRecord study = pk::generate_study(sim, sim_rng, "gradcheck");

  auto build = [&](Tape& tape) {
    Rng rng = derive_rng(cfg.seed, {kStreamStep, 0xbeef});
    pk::HoldoutSplit holdout = pk::partition_holdout(study, rng);
    ElboNewGraph enew = elbo_new(tape, model, holdout.context.individuals, holdout.held_out, 1, rng);
    pk::ForecastSplit split = pk::partition_context_target(study, rng, cfg.trainer.context_length_max);
    ElboForecastGraph efore = elbo_forecast(tape, model, study, split, 1, rng);
    std::vector<Var> components{enew.recon_loss, enew.kl_s_context, enew.kl_s_prior,
                                enew.kl_n_prior, efore.recon_loss, efore.kl_i_refine};
    return nn::weighted_total_loss(tape, components, lw);
  };

  GradCheckOptions opt;
  opt.max_elems_per_param = 4;
  const GradCheckReport report = grad_check(build, store, opt);
  std::string text;
  for (const auto& e : report.entries) {
    text += e.name + ": max_rel_dev=" + pk::fmt_double(e.max_rel_dev) + " checked=" +
            std::to_string(e.checked) + "\n";
    if (verbose) std::cout << text;
  }
  const bool ok = report.pass(1e-4);
  text += std::string("result: ") + (ok ? "PASS" : "FAIL") + " worst=" +
          pk::fmt_double(report.worst) + " tol=0.0001\n";
  write_text(cfg.io.out_dir + "/gradcheck_report.txt", text);
  std::cout << (ok ? "gradcheck PASS" : "gradcheck FAIL") << " (worst relative deviation "
            << pk::fmt_double(report.worst) << ")\n";
  return ok ? 0 : 1;
}

inline int dispatch(const std::string& command, const RunConfig& cfg, bool verbose = false) {
  if (command == "simulate") return cmd_simulate(cfg, verbose);
  if (command == "train") return cmd_train(cfg, verbose);
  if (command == "predict") return cmd_predict(cfg, verbose);
  if (command == "synthesize") return cmd_synthesize(cfg, verbose);
  if (command == "vpc") return cmd_vpc(cfg, verbose);
  if (command == "eval") return cmd_eval(cfg, verbose);
  if (command == "gradcheck") return cmd_gradcheck(cfg, verbose);
  throw UsageError("unknown command: " + command);
}

}  // namespace aicmet::cli
