#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "aicmet/nn/primitives.hpp"
#include "aicmet/params.hpp"
#include "aicmet/pk/simulate.hpp"
#include "aicmet/rng.hpp"
#include "aicmet/tape.hpp"

namespace aicmet {

struct ModelConfig {
  int hidden = 128;
  int latent = 32;
  int heads = 4;
  int layers = 2;
  bool log_scale_targets = true;

  void validate() const {
    if (hidden < 3) throw ConfigError("model.hidden: too small");
    if (latent < 1) throw ConfigError("model.latent: must be >= 1");
    if (heads < 1 || hidden % heads != 0)
      throw ConfigError("model.heads: must divide model.hidden");
    if (layers < 0) throw ConfigError("model.layers: negative depth");
  }

  bool operator==(const ModelConfig&) const = default;
};

// Diagonal Gaussian over a latent code.
struct GaussianPosterior {
  Tensor mean;
  Tensor log_var;
};

struct PosteriorVar {
  Var mean;     // (1 x Z)
  Var log_var;  // (1 x Z)

  GaussianPosterior materialize() const {
    Tensor m = mean.value();
    Tensor lv = log_var.value();
    m.shape = {static_cast<int>(m.data.size())};
    lv.shape = {static_cast<int>(lv.data.size())};
    return GaussianPosterior{std::move(m), std::move(lv)};
  }
};

enum class LatentSource { kPosterior, kPrior };

struct LatentSample {
  Var z;  // (1 x Z)
  LatentSource source = LatentSource::kPosterior;
};

// Per-time predictive Gaussian on log-concentration scale.
struct PredictiveVar {
  std::vector<double> times;
  Var mean;     // (T)
  Var log_var;  // (T)
};

struct PredictiveGaussian {
  std::vector<double> times;
  std::vector<double> mean;
  std::vector<double> log_var;
};

// Transition triples (y_j, tau_j, dtau_j), j = 1..T-1, over valid entries.
struct TransitionFeatures {
  std::vector<double> y, tau, dtau;
};

inline TransitionFeatures make_transition_features(const pk::IndividualRecord& rec, bool log_scale) {
  std::vector<double> times, values;
  for (size_t j = 0; j < rec.times.size(); ++j) {
    if (!rec.mask[j]) continue;
    times.push_back(rec.times[j]);
    values.push_back(rec.obs[j]);
  }
  TransitionFeatures f;
  for (size_t j = 0; j + 1 < times.size(); ++j) {
    const double dt = times[j + 1] - times[j];
    if (!(dt > 0.0)) throw pk::ModelError("transition features: non-increasing valid times");
    f.y.push_back(log_scale ? std::log(values[j]) : values[j]);
    f.tau.push_back(times[j]);
    f.dtau.push_back(dt);
  }
  return f;
}

// Encoder stack (per-transition embeddings -> GRU -> curve-shape
// self-attention -> attention pooling -> Gaussian heads) and the
// functional-attention decoder.
struct AicmetModel {
  ModelConfig cfg;

  nn::Linear emb_y, emb_tau, emb_dtau;
  std::string null_ctx;
  nn::GruCell gru;
  std::vector<nn::TransformerBlock> enc_blocks;
  nn::AttentionBlock pool_i;
  std::string query_i;
  nn::FeedForward head_i_mu, head_i_lv;
  nn::AttentionBlock pool_s;
  std::string query_s;
  nn::FeedForward head_s_mu, head_s_lv;

  nn::Linear dec_time, dec_dose;
  nn::FeedForward dec_key, dec_value;
  nn::TransformerBlock dec_block;
  nn::FeedForward dec_head;

  explicit AicmetModel(const ModelConfig& c) : cfg(c) {
    cfg.validate();
    const int H = cfg.hidden;
    const int Z = cfg.latent;
    const int wy = (H + 2) / 3;
    emb_y = nn::Linear("enc.emb_y", 1, wy);
    emb_tau = nn::Linear("enc.emb_tau", 1, wy);
    emb_dtau = nn::Linear("enc.emb_dtau", 1, H - 2 * wy);
    null_ctx = "enc.null_ctx";
    gru = nn::GruCell("enc.gru", H, H);
    for (int l = 0; l < cfg.layers; ++l)
      enc_blocks.emplace_back("enc.block" + std::to_string(l), H, cfg.heads);
    pool_i = nn::AttentionBlock("enc.pool_i", H, cfg.heads);
    query_i = "enc.q_i";
    head_i_mu = nn::FeedForward("enc.head_i_mu", H, H, Z);
    head_i_lv = nn::FeedForward("enc.head_i_lv", H, H, Z);
    pool_s = nn::AttentionBlock("enc.pool_s", H, cfg.heads);
    query_s = "enc.q_s";
    head_s_mu = nn::FeedForward("enc.head_s_mu", H, H, Z);
    head_s_lv = nn::FeedForward("enc.head_s_lv", H, H, Z);

    dec_time = nn::Linear("dec.time", 1, H);
    dec_dose = nn::Linear("dec.dose", 3, H);
    dec_key = nn::FeedForward("dec.key", 2 * Z + H, H, H);
    dec_value = nn::FeedForward("dec.value", 2 * Z + H, H, H);
    dec_block = nn::TransformerBlock("dec.block", H, cfg.heads);
    dec_head = nn::FeedForward("dec.head", H, H, 2);
  }

  void init_params(ParameterStore& ps, Rng& rng) const {
    emb_y.init(ps, rng);
    emb_tau.init(ps, rng);
    emb_dtau.init(ps, rng);
    ps.add(null_ctx, glorot_uniform(1, cfg.hidden, rng));
    gru.init(ps, rng);
    for (const auto& b : enc_blocks) b.init(ps, rng);
    pool_i.init(ps, rng);
    ps.add(query_i, glorot_uniform(1, cfg.hidden, rng));
    head_i_mu.init(ps, rng);
    head_i_lv.init(ps, rng);
    pool_s.init(ps, rng);
    ps.add(query_s, glorot_uniform(1, cfg.hidden, rng));
    head_s_mu.init(ps, rng);
    head_s_lv.init(ps, rng);
    dec_time.init(ps, rng);
    dec_dose.init(ps, rng);
    dec_key.init(ps, rng);
    dec_value.init(ps, rng);
    dec_block.init(ps, rng);
    dec_head.init(ps, rng);
  }

  // (T_i - 1) x H transition embeddings; a learned null row stands in when
  // fewer than two valid observations exist (zero/one-shot contexts).
  Var embed_transitions(Tape& t, const pk::IndividualRecord& rec) const {
    const TransitionFeatures f = make_transition_features(rec, cfg.log_scale_targets);
    if (f.y.empty()) return t.param(null_ctx);
    Var ey = emb_y(t, t.constant(Tensor::col(f.y)));
    Var et = emb_tau(t, t.constant(Tensor::col(f.tau)));
    Var ed = emb_dtau(t, t.constant(Tensor::col(f.dtau)));
    return concat({ey, et, ed}, 1);
  }

  // c_i: longitudinal representation pooled to one row.
  Var individual_summary(Tape& t, const pk::IndividualRecord& rec) const {
    Var h = gru.forward(t, embed_transitions(t, rec));
    for (const auto& block : enc_blocks) h = block(t, h, h, h);
    return pool_i(t, t.param(query_i), h, h);
  }

  PosteriorVar heads_individual(Tape& t, Var c) const {
    return PosteriorVar{head_i_mu(t, c), head_i_lv(t, c)};
  }

  PosteriorVar encode_individual(Tape& t, const pk::IndividualRecord& rec) const {
    return heads_individual(t, individual_summary(t, rec));
  }

  PosteriorVar pool_study_summaries(Tape& t, const std::vector<Var>& summaries) const {
    if (summaries.empty()) throw UsageError("encode_study: empty study");
    Var stacked = summaries.size() == 1 ? summaries[0] : concat(summaries, 0);
    Var cs = pool_s(t, t.param(query_s), stacked, stacked);
    return PosteriorVar{head_s_mu(t, cs), head_s_lv(t, cs)};
  }

  // Individuals with no valid observation are padding and take no part in
  // the study pooling.
  PosteriorVar encode_study(Tape& t, const pk::StudyRecord& s) const {
    std::vector<Var> summaries;
    for (const auto& rec : s.individuals)
      if (rec.n_valid() > 0) summaries.push_back(individual_summary(t, rec));
    return pool_study_summaries(t, summaries);
  }

  // Functional attention: time-query embeddings cross-attend to the single
  // latent/dose context row; per-time Gaussian head on log scale.
  PredictiveVar decode_at_times(Tape& t, const std::vector<double>& times, Var z_n, Var z_s,
                                const pk::DoseEvent& dose) const {
    if (times.empty()) throw UsageError("decode_at_times: no query times");
    for (double tau : times)
      if (!(tau >= 0.0) || !std::isfinite(tau))
        throw UsageError("decode_at_times: query times must be finite and nonnegative");
    const int T = static_cast<int>(times.size());
    Var q = dec_time(t, t.constant(Tensor::col(times)));
    Tensor dose_feat({1, 3}, {std::log(dose.amount), dose.route == pk::Route::kOral ? 1.0 : 0.0,
                              dose.route == pk::Route::kIntravenous ? 1.0 : 0.0});
    Var u = dec_dose(t, t.constant(std::move(dose_feat)));
    Var kv_in = concat({z_n, z_s, u}, 1);
    Var key = dec_key(t, kv_in);
    Var value = dec_value(t, kv_in);
    Var c = dec_block(t, q, key, value);
    Var out = dec_head(t, c);
    PredictiveVar p;
    p.times = times;
    p.mean = reshape(slice_cols(out, 0, 1), {T});
    p.log_var = reshape(slice_cols(out, 1, 2), {T});
    return p;
  }
};

// Reparameterized draw; gradients flow to mean and log-variance.
inline LatentSample sample_latent(Tape& t, const PosteriorVar& p, Rng& rng) {
  const int z = p.mean.value().shape[1];
  Tensor eps = Tensor::zeros({1, z});
  for (auto& e : eps.data) e = rng.normal();
  Var zvar = add(p.mean, mul(vexp(scale(p.log_var, 0.5)), t.constant(std::move(eps))));
  return LatentSample{zvar, LatentSource::kPosterior};
}

inline LatentSample sample_latent_prior(Tape& t, int latent_dim, Rng& rng) {
  Tensor eps = Tensor::zeros({1, latent_dim});
  for (auto& e : eps.data) e = rng.normal();
  return LatentSample{t.constant(std::move(eps)), LatentSource::kPrior};
}

inline Tensor sample_gaussian_row(const GaussianPosterior& p, Rng& rng) {
  const int z = static_cast<int>(p.mean.data.size());
  Tensor out = Tensor::zeros({1, z});
  for (int i = 0; i < z; ++i)
    out.data[static_cast<size_t>(i)] =
        p.mean.data[static_cast<size_t>(i)] +
        std::exp(0.5 * p.log_var.data[static_cast<size_t>(i)]) * rng.normal();
  return out;
}

}  // namespace aicmet
