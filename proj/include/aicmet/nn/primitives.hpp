#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "aicmet/params.hpp"
#include "aicmet/rng.hpp"
#include "aicmet/tape.hpp"

namespace aicmet::nn {

struct Linear {
  std::string w, b;
  int in = 0, out = 0;

  Linear() = default;
  Linear(const std::string& prefix, int in_, int out_)
      : w(prefix + ".w"), b(prefix + ".b"), in(in_), out(out_) {}

  void init(ParameterStore& ps, Rng& rng) const {
    ps.add(w, glorot_uniform(out, in, rng));
    ps.add(b, Tensor::zeros({out}));
  }

  Var operator()(Tape& t, Var x) const { return affine(x, t.param(w), t.param(b)); }
};

// Two linear layers with a tanh between.
struct FeedForward {
  Linear fc1, fc2;

  FeedForward() = default;
  FeedForward(const std::string& prefix, int in, int hidden, int out)
      : fc1(prefix + ".fc1", in, hidden), fc2(prefix + ".fc2", hidden, out) {}

  void init(ParameterStore& ps, Rng& rng) const {
    fc1.init(ps, rng);
    fc2.init(ps, rng);
  }

  Var operator()(Tape& t, Var x) const { return fc2(t, vtanh(fc1(t, x))); }
};

// Gated recurrent unit: update/reset gates and candidate state.
struct GruCell {
  std::string wz, uz, bz, wr, ur, br, wh, uh, bh;
  int in = 0, hidden = 0;

  GruCell() = default;
  GruCell(const std::string& prefix, int in_, int hidden_) : in(in_), hidden(hidden_) {
    wz = prefix + ".wz";
    uz = prefix + ".uz";
    bz = prefix + ".bz";
    wr = prefix + ".wr";
    ur = prefix + ".ur";
    br = prefix + ".br";
    wh = prefix + ".wh";
    uh = prefix + ".uh";
    bh = prefix + ".bh";
  }

  void init(ParameterStore& ps, Rng& rng) const {
    ps.add(wz, glorot_uniform(hidden, in, rng));
    ps.add(uz, glorot_uniform(hidden, hidden, rng));
    ps.add(bz, Tensor::zeros({hidden}));
    ps.add(wr, glorot_uniform(hidden, in, rng));
    ps.add(ur, glorot_uniform(hidden, hidden, rng));
    ps.add(br, Tensor::zeros({hidden}));
    ps.add(wh, glorot_uniform(hidden, in, rng));
    ps.add(uh, glorot_uniform(hidden, hidden, rng));
    ps.add(bh, Tensor::zeros({hidden}));
  }

  Var step(Tape& t, Var h, Var x) const {
    Var z = vsigmoid(add(affine(x, t.param(wz), t.param(bz)), linear(h, t.param(uz))));
    Var r = vsigmoid(add(affine(x, t.param(wr), t.param(br)), linear(h, t.param(ur))));
    Var hc = vtanh(add(affine(x, t.param(wh), t.param(bh)), linear(mul(r, h), t.param(uh))));
    return add(h, mul(z, sub(hc, h)));  // (1-z) h + z hc
  }

  // h_j = cell(h_{j-1}, e_j) with h_0 = 0; returns all h_j stacked.
  Var forward(Tape& t, Var seq) const {
    const int T = seq.value().shape[0];
    if (T < 1) throw UsageError("recurrent_forward: empty sequence");
    Var h = t.constant(Tensor::zeros({1, hidden}));
    std::vector<Var> states;
    states.reserve(static_cast<size_t>(T));
    for (int j = 0; j < T; ++j) {
      h = step(t, h, slice_rows(seq, j, j + 1));
      states.push_back(h);
    }
    return states.size() == 1 ? states[0] : concat(states, 0);
  }
};

// Multi-head scaled dot-product softmax attention with output projection.
struct AttentionBlock {
  std::string wq, wk, wv, wo, bo;
  int width = 0, heads = 0;

  AttentionBlock() = default;
  AttentionBlock(const std::string& prefix, int width_, int heads_) : width(width_), heads(heads_) {
    if (heads < 1 || width % heads != 0)
      throw UsageError("attention: head count must divide hidden width");
    wq = prefix + ".wq";
    wk = prefix + ".wk";
    wv = prefix + ".wv";
    wo = prefix + ".wo";
    bo = prefix + ".bo";
  }

  void init(ParameterStore& ps, Rng& rng) const {
    ps.add(wq, glorot_uniform(width, width, rng));
    ps.add(wk, glorot_uniform(width, width, rng));
    ps.add(wv, glorot_uniform(width, width, rng));
    ps.add(wo, glorot_uniform(width, width, rng));
    ps.add(bo, Tensor::zeros({width}));
  }

  Var operator()(Tape& t, Var q, Var k, Var v, const std::vector<uint8_t>* key_mask = nullptr) const {
    if (k.value().shape[0] < 1) throw UsageError("attention: empty key set");
    if (k.value().shape[0] != v.value().shape[0])
      throw TensorError("attention: key/value length mismatch");
    Var qp = linear(q, t.param(wq));
    Var kp = linear(k, t.param(wk));
    Var vp = linear(v, t.param(wv));
    const int dk = width / heads;
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
    std::vector<Var> head_outs;
    head_outs.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      Var qh = slice_cols(qp, h * dk, (h + 1) * dk);
      Var kh = slice_cols(kp, h * dk, (h + 1) * dk);
      Var vh = slice_cols(vp, h * dk, (h + 1) * dk);
      Var scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dk);
      Var weights = key_mask ? softmax_masked(scores, *key_mask) : softmax(scores);
      head_outs.push_back(matmul(weights, vh));
    }
    Var pooled = head_outs.size() == 1 ? head_outs[0] : concat(head_outs, 1);
    return affine(pooled, t.param(wo), t.param(bo));
  }
};

struct LayerNorm {
  std::string gamma, beta;
  int width = 0;
  static constexpr double kEps = 1e-5;

  LayerNorm() = default;
  LayerNorm(const std::string& prefix, int width_)
      : gamma(prefix + ".gamma"), beta(prefix + ".beta"), width(width_) {}

  void init(ParameterStore& ps, Rng& rng) const {
    (void)rng;
    ps.add(gamma, Tensor::full({width}, 1.0));
    ps.add(beta, Tensor::zeros({width}));
  }

  Var operator()(Tape& t, Var x) const {
    const int T = x.value().shape[0];
    Var centered = sub(x, bcast_col(row_mean(x), width));
    Var inv = rsqrt_eps(row_mean(vsquare(centered)), kEps);
    Var normed = mul(centered, bcast_col(inv, width));
    return add(mul(normed, bcast_row(t.param(gamma), T)), bcast_row(t.param(beta), T));
  }
};

// Pre-norm transformer block: masked attention + residual, feed-forward +
// residual. Works for self-attention (Q = K = V) and cross-attention.
struct TransformerBlock {
  AttentionBlock attn;
  LayerNorm ln1, ln2;
  FeedForward ff;

  TransformerBlock() = default;
  TransformerBlock(const std::string& prefix, int width, int heads)
      : attn(prefix + ".attn", width, heads),
        ln1(prefix + ".ln1", width),
        ln2(prefix + ".ln2", width),
        ff(prefix + ".ff", width, width, width) {}

  void init(ParameterStore& ps, Rng& rng) const {
    attn.init(ps, rng);
    ln1.init(ps, rng);
    ln2.init(ps, rng);
    ff.init(ps, rng);
  }

  Var operator()(Tape& t, Var q, Var k, Var v, const std::vector<uint8_t>* key_mask = nullptr) const {
    Var qn = ln1(t, q);
    Var kn = k.id == q.id ? qn : ln1(t, k);
    Var vn = v.id == k.id ? kn : (v.id == q.id ? qn : ln1(t, v));
    Var a = add(q, attn(t, qn, kn, vn, key_mask));
    return add(a, ff(t, ln2(t, a)));
  }
};

// One trainable nuisance scalar per loss component.
struct LossWeights {
  std::string u;
  int n = 0;

  LossWeights() = default;
  LossWeights(const std::string& name, int n_) : u(name), n(n_) {}

  void init(ParameterStore& ps, Rng& rng) const {
    (void)rng;
    ps.add(u, Tensor::zeros({n}));
  }
};

// sum_l exp(-U_l) L_l + U_l. The +U_l keeps the combiner bounded below with
// optimum at U_l = log L_l.
inline Var weighted_total_loss(Tape& t, const std::vector<Var>& components, const LossWeights& lw) {
  Var u = t.param(lw.u);
  if (static_cast<int>(components.size()) != lw.n)
    throw TensorError("weighted_total_loss: component count mismatch");
  Var total = t.constant(Tensor::scalar(0.0));
  for (size_t l = 0; l < components.size(); ++l) {
    if (components[l].value().numel() != 1) throw UsageError("weighted_total_loss: components must be scalar");
    Var ul = slice(u, static_cast<int>(l), static_cast<int>(l) + 1);
    total = add(total, add(mul(vexp(neg(ul)), components[l]), ul));
  }
  return total;
}

}  // namespace aicmet::nn
