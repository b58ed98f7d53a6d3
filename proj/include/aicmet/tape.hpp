#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "aicmet/params.hpp"
#include "aicmet/tensor.hpp"

namespace aicmet {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class Tape;

// Handle to a node on a tape. Cheap to copy; the tape owns all storage.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
};

// Ordered record of executed differentiable operations. Nodes append in
// execution order, so the record is already topologically sorted and the
// backward sweep visits each node exactly once, in reverse.
class Tape {
 public:
  explicit Tape(const ParameterStore* store = nullptr) : store_(store) {}

  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<int> inputs;
    std::function<void(Tape&, int)> back;
    bool requires_grad = false;
  };

  Var constant(Tensor v) { return emit_leaf(std::move(v), false); }

  Var leaf(Tensor v, bool requires_grad) { return emit_leaf(std::move(v), requires_grad); }

  // Trainable leaf bound to a named store parameter; repeated requests for
  // the same name return the same node.
  Var param(const std::string& name) {
    if (store_ == nullptr) throw UsageError("tape has no parameter store");
    auto it = param_nodes_.find(name);
    if (it != param_nodes_.end()) return Var{this, it->second};
    Var v = emit_leaf(store_->get(name).value, true);
    param_nodes_.emplace(name, v.id);
    return v;
  }

  Var emit(Tensor value, std::vector<int> inputs, std::function<void(Tape&, int)> back) {
#ifndef NDEBUG
    if (!value.all_finite()) throw TensorError("non-finite value in forward pass");
#endif
    Node n;
    n.value = std::move(value);
    n.inputs = std::move(inputs);
    for (int i : n.inputs)
      if (nodes_[static_cast<size_t>(i)].requires_grad) n.requires_grad = true;
    if (n.requires_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  const Tensor& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  Tensor& grad(int id) { return nodes_[static_cast<size_t>(id)].grad; }
  size_t size() const { return nodes_.size(); }

  // Accumulates dLoss/d(node) for every node reachable from loss.
  void backward(Var loss) {
    if (nodes_.empty()) throw UsageError("backward on empty tape");
    if (loss.tape != this) throw UsageError("loss var belongs to another tape");
    if (value(loss.id).numel() != 1) throw UsageError("backward requires a scalar loss");
    for (int i = 0; i <= loss.id; ++i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.requires_grad) n.grad = Tensor::zeros(n.value.shape);
    }
    if (!nodes_[static_cast<size_t>(loss.id)].requires_grad) return;
    nodes_[static_cast<size_t>(loss.id)].grad.data[0] = 1.0;
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.requires_grad && n.back) n.back(*this, i);
    }
  }

  // grad += for every bound parameter; serialized by the caller.
  void accumulate_param_grads(ParameterStore& store) const {
    for (const auto& [name, id] : param_nodes_) {
      const Node& n = nodes_[static_cast<size_t>(id)];
      if (n.grad.data.empty()) continue;
      Tensor& g = store.get(name).grad;
      for (size_t k = 0; k < g.data.size(); ++k) g.data[k] += n.grad.data[k];
    }
  }

  const std::map<std::string, int>& param_nodes() const { return param_nodes_; }

 private:
  Var emit_leaf(Tensor v, bool requires_grad) {
    Node n;
    n.value = std::move(v);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
  const ParameterStore* store_;
  std::map<std::string, int> param_nodes_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

namespace detail {

inline void check_same_shape(const char* kind, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    throw TensorError(std::string(kind) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

inline void add_into(Tensor& dst, const Tensor& src, double s = 1.0) {
  for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += s * src.data[i];
}

}  // namespace detail

// ---- elementwise ----

inline Var add(Var a, Var b) {
  Tape& t = *a.tape;
  detail::check_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  detail::add_into(out, b.value());
  return t.emit(std::move(out), {a.id, b.id}, [](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    for (int k = 0; k < 2; ++k) {
      int in = t.node(self).inputs[static_cast<size_t>(k)];
      if (t.node(in).requires_grad) detail::add_into(t.grad(in), g);
    }
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = *a.tape;
  detail::check_same_shape("sub", a.value(), b.value());
  Tensor out = a.value();
  detail::add_into(out, b.value(), -1.0);
  return t.emit(std::move(out), {a.id, b.id}, [](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    int ia = t.node(self).inputs[0], ib = t.node(self).inputs[1];
    if (t.node(ia).requires_grad) detail::add_into(t.grad(ia), g);
    if (t.node(ib).requires_grad) detail::add_into(t.grad(ib), g, -1.0);
  });
}

inline Var mul(Var a, Var b) {
  Tape& t = *a.tape;
  detail::check_same_shape("mul", a.value(), b.value());
  Tensor out = a.value();
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.value().data[i];
  return t.emit(std::move(out), {a.id, b.id}, [](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    int ia = t.node(self).inputs[0], ib = t.node(self).inputs[1];
    const Tensor& av = t.value(ia);
    const Tensor& bv = t.value(ib);
    if (t.node(ia).requires_grad) {
      Tensor& da = t.grad(ia);
      for (size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i] * bv.data[i];
    }
    if (t.node(ib).requires_grad) {
      Tensor& db = t.grad(ib);
      for (size_t i = 0; i < g.data.size(); ++i) db.data[i] += g.data[i] * av.data[i];
    }
  });
}

inline Var scale(Var a, double c) {
  Tape& t = *a.tape;
  Tensor out = a.value();
  for (auto& v : out.data) v *= c;
  return t.emit(std::move(out), {a.id}, [c](Tape& t, int self) {
    int ia = t.node(self).inputs[0];
    if (t.node(ia).requires_grad) detail::add_into(t.grad(ia), t.grad(self), c);
  });
}

inline Var neg(Var a) { return scale(a, -1.0); }

inline Var add_const(Var a, double c) {
  Tape& t = *a.tape;
  Tensor out = a.value();
  for (auto& v : out.data) v += c;
  return t.emit(std::move(out), {a.id}, [](Tape& t, int self) {
    int ia = t.node(self).inputs[0];
    if (t.node(ia).requires_grad) detail::add_into(t.grad(ia), t.grad(self));
  });
}

inline Var vexp(Var a) {
  Tape& t = *a.tape;
  Tensor out = a.value();
  for (auto& v : out.data) v = std::exp(v);
  return t.emit(std::move(out), {a.id}, [](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    int ia = t.node(self).inputs[0];
    if (!t.node(ia).requires_grad) return;
    Tensor& da = t.grad(ia);
    for (size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i] * y.data[i];
  });
}

inline Var vlog(Var a) {
  Tape& t = *a.tape;
  Tensor out = a.value();
  for (auto& v : out.data) v = std::log(v);
  return t.emit(std::move(out), {a.id}, [](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    int ia = t.node(self).inputs[0];
    if (!t.node(ia).requires_grad) return;
    const Tensor& x = t.value(ia);
    Tensor& da = t.grad(ia);
    for (size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i] / x.data[i];
  });
}

inline Var vtanh(Var a) {
  Tape& t = *a.tape;
  Tensor out = a.value();
  for (auto& v : out.data) v = std::tanh(v);
  return t.emit(std::move(out), {a.id}, [](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    int ia = t.node(self).inputs[0];
    if (!t.node(ia).requires_grad) return;
    Tensor& da = t.grad(ia);
    for (size_t i = 0; i < g.data.size(); ++i)
      da.data[i] += g.data[i] * (1.0 - y.data[i] * y.data[i]);
  });
}

inline Var vsigmoid(Var a) {
  Tape& t = *a.tape;
  Tensor out = a.value();
  for (auto& v : out.data) {
    if (v >= 0.0) {
      v = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      v = e / (1.0 + e);
    }
  }
  return t.emit(std::move(out), {a.id}, [](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    int ia = t.node(self).inputs[0];
    if (!t.node(ia).requires_grad) return;
    Tensor& da = t.grad(ia);
    for (size_t i = 0; i < g.data.size(); ++i)
      da.data[i] += g.data[i] * y.data[i] * (1.0 - y.data[i]);
  });
}

inline Var vsquare(Var a) {
  Tape& t = *a.tape;
  Tensor out = a.value();
  for (auto& v : out.data) v *= v;
  return t.emit(std::move(out), {a.id}, [](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    int ia = t.node(self).inputs[0];
    if (!t.node(ia).requires_grad) return;
    const Tensor& x = t.value(ia);
    Tensor& da = t.grad(ia);
    for (size_t i = 0; i < g.data.size(); ++i) da.data[i] += 2.0 * x.data[i] * g.data[i];
  });
}

inline Var rsqrt_eps(Var a, double eps) {
  Tape& t = *a.tape;
  Tensor out = a.value();
  for (auto& v : out.data) v = 1.0 / std::sqrt(v + eps);
  return t.emit(std::move(out), {a.id}, [](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    int ia = t.node(self).inputs[0];
    if (!t.node(ia).requires_grad) return;
    Tensor& da = t.grad(ia);
    for (size_t i = 0; i < g.data.size(); ++i)
      da.data[i] += g.data[i] * (-0.5 * y.data[i] * y.data[i] * y.data[i]);
  });
}

// ---- linear algebra ----

inline Var matmul(Var a, Var b) {
  Tape& t = *a.tape;
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.shape[1] != B.shape[0])
    throw TensorError("matmul: shape mismatch " + shape_str(A) + " vs " + shape_str(B));
  const int m = A.shape[0], k = A.shape[1], n = B.shape[1];
  Tensor out = Tensor::zeros({m, n});
  for (int i = 0; i < m; ++i)
    for (int kk = 0; kk < k; ++kk) {
      const double av = A.at(i, kk);
      const double* brow = &B.data[static_cast<size_t>(kk) * n];
      double* orow = &out.data[static_cast<size_t>(i) * n];
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  return t.emit(std::move(out), {a.id, b.id}, [m, k, n](Tape& t, int self) {
    const Tensor& G = t.grad(self);
    int ia = t.node(self).inputs[0], ib = t.node(self).inputs[1];
    const Tensor& A = t.value(ia);
    const Tensor& B = t.value(ib);
    if (t.node(ia).requires_grad) {
      Tensor& dA = t.grad(ia);  // G * B^T
      for (int i = 0; i < m; ++i)
        for (int kk = 0; kk < k; ++kk) {
          const double* grow = &G.data[static_cast<size_t>(i) * n];
          const double* brow = &B.data[static_cast<size_t>(kk) * n];
          double s = 0.0;
          for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
          dA.at(i, kk) += s;
        }
    }
    if (t.node(ib).requires_grad) {
      Tensor& dB = t.grad(ib);  // A^T * G
      for (int i = 0; i < m; ++i)
        for (int kk = 0; kk < k; ++kk) {
          const double av = A.at(i, kk);
          const double* grow = &G.data[static_cast<size_t>(i) * n];
          double* drow = &dB.data[static_cast<size_t>(kk) * n];
          for (int j = 0; j < n; ++j) drow[j] += av * grow[j];
        }
    }
  });
}

// x (T x in) * W^T (in x out) -> (T x out); W stored (out x in).
inline Var linear(Var x, Var w) {
  Tape& t = *x.tape;
  const Tensor& X = x.value();
  const Tensor& W = w.value();
  if (X.rank() != 2 || W.rank() != 2 || X.shape[1] != W.shape[1])
    throw TensorError("linear: shape mismatch " + shape_str(X) + " vs " + shape_str(W));
  const int T = X.shape[0], in = X.shape[1], out_w = W.shape[0];
  Tensor out = Tensor::zeros({T, out_w});
  for (int i = 0; i < T; ++i)
    for (int o = 0; o < out_w; ++o) {
      const double* xrow = &X.data[static_cast<size_t>(i) * in];
      const double* wrow = &W.data[static_cast<size_t>(o) * in];
      double s = 0.0;
      for (int j = 0; j < in; ++j) s += xrow[j] * wrow[j];
      out.at(i, o) = s;
    }
  return t.emit(std::move(out), {x.id, w.id}, [T, in, out_w](Tape& t, int self) {
    const Tensor& G = t.grad(self);
    int ix = t.node(self).inputs[0], iw = t.node(self).inputs[1];
    const Tensor& X = t.value(ix);
    const Tensor& W = t.value(iw);
    if (t.node(ix).requires_grad) {
      Tensor& dX = t.grad(ix);  // G * W
      for (int i = 0; i < T; ++i)
        for (int o = 0; o < out_w; ++o) {
          const double g = G.at(i, o);
          const double* wrow = &W.data[static_cast<size_t>(o) * in];
          double* drow = &dX.data[static_cast<size_t>(i) * in];
          for (int j = 0; j < in; ++j) drow[j] += g * wrow[j];
        }
    }
    if (t.node(iw).requires_grad) {
      Tensor& dW = t.grad(iw);  // G^T * X
      for (int i = 0; i < T; ++i)
        for (int o = 0; o < out_w; ++o) {
          const double g = G.at(i, o);
          const double* xrow = &X.data[static_cast<size_t>(i) * in];
          double* drow = &dW.data[static_cast<size_t>(o) * in];
          for (int j = 0; j < in; ++j) drow[j] += g * xrow[j];
        }
    }
  });
}

// x * W^T + b with b broadcast across rows.
inline Var affine(Var x, Var w, Var b) {
  Tape& t = *x.tape;
  Var y = linear(x, w);
  const Tensor& B = b.value();
  const Tensor& Y = y.value();
  if (B.rank() != 1 || B.shape[0] != Y.shape[1])
    throw TensorError("affine: bias shape mismatch " + shape_str(B) + " vs " + shape_str(Y));
  const int T = Y.shape[0], C = Y.shape[1];
  Tensor out = Y;
  for (int i = 0; i < T; ++i)
    for (int j = 0; j < C; ++j) out.at(i, j) += B.at(j);
  return t.emit(std::move(out), {y.id, b.id}, [T, C](Tape& t, int self) {
    const Tensor& G = t.grad(self);
    int iy = t.node(self).inputs[0], ib = t.node(self).inputs[1];
    if (t.node(iy).requires_grad) detail::add_into(t.grad(iy), G);
    if (t.node(ib).requires_grad) {
      Tensor& dB = t.grad(ib);
      for (int i = 0; i < T; ++i)
        for (int j = 0; j < C; ++j) dB.at(j) += G.at(i, j);
    }
  });
}

inline Var transpose(Var a) {
  Tape& t = *a.tape;
  const Tensor& A = a.value();
  if (A.rank() != 2) throw TensorError("transpose: rank-2 required, got " + shape_str(A));
  const int m = A.shape[0], n = A.shape[1];
  Tensor out = Tensor::zeros({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(j, i) = A.at(i, j);
  return t.emit(std::move(out), {a.id}, [m, n](Tape& t, int self) {
    const Tensor& G = t.grad(self);
    int ia = t.node(self).inputs[0];
    if (!t.node(ia).requires_grad) return;
    Tensor& dA = t.grad(ia);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) dA.at(i, j) += G.at(j, i);
  });
}

// ---- shape ops ----

inline Var reshape(Var a, std::vector<int> shape) {
  Tape& t = *a.tape;
  Tensor out(std::move(shape), a.value().data);
  if (out.numel() != a.value().numel())
    throw TensorError("reshape: numel mismatch " + shape_str(a.value()) + " vs " + shape_str(out));
  return t.emit(std::move(out), {a.id}, [](Tape& t, int self) {
    int ia = t.node(self).inputs[0];
    if (!t.node(ia).requires_grad) return;
    detail::add_into(t.grad(ia), t.grad(self));
  });
}

// axis 0 stacks rows (or concatenates rank-1 vectors); axis 1 joins columns.
inline Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw UsageError("concat: empty input list");
  Tape& t = *parts[0].tape;
  const int rank = parts[0].value().rank();
  std::vector<int> ids;
  ids.reserve(parts.size());
  for (const Var& p : parts) ids.push_back(p.id);

  if (rank == 1 || (rank == 2 && axis == 0)) {
    int total_rows = 0;
    const int C = rank == 2 ? parts[0].value().shape[1] : 1;
    for (const Var& p : parts) {
      const Tensor& v = p.value();
      if (v.rank() != rank || (rank == 2 && v.shape[1] != C))
        throw TensorError("concat: incompatible part " + shape_str(v));
      total_rows += v.shape[0];
    }
    Tensor out = rank == 2 ? Tensor::zeros({total_rows, C}) : Tensor::zeros({total_rows});
    size_t off = 0;
    for (const Var& p : parts) {
      const Tensor& v = p.value();
      std::copy(v.data.begin(), v.data.end(), out.data.begin() + static_cast<long>(off));
      off += v.data.size();
    }
    return t.emit(std::move(out), ids, [](Tape& t, int self) {
      const Tensor& G = t.grad(self);
      size_t off = 0;
      for (int in : t.node(self).inputs) {
        const size_t n = t.value(in).data.size();
        if (t.node(in).requires_grad) {
          Tensor& d = t.grad(in);
          for (size_t k = 0; k < n; ++k) d.data[k] += G.data[off + k];
        }
        off += n;
      }
    });
  }

  if (rank == 2 && axis == 1) {
    const int T = parts[0].value().shape[0];
    int total_cols = 0;
    for (const Var& p : parts) {
      const Tensor& v = p.value();
      if (v.rank() != 2 || v.shape[0] != T)
        throw TensorError("concat: incompatible part " + shape_str(v));
      total_cols += v.shape[1];
    }
    Tensor out = Tensor::zeros({T, total_cols});
    int coff = 0;
    for (const Var& p : parts) {
      const Tensor& v = p.value();
      const int c = v.shape[1];
      for (int i = 0; i < T; ++i)
        for (int j = 0; j < c; ++j) out.at(i, coff + j) = v.at(i, j);
      coff += c;
    }
    return t.emit(std::move(out), ids, [T](Tape& t, int self) {
      const Tensor& G = t.grad(self);
      int coff = 0;
      for (int in : t.node(self).inputs) {
        const int c = t.value(in).shape[1];
        if (t.node(in).requires_grad) {
          Tensor& d = t.grad(in);
          for (int i = 0; i < T; ++i)
            for (int j = 0; j < c; ++j) d.at(i, j) += G.at(i, coff + j);
        }
        coff += c;
      }
    });
  }
  throw TensorError("concat: unsupported rank/axis");
}

// Rank-1 subrange [begin, end).
inline Var slice(Var a, int begin, int end) {
  Tape& t = *a.tape;
  const Tensor& A = a.value();
  if (A.rank() != 1 || begin < 0 || end > A.shape[0] || begin >= end)
    throw TensorError("slice: bad range on " + shape_str(A));
  Tensor out = Tensor::zeros({end - begin});
  for (int i = begin; i < end; ++i) out.at(i - begin) = A.at(i);
  return t.emit(std::move(out), {a.id}, [begin, end](Tape& t, int self) {
    const Tensor& G = t.grad(self);
    int ia = t.node(self).inputs[0];
    if (!t.node(ia).requires_grad) return;
    Tensor& d = t.grad(ia);
    for (int i = begin; i < end; ++i) d.at(i) += G.at(i - begin);
  });
}

inline Var slice_rows(Var a, int r0, int r1) {
  Tape& t = *a.tape;
  const Tensor& A = a.value();
  if (A.rank() != 2 || r0 < 0 || r1 > A.shape[0] || r0 >= r1)
    throw TensorError("slice: bad row range on " + shape_str(A));
  const int C = A.shape[1];
  Tensor out = Tensor::zeros({r1 - r0, C});
  std::copy(A.data.begin() + static_cast<long>(r0) * C, A.data.begin() + static_cast<long>(r1) * C,
            out.data.begin());
  return t.emit(std::move(out), {a.id}, [r0, r1, C](Tape& t, int self) {
    const Tensor& G = t.grad(self);
    int ia = t.node(self).inputs[0];
    if (!t.node(ia).requires_grad) return;
    Tensor& d = t.grad(ia);
    for (int i = r0; i < r1; ++i)
      for (int j = 0; j < C; ++j) d.at(i, j) += G.at(i - r0, j);
  });
}

inline Var slice_cols(Var a, int c0, int c1) {
  Tape& t = *a.tape;
  const Tensor& A = a.value();
  if (A.rank() != 2 || c0 < 0 || c1 > A.shape[1] || c0 >= c1)
    throw TensorError("slice: bad col range on " + shape_str(A));
  const int T = A.shape[0];
  Tensor out = Tensor::zeros({T, c1 - c0});
  for (int i = 0; i < T; ++i)
    for (int j = c0; j < c1; ++j) out.at(i, j - c0) = A.at(i, j);
  return t.emit(std::move(out), {a.id}, [c0, c1, T](Tape& t, int self) {
    const Tensor& G = t.grad(self);
    int ia = t.node(self).inputs[0];
    if (!t.node(ia).requires_grad) return;
    Tensor& d = t.grad(ia);
    for (int i = 0; i < T; ++i)
      for (int j = c0; j < c1; ++j) d.at(i, j) += G.at(i, j - c0);
  });
}

// ---- broadcasts and reductions ----

inline Var bcast_scalar(Var s, std::vector<int> shape) {
  Tape& t = *s.tape;
  if (s.value().numel() != 1) throw TensorError("broadcast: source must be scalar");
  Tensor out = Tensor::full(std::move(shape), s.value().data[0]);
  return t.emit(std::move(out), {s.id}, [](Tape& t, int self) {
    const Tensor& G = t.grad(self);
    int is = t.node(self).inputs[0];
    if (!t.node(is).requires_grad) return;
    double acc = 0.0;
    for (double g : G.data) acc += g;
    t.grad(is).data[0] += acc;
  });
}

// (T) -> (T x C), value constant along each row.
inline Var bcast_col(Var v, int cols) {
  Tape& t = *v.tape;
  const Tensor& V = v.value();
  if (V.rank() != 1) throw TensorError("broadcast: rank-1 required, got " + shape_str(V));
  const int T = V.shape[0];
  Tensor out = Tensor::zeros({T, cols});
  for (int i = 0; i < T; ++i)
    for (int j = 0; j < cols; ++j) out.at(i, j) = V.at(i);
  return t.emit(std::move(out), {v.id}, [T, cols](Tape& t, int self) {
    const Tensor& G = t.grad(self);
    int iv = t.node(self).inputs[0];
    if (!t.node(iv).requires_grad) return;
    Tensor& d = t.grad(iv);
    for (int i = 0; i < T; ++i) {
      double acc = 0.0;
      for (int j = 0; j < cols; ++j) acc += G.at(i, j);
      d.at(i) += acc;
    }
  });
}

// (C) -> (T x C), value repeated across rows.
inline Var bcast_row(Var v, int rows) {
  Tape& t = *v.tape;
  const Tensor& V = v.value();
  if (V.rank() != 1) throw TensorError("broadcast: rank-1 required, got " + shape_str(V));
  const int C = V.shape[0];
  Tensor out = Tensor::zeros({rows, C});
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < C; ++j) out.at(i, j) = V.at(j);
  return t.emit(std::move(out), {v.id}, [rows, C](Tape& t, int self) {
    const Tensor& G = t.grad(self);
    int iv = t.node(self).inputs[0];
    if (!t.node(iv).requires_grad) return;
    Tensor& d = t.grad(iv);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < C; ++j) d.at(j) += G.at(i, j);
  });
}

inline Var row_mean(Var a) {
  Tape& t = *a.tape;
  const Tensor& A = a.value();
  if (A.rank() != 2) throw TensorError("mean: rank-2 required, got " + shape_str(A));
  const int T = A.shape[0], C = A.shape[1];
  Tensor out = Tensor::zeros({T});
  for (int i = 0; i < T; ++i) {
    double acc = 0.0;
    for (int j = 0; j < C; ++j) acc += A.at(i, j);
    out.at(i) = acc / C;
  }
  return t.emit(std::move(out), {a.id}, [T, C](Tape& t, int self) {
    const Tensor& G = t.grad(self);
    int ia = t.node(self).inputs[0];
    if (!t.node(ia).requires_grad) return;
    Tensor& d = t.grad(ia);
    for (int i = 0; i < T; ++i) {
      const double g = G.at(i) / C;
      for (int j = 0; j < C; ++j) d.at(i, j) += g;
    }
  });
}

inline Var sum_all(Var a) {
  Tape& t = *a.tape;
  double acc = 0.0;
  for (double v : a.value().data) acc += v;
  return t.emit(Tensor::scalar(acc), {a.id}, [](Tape& t, int self) {
    const double g = t.grad(self).data[0];
    int ia = t.node(self).inputs[0];
    if (!t.node(ia).requires_grad) return;
    Tensor& d = t.grad(ia);
    for (auto& v : d.data) v += g;
  });
}

inline Var mean_all(Var a) {
  Tape& t = *a.tape;
  const double n = static_cast<double>(a.value().numel());
  double acc = 0.0;
  for (double v : a.value().data) acc += v;
  return t.emit(Tensor::scalar(acc / n), {a.id}, [n](Tape& t, int self) {
    const double g = t.grad(self).data[0] / n;
    int ia = t.node(self).inputs[0];
    if (!t.node(ia).requires_grad) return;
    Tensor& d = t.grad(ia);
    for (auto& v : d.data) v += g;
  });
}

// ---- softmax ----

namespace detail {

inline void softmax_forward_row(const double* x, double* y, const uint8_t* keep, int C) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int j = 0; j < C; ++j)
    if (!keep || keep[j]) mx = std::max(mx, x[j]);
  double denom = 0.0;
  for (int j = 0; j < C; ++j) {
    if (!keep || keep[j]) {
      y[j] = std::exp(x[j] - mx);
      denom += y[j];
    } else {
      y[j] = 0.0;
    }
  }
  for (int j = 0; j < C; ++j)
    if (!keep || keep[j]) y[j] /= denom;
}

inline void softmax_backward_row(const double* y, const double* g, double* dx, const uint8_t* keep,
                                 int C) {
  double dot = 0.0;
  for (int j = 0; j < C; ++j)
    if (!keep || keep[j]) dot += g[j] * y[j];
  for (int j = 0; j < C; ++j)
    if (!keep || keep[j]) dx[j] += y[j] * (g[j] - dot);
}

}  // namespace detail

// Numerically stable softmax along the last axis; rank-1 input is one row.
inline Var softmax(Var a) {
  Tape& t = *a.tape;
  const Tensor& A = a.value();
  const int C = A.rank() == 2 ? A.shape[1] : A.shape[0];
  const int T = A.rank() == 2 ? A.shape[0] : 1;
  Tensor out = Tensor::zeros(A.shape);
  for (int i = 0; i < T; ++i)
    detail::softmax_forward_row(&A.data[static_cast<size_t>(i) * C],
                                &out.data[static_cast<size_t>(i) * C], nullptr, C);
  return t.emit(std::move(out), {a.id}, [T, C](Tape& t, int self) {
    const Tensor& G = t.grad(self);
    const Tensor& Y = t.value(self);
    int ia = t.node(self).inputs[0];
    if (!t.node(ia).requires_grad) return;
    Tensor& d = t.grad(ia);
    for (int i = 0; i < T; ++i)
      detail::softmax_backward_row(&Y.data[static_cast<size_t>(i) * C],
                                   &G.data[static_cast<size_t>(i) * C],
                                   &d.data[static_cast<size_t>(i) * C], nullptr, C);
  });
}

// Masked softmax over columns; dropped columns get exactly zero weight so a
// masked key cannot influence the output even at the bit level.
inline Var softmax_masked(Var a, std::vector<uint8_t> keep) {
  Tape& t = *a.tape;
  const Tensor& A = a.value();
  if (A.rank() != 2 || static_cast<int>(keep.size()) != A.shape[1])
    throw TensorError("softmax: mask length mismatch on " + shape_str(A));
  bool any = false;
  for (uint8_t k : keep) any = any || k;
  if (!any) throw UsageError("softmax: all keys masked");
  const int T = A.shape[0], C = A.shape[1];
  Tensor out = Tensor::zeros(A.shape);
  for (int i = 0; i < T; ++i)
    detail::softmax_forward_row(&A.data[static_cast<size_t>(i) * C],
                                &out.data[static_cast<size_t>(i) * C], keep.data(), C);
  return t.emit(std::move(out), {a.id}, [T, C, keep = std::move(keep)](Tape& t, int self) {
    const Tensor& G = t.grad(self);
    const Tensor& Y = t.value(self);
    int ia = t.node(self).inputs[0];
    if (!t.node(ia).requires_grad) return;
    Tensor& d = t.grad(ia);
    for (int i = 0; i < T; ++i)
      detail::softmax_backward_row(&Y.data[static_cast<size_t>(i) * C],
                                   &G.data[static_cast<size_t>(i) * C],
                                   &d.data[static_cast<size_t>(i) * C], keep.data(), C);
  });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

}  // namespace aicmet
