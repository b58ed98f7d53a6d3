#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

#include "aicmet/rng.hpp"
#include "aicmet/tensor.hpp"

namespace aicmet {

struct Parameter {
  Tensor value;
  Tensor grad;
};

// Named trainable tensors with accumulated gradients. std::map keeps the
// iteration order deterministic, which the optimizer and snapshots rely on.
class ParameterStore {
 public:
  Parameter& add(const std::string& name, Tensor init) {
    auto [it, inserted] = params_.emplace(name, Parameter{std::move(init), Tensor{}});
    if (!inserted) throw std::runtime_error("duplicate parameter: " + name);
    it->second.grad = Tensor::zeros(it->second.value.shape);
    return it->second;
  }

  bool has(const std::string& name) const { return params_.count(name) > 0; }

  Parameter& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::runtime_error("unknown parameter: " + name);
    return it->second;
  }
  const Parameter& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::runtime_error("unknown parameter: " + name);
    return it->second;
  }

  void zero_grads() {
    for (auto& [name, p] : params_)
      for (auto& g : p.grad.data) g = 0.0;
  }

  double grad_norm() const {
    double s = 0.0;
    for (const auto& [name, p] : params_)
      for (double g : p.grad.data) s += g * g;
    return std::sqrt(s);
  }

  int64_t total_size() const {
    int64_t n = 0;
    for (const auto& [name, p] : params_) n += p.value.numel();
    return n;
  }

  std::map<std::string, Parameter>& entries() { return params_; }
  const std::map<std::string, Parameter>& entries() const { return params_; }

 private:
  std::map<std::string, Parameter> params_;
};

// Glorot-uniform fan-in/fan-out init for weight matrices.
inline Tensor glorot_uniform(int out, int in, Rng& rng) {
  Tensor w = Tensor::zeros({out, in});
  const double bound = std::sqrt(6.0 / (in + out));
  for (auto& v : w.data) v = rng.uniform(-bound, bound);
  return w;
}

}  // namespace aicmet
