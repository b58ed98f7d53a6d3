#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "aicmet/params.hpp"
#include "aicmet/rng.hpp"
#include "aicmet/tape.hpp"

namespace aicmet {

struct GradCheckOptions {
  double step = 1e-5;
  double grad_floor = 1e-6;     // elements with |g| below this are not judged
  int max_elems_per_param = 0;  // 0 = check every element
  uint64_t subsample_seed = 7;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_dev = 0.0;
  int checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double worst = 0.0;
  bool pass(double tol) const { return worst < tol; }
};

inline uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// Compares reverse-mode gradients against central finite differences for a
// deterministic scalar graph builder. The builder must freeze any sampling
// noise (copy the same Rng per call) so both evaluations see identical draws.
inline GradCheckReport grad_check(const std::function<Var(Tape&)>& build, ParameterStore& store,
                                  const GradCheckOptions& opt = {}) {
  store.zero_grads();
  {
    Tape tape(&store);
    Var loss = build(tape);
    tape.backward(loss);
    tape.accumulate_param_grads(store);
  }
  auto eval = [&]() {
    Tape tape(&store);
    return build(tape).value().data[0];
  };

  GradCheckReport report;
  for (auto& [name, p] : store.entries()) {
    const int64_t n = p.value.numel();
    std::vector<int64_t> idx;
    if (opt.max_elems_per_param > 0 && n > opt.max_elems_per_param) {
      Rng rng(opt.subsample_seed ^ fnv1a(name));
      std::vector<uint8_t> taken(static_cast<size_t>(n), 0);
      while (static_cast<int>(idx.size()) < opt.max_elems_per_param) {
        int64_t k = rng.uniform_int(0, n - 1);
        if (!taken[static_cast<size_t>(k)]) {
          taken[static_cast<size_t>(k)] = 1;
          idx.push_back(k);
        }
      }
      std::sort(idx.begin(), idx.end());
    } else {
      idx.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    }

    GradCheckEntry entry{name, 0.0, 0};
    for (int64_t k : idx) {
      double& x = p.value.data[static_cast<size_t>(k)];
      const double x0 = x;
      x = x0 + opt.step;
      const double fp = eval();
      x = x0 - opt.step;
      const double fm = eval();
      x = x0;
      const double fd = (fp - fm) / (2.0 * opt.step);
      const double ad = p.grad.data[static_cast<size_t>(k)];
      const double mag = std::max(std::fabs(ad), std::fabs(fd));
      if (mag <= opt.grad_floor) continue;
      entry.max_rel_dev = std::max(entry.max_rel_dev, std::fabs(ad - fd) / mag);
      entry.checked += 1;
    }
    report.worst = std::max(report.worst, entry.max_rel_dev);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace aicmet
