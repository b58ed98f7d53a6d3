#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace aicmet::pk {

struct ModelError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Integration produced a non-finite state; carries the offending time.
struct NumericBlowupError : std::runtime_error {
  double time;
  explicit NumericBlowupError(double t)
      : std::runtime_error("non-finite state at t=" + std::to_string(t)), time(t) {}
};

// Drug amounts in gut, central and P peripheral compartments.
struct CompartmentState {
  double gut = 0.0;
  double central = 0.0;
  std::vector<double> peripheral;

  int n_peripheral() const { return static_cast<int>(peripheral.size()); }
  int dim() const { return 2 + n_peripheral(); }

  double total() const {
    double s = gut + central;
    for (double p : peripheral) s += p;
    return s;
  }
  bool all_finite() const {
    if (!std::isfinite(gut) || !std::isfinite(central)) return false;
    for (double p : peripheral)
      if (!std::isfinite(p)) return false;
    return true;
  }
};

// First-order rate constants; entries are exponentials of the log-parameter
// vector, so they are strictly positive by construction.
struct KineticParams {
  double k_a = 0.0;
  double k_e = 0.0;
  double volume = 0.0;
  std::vector<double> k_plus;
  std::vector<double> k_minus;

  int n_peripheral() const { return static_cast<int>(k_plus.size()); }
};

// Log-parameter coordinate layout: (log k_a, log k_e, log V, log k1+, log k1-, ...).
inline int n_coords(int n_peripheral) { return 3 + 2 * n_peripheral; }

inline KineticParams kinetic_from_log(const std::vector<double>& theta) {
  const int P = (static_cast<int>(theta.size()) - 3) / 2;
  if (static_cast<int>(theta.size()) != n_coords(P))
    throw ModelError("log-parameter vector has invalid length " + std::to_string(theta.size()));
  KineticParams kp;
  kp.k_a = std::exp(theta[0]);
  kp.k_e = std::exp(theta[1]);
  kp.volume = std::exp(theta[2]);
  kp.k_plus.resize(static_cast<size_t>(P));
  kp.k_minus.resize(static_cast<size_t>(P));
  for (int j = 0; j < P; ++j) {
    kp.k_plus[static_cast<size_t>(j)] = std::exp(theta[static_cast<size_t>(3 + 2 * j)]);
    kp.k_minus[static_cast<size_t>(j)] = std::exp(theta[static_cast<size_t>(4 + 2 * j)]);
  }
  return kp;
}

enum class Route { kIntravenous, kOral };

struct DoseEvent {
  double amount = 0.0;
  Route route = Route::kOral;
};

// Right-hand side of the compartment ODE system.
inline CompartmentState derivative(const CompartmentState& state, const KineticParams& params) {
  const int P = state.n_peripheral();
  if (params.n_peripheral() != P)
    throw ModelError("derivative: state has " + std::to_string(P) + " peripheral compartments, params have " +
                     std::to_string(params.n_peripheral()));
  CompartmentState d;
  d.peripheral.resize(static_cast<size_t>(P));
  d.gut = -params.k_a * state.gut;
  double inflow = 0.0;
  double outflow_rate = params.k_e;
  for (int j = 0; j < P; ++j) {
    outflow_rate += params.k_plus[static_cast<size_t>(j)];
    inflow += params.k_minus[static_cast<size_t>(j)] * state.peripheral[static_cast<size_t>(j)];
  }
  d.central = params.k_a * state.gut - outflow_rate * state.central + inflow;
  for (int j = 0; j < P; ++j)
    d.peripheral[static_cast<size_t>(j)] = params.k_plus[static_cast<size_t>(j)] * state.central -
                                           params.k_minus[static_cast<size_t>(j)] * state.peripheral[static_cast<size_t>(j)];
  return d;
}

// Initial state implied by the dose and route; peripheral compartments start empty.
inline CompartmentState apply_dose(const DoseEvent& dose, int n_peripheral) {
  if (!(dose.amount > 0.0)) throw ModelError("dose amount must be positive");
  CompartmentState s;
  s.peripheral.assign(static_cast<size_t>(n_peripheral), 0.0);
  if (dose.route == Route::kOral)
    s.gut = dose.amount;
  else
    s.central = dose.amount;
  return s;
}

namespace detail {

inline void axpy(CompartmentState& y, double a, const CompartmentState& x) {
  y.gut += a * x.gut;
  y.central += a * x.central;
  for (size_t j = 0; j < y.peripheral.size(); ++j) y.peripheral[j] += a * x.peripheral[j];
}

inline CompartmentState rk4_step(const CompartmentState& s, const KineticParams& kp, double h) {
  CompartmentState k1 = derivative(s, kp);
  CompartmentState s2 = s;
  axpy(s2, h / 2.0, k1);
  CompartmentState k2 = derivative(s2, kp);
  CompartmentState s3 = s;
  axpy(s3, h / 2.0, k2);
  CompartmentState k3 = derivative(s3, kp);
  CompartmentState s4 = s;
  axpy(s4, h, k3);
  CompartmentState k4 = derivative(s4, kp);
  CompartmentState out = s;
  axpy(out, h / 6.0, k1);
  axpy(out, h / 3.0, k2);
  axpy(out, h / 3.0, k3);
  axpy(out, h / 6.0, k4);
  return out;
}

inline void clamp_nonnegative(CompartmentState& s) {
  s.gut = std::max(s.gut, 0.0);
  s.central = std::max(s.central, 0.0);
  for (double& p : s.peripheral) p = std::max(p, 0.0);
}

}  // namespace detail

// Classical fixed-step RK4 over the given grid. Kinetic parameters are held
// at their value at each step's left node (theta exponentiated per node),
// which keeps the OU grid and the ODE grid aligned.
// theta_at(node) must return the log-parameter vector at grid node `node`.
template <typename ThetaAt>
std::vector<CompartmentState> integrate_path(const CompartmentState& initial, ThetaAt&& theta_at,
                                             const std::vector<double>& grid) {
  if (grid.empty() || grid.front() != 0.0) throw ModelError("grid must start at 0");
  for (size_t i = 1; i < grid.size(); ++i)
    if (!(grid[i] > grid[i - 1])) throw ModelError("grid must be strictly increasing");

  std::vector<CompartmentState> states;
  states.reserve(grid.size());
  states.push_back(initial);
  for (size_t i = 0; i + 1 < grid.size(); ++i) {
    const double h = grid[i + 1] - grid[i];
    const KineticParams kp = kinetic_from_log(theta_at(static_cast<int>(i)));
    CompartmentState next = detail::rk4_step(states.back(), kp, h);
    detail::clamp_nonnegative(next);
    if (!next.all_finite()) throw NumericBlowupError(grid[i + 1]);
    states.push_back(std::move(next));
  }
  return states;
}

// Constant-parameter convenience overload.
inline std::vector<CompartmentState> integrate_path(const CompartmentState& initial,
                                                    const std::vector<double>& theta,
                                                    const std::vector<double>& grid) {
  return integrate_path(initial, [&](int) -> const std::vector<double>& { return theta; }, grid);
}

}  // namespace aicmet::pk
