#pragma once

#include <pinn/rng.hpp>
#include <pinn/spline.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

// Tumor--immune--chemotherapy ODE system, its dosing forcing terms, and a
// classical fixed-step RK4 solver. The solver doubles as the synthetic-data
// generator and as the independent verification oracle for trained surrogates.
//
// State components: C cancer volume (mm^3), T T-cell volume (mm^3),
// M MDSC volume (mm^3), G gemcitabine amount (mg). Time unit: days.

namespace pinn {

struct SystemState {
  double C = 0.0, T = 0.0, M = 0.0, G = 0.0;

  SystemState& operator+=(const SystemState& o) {
    C += o.C; T += o.T; M += o.M; G += o.G;
    return *this;
  }
  friend SystemState operator+(SystemState a, const SystemState& b) { return a += b; }
  friend SystemState operator*(double k, const SystemState& s) {
    return {k * s.C, k * s.T, k * s.M, k * s.G};
  }
  bool finite() const {
    return std::isfinite(C) && std::isfinite(T) && std::isfinite(M) && std::isfinite(G);
  }
};

// Constant rate parameters of the model. s_MT here is the constant variant;
// solver calls take the time-varying value separately.
struct ParamSet {
  double p_C = 0.0;   // cancer proliferation (1/day)
  double k_TC = 0.0;  // T-cell kill rate on cancer (1/(mm^3 day))
  double k_GC = 0.0;  // GEM kill rate on cancer (1/(mg day))
  double n_T = 0.0;   // T-cell expansion (1/day)
  double s_CT = 0.0;  // cancer-induced T-cell suppression (1/(mm^3 day))
  double s_MT = 0.0;  // MDSC-induced T-cell suppression (1/(mm^3 day))
  double k_GT = 0.0;  // GEM toxicity on T cells (1/(mg day))
  double r_M = 0.0;   // MDSC recruitment by cancer (1/day)
  double k_GM = 0.0;  // GEM depletion of MDSCs (1/(mg day))
  double d_M = 0.0;   // MDSC natural decay (1/day)
  double d_G = 0.0;   // GEM clearance (1/day)

  void validate() const {
    const double vals[] = {p_C, k_TC, k_GC, n_T, s_CT, s_MT, k_GT, r_M, k_GM, d_M, d_G};
    for (double v : vals)
      if (!(v >= 0.0)) throw std::invalid_argument("params: rate constants must be non-negative");
  }
};

enum class Agent { GEM, OT1 };

struct Injection {
  Agent agent = Agent::GEM;
  double day = 0.0;
  double dose = 0.0;   // mg for GEM, mm^3-equivalent for OT-1
  double sigma = 0.25; // pulse width in days
};

// Each injection enters the system as a Gaussian rate pulse
// dose * N(t; day, sigma), so the delivered mass integrates to the dose.
struct DosingSchedule {
  std::vector<Injection> injections;

  void validate(double t0, double tf) const {
    for (const Injection& inj : injections) {
      if (inj.day < t0 || inj.day > tf)
        throw std::invalid_argument("dosing: injection day " + std::to_string(inj.day) +
                                    " outside [" + std::to_string(t0) + ", " + std::to_string(tf) + "]");
      if (inj.dose < 0.0) throw std::invalid_argument("dosing: negative dose");
      if (!(inj.sigma > 0.0)) throw std::invalid_argument("dosing: pulse width must be positive");
    }
  }
};

struct DosingRate {
  double U_T = 0.0;  // mm^3/day
  double U_G = 0.0;  // mg/day
};

inline double gaussian_pulse(double t, double day, double sigma) {
  const double z = (t - day) / sigma;
  return std::exp(-0.5 * z * z) / (sigma * std::sqrt(2.0 * std::numbers::pi));
}

inline DosingRate dosing_rate(const DosingSchedule& schedule, double t) {
  DosingRate r;
  for (const Injection& inj : schedule.injections) {
    const double pulse = inj.dose * gaussian_pulse(t, inj.day, inj.sigma);
    if (inj.agent == Agent::GEM) r.U_G += pulse;
    else r.U_T += pulse;
  }
  return r;
}

// Right-hand side of the model at one time point. s_mt_at_t is the current
// value of the (possibly time-varying) MDSC suppression rate.
inline SystemState rhs(const SystemState& s, const ParamSet& p, double s_mt_at_t, double t,
                       const DosingSchedule& schedule) {
  if (!s.finite()) throw std::runtime_error("rhs: non-finite state at t=" + std::to_string(t));
  const DosingRate u = dosing_rate(schedule, t);
  SystemState d;
  d.C = p.p_C * s.C - p.k_TC * s.C * s.T - p.k_GC * s.C * s.G;
  d.T = u.U_T + p.n_T * s.T - p.s_CT * s.T * s.C - s_mt_at_t * s.T * s.M - p.k_GT * s.T * s.G;
  d.M = p.r_M * s.C - p.k_GM * s.M * s.G - p.d_M * s.M;
  d.G = u.U_G - p.d_G * s.G;
  return d;
}

// Time profile for s_MT: fixed value, decreasing (or increasing) logistic
// transition, or a piecewise-linear table.
class SmtCurve {
 public:
  static SmtCurve constant(double value) {
    SmtCurve c;
    c.kind_ = Kind::Constant;
    c.lo_ = value;
    return c;
  }

  // logistic transition from `before` (t << t_mid) to `after` (t >> t_mid)
  static SmtCurve sigmoid(double before, double after, double t_mid, double width) {
    if (!(width > 0.0)) throw std::invalid_argument("s_MT sigmoid: width must be positive");
    SmtCurve c;
    c.kind_ = Kind::Sigmoid;
    c.hi_ = before;
    c.lo_ = after;
    c.mid_ = t_mid;
    c.width_ = width;
    return c;
  }

  static SmtCurve piecewise_linear(std::vector<double> days, std::vector<double> values) {
    if (days.size() != values.size() || days.size() < 2)
      throw std::invalid_argument("s_MT table: need >= 2 (day, value) pairs of equal length");
    for (std::size_t i = 1; i < days.size(); ++i)
      if (!(days[i] > days[i - 1]))
        throw std::invalid_argument("s_MT table: days must be strictly increasing");
    SmtCurve c;
    c.kind_ = Kind::Table;
    c.days_ = std::move(days);
    c.values_ = std::move(values);
    return c;
  }

  double operator()(double t) const {
    switch (kind_) {
      case Kind::Constant:
        return lo_;
      case Kind::Sigmoid:
        return lo_ + (hi_ - lo_) / (1.0 + std::exp((t - mid_) / width_));
      case Kind::Table: {
        if (t <= days_.front()) return values_.front();
        if (t >= days_.back()) return values_.back();
        const auto it = std::upper_bound(days_.begin(), days_.end(), t);
        const std::size_t i = static_cast<std::size_t>(it - days_.begin()) - 1;
        const double w = (t - days_[i]) / (days_[i + 1] - days_[i]);
        return (1.0 - w) * values_[i] + w * values_[i + 1];
      }
    }
    return lo_;
  }

 private:
  enum class Kind { Constant, Sigmoid, Table };
  Kind kind_ = Kind::Constant;
  double lo_ = 0.0, hi_ = 0.0, mid_ = 0.0, width_ = 1.0;
  std::vector<double> days_, values_;
};

struct Trajectory {
  std::vector<double> t;
  std::vector<SystemState> states;
  std::vector<double> s_mt;

  SystemState at(double time) const {
    if (t.empty()) throw std::runtime_error("trajectory: empty");
    if (time < t.front() - 1e-9 || time > t.back() + 1e-9)
      throw std::out_of_range("trajectory: time " + std::to_string(time) + " outside span");
    const auto it = std::lower_bound(t.begin(), t.end(), time);
    std::size_t i = static_cast<std::size_t>(it - t.begin());
    if (i == 0) return states.front();
    if (i >= t.size()) return states.back();
    const double w = (time - t[i - 1]) / (t[i] - t[i - 1]);
    SystemState a = states[i - 1], b = states[i];
    return {(1 - w) * a.C + w * b.C, (1 - w) * a.T + w * b.T,
            (1 - w) * a.M + w * b.M, (1 - w) * a.G + w * b.G};
  }
};

// Classical fixed-step RK4. The step count is chosen so the grid lands on tf
// exactly; components are clipped at zero after each step (biological
// non-negativity, mirroring the positivity the surrogates enforce).
template <typename SmtFn>
Trajectory solve_rk4(const SystemState& initial, const ParamSet& params, SmtFn&& s_mt,
                     const DosingSchedule& schedule, double t0, double tf, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("rk4: step size must be positive");
  if (!(tf > t0)) throw std::invalid_argument("rk4: tf must exceed t0");
  params.validate();

  const auto n_steps = static_cast<std::size_t>(std::ceil((tf - t0) / h - 1e-9));
  const double step = (tf - t0) / static_cast<double>(n_steps);

  Trajectory traj;
  traj.t.reserve(n_steps + 1);
  traj.states.reserve(n_steps + 1);
  traj.s_mt.reserve(n_steps + 1);

  SystemState y = initial;
  double t = t0;
  traj.t.push_back(t);
  traj.states.push_back(y);
  traj.s_mt.push_back(s_mt(t));

  for (std::size_t i = 0; i < n_steps; ++i) {
    const double th = t + 0.5 * step;
    const double tn = t0 + (static_cast<double>(i) + 1.0) * step;
    const SystemState k1 = rhs(y, params, s_mt(t), t, schedule);
    const SystemState k2 = rhs(y + (0.5 * step) * k1, params, s_mt(th), th, schedule);
    const SystemState k3 = rhs(y + (0.5 * step) * k2, params, s_mt(th), th, schedule);
    const SystemState k4 = rhs(y + step * k3, params, s_mt(tn), tn, schedule);
    y += (step / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    y.C = std::max(y.C, 0.0);
    y.T = std::max(y.T, 0.0);
    y.M = std::max(y.M, 0.0);
    y.G = std::max(y.G, 0.0);
    if (!y.finite())
      throw std::runtime_error("rk4: non-finite state at t=" + std::to_string(tn));
    t = tn;
    traj.t.push_back(t);
    traj.states.push_back(y);
    traj.s_mt.push_back(s_mt(t));
  }
  return traj;
}

// Samples total volume C+T+M at the given days, with optional multiplicative
// Gaussian noise; anchor proportions are read off the trajectory exactly.
inline ObservationSet synthesize_observations(const Trajectory& traj,
                                              const std::vector<double>& sample_days,
                                              const std::vector<double>& histology_days,
                                              double noise_level, std::uint64_t seed) {
  if (sample_days.empty()) throw std::invalid_argument("synthesize: no sample days");
  Rng rng(seed);
  ObservationSet obs;
  for (double day : sample_days) {
    const SystemState s = traj.at(day);  // throws out_of_range if outside span
    double total = s.C + s.T + s.M;
    if (noise_level > 0.0) total *= 1.0 + noise_level * rng.normal();
    obs.days.push_back(day);
    obs.totals.push_back(total);
  }
  auto proportions_at = [&](double day) {
    const SystemState s = traj.at(day);
    const double total = s.C + s.T + s.M;
    if (!(total > 0.0))
      throw std::runtime_error("synthesize: zero total volume at anchor day " + std::to_string(day));
    return Anchor{day, {s.C / total, s.T / total, s.M / total}};
  };
  obs.initial = proportions_at(sample_days.front());
  for (double day : histology_days) obs.histology.push_back(proportions_at(day));
  return obs;
}

}  // namespace pinn
