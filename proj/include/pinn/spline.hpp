#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

// Sparse-observation handling: the observation container, natural cubic
// spline interpolation used to densify the measurement series, and the
// time/volume normalization applied before anything reaches a network.

namespace pinn {

// Proportion constraint (C, T, M fractions of total volume) anchored at one day.
struct Anchor {
  double day = 0.0;
  std::array<double, 3> q{0.0, 0.0, 0.0};
};

struct ObservationSet {
  std::vector<double> days;
  std::vector<double> totals;  // total tumor volume C+T+M at each day
  Anchor initial;              // proportions at the first observation day
  std::vector<Anchor> histology;

  std::size_t size() const { return days.size(); }

  void validate() const {
    if (days.size() != totals.size())
      throw std::invalid_argument("observations: days/totals length mismatch");
    for (std::size_t i = 0; i < days.size(); ++i) {
      if (!(totals[i] > 0.0))
        throw std::invalid_argument("observations: total volume must be positive at day " +
                                    std::to_string(days[i]));
      if (i > 0 && !(days[i] > days[i - 1]))
        throw std::invalid_argument("observations: days must be strictly increasing");
    }
    auto check_anchor = [](const Anchor& a) {
      const double s = a.q[0] + a.q[1] + a.q[2];
      if (std::abs(s - 1.0) > 1e-6)
        throw std::invalid_argument("observations: proportions at day " + std::to_string(a.day) +
                                    " sum to " + std::to_string(s) + ", expected 1");
      for (double qi : a.q)
        if (qi < 0.0 || qi > 1.0)
          throw std::invalid_argument("observations: proportion outside [0,1] at day " +
                                      std::to_string(a.day));
    };
    check_anchor(initial);
    for (const Anchor& a : histology) check_anchor(a);
  }
};

// Natural cubic spline through (x_i, y_i), stored via the second derivatives
// at the knots (zero at both ends). Evaluation follows the classic two-point
// formula; outside the knot range the end cubic is extended.
class SplineCurve {
 public:
  SplineCurve() = default;

  SplineCurve(std::vector<double> x, std::vector<double> y)
      : x_(std::move(x)), y_(std::move(y)) {
    const std::size_t n = x_.size();
    if (n < 3) throw std::invalid_argument("spline: need at least 3 points");
    if (y_.size() != n) throw std::invalid_argument("spline: x/y length mismatch");
    for (std::size_t i = 1; i < n; ++i) {
      if (x_[i] == x_[i - 1]) throw std::invalid_argument("spline: duplicate knot t");
      if (x_[i] < x_[i - 1]) throw std::invalid_argument("spline: knots must be increasing");
    }
    m_.assign(n, 0.0);

    // Tridiagonal system for interior second derivatives, Thomas algorithm.
    const std::size_t k = n - 2;
    std::vector<double> diag(k), upper(k), rhs(k);
    for (std::size_t i = 0; i < k; ++i) {
      const double h0 = x_[i + 1] - x_[i];
      const double h1 = x_[i + 2] - x_[i + 1];
      diag[i] = (h0 + h1) / 3.0;
      upper[i] = h1 / 6.0;
      rhs[i] = (y_[i + 2] - y_[i + 1]) / h1 - (y_[i + 1] - y_[i]) / h0;
    }
    for (std::size_t i = 1; i < k; ++i) {
      const double lower = (x_[i + 1] - x_[i]) / 6.0;  // subdiagonal of row i
      const double w = lower / diag[i - 1];
      diag[i] -= w * upper[i - 1];
      rhs[i] -= w * rhs[i - 1];
    }
    m_[k] = rhs[k - 1] / diag[k - 1];
    for (std::size_t i = k - 1; i >= 1; --i)
      m_[i] = (rhs[i - 1] - upper[i - 1] * m_[i + 1]) / diag[i - 1];
  }

  double value(double t) const {
    const std::size_t i = interval(t);
    const double h = x_[i + 1] - x_[i];
    const double a = (x_[i + 1] - t) / h;
    const double b = (t - x_[i]) / h;
    return a * y_[i] + b * y_[i + 1] +
           ((a * a * a - a) * m_[i] + (b * b * b - b) * m_[i + 1]) * h * h / 6.0;
  }

  double derivative(double t) const {
    const std::size_t i = interval(t);
    const double h = x_[i + 1] - x_[i];
    const double a = (x_[i + 1] - t) / h;
    const double b = (t - x_[i]) / h;
    return (y_[i + 1] - y_[i]) / h +
           ((3.0 * b * b - 1.0) * m_[i + 1] - (3.0 * a * a - 1.0) * m_[i]) * h / 6.0;
  }

  double second_derivative(double t) const {
    const std::size_t i = interval(t);
    const double h = x_[i + 1] - x_[i];
    const double a = (x_[i + 1] - t) / h;
    const double b = (t - x_[i]) / h;
    return a * m_[i] + b * m_[i + 1];
  }

  const std::vector<double>& knots() const { return x_; }

 private:
  std::vector<double> x_, y_, m_;

  std::size_t interval(double t) const {
    // rightmost i with x_[i] <= t, clamped to a valid segment
    const auto it = std::upper_bound(x_.begin(), x_.end(), t);
    std::ptrdiff_t i = std::distance(x_.begin(), it) - 1;
    i = std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(x_.size()) - 2);
    return static_cast<std::size_t>(i);
  }
};

inline SplineCurve fit_spline(const ObservationSet& obs) {
  obs.validate();
  if (obs.size() < 3) throw std::invalid_argument("spline: need at least 3 observations");
  return SplineCurve(obs.days, obs.totals);
}

struct CollocationGrid {
  std::vector<double> t;       // sorted, deduplicated
  std::vector<double> u;       // spline value at each t
};

// Union of the original observation days and m_interp uniformly spaced
// interior points; original points win on (near-)collision.
inline CollocationGrid augment(const SplineCurve& spline, const ObservationSet& obs,
                               int m_interp) {
  if (m_interp < 0) throw std::invalid_argument("augment: m_interp must be >= 0");
  const double t0 = obs.days.front();
  const double tf = obs.days.back();
  const double tol = 1e-9 * (tf - t0);

  std::vector<double> t = obs.days;
  for (int j = 0; j < m_interp; ++j) {
    const double tj = t0 + (j + 1) * (tf - t0) / (m_interp + 1);
    bool clashes = false;
    for (double d : obs.days)
      if (std::abs(tj - d) <= tol) { clashes = true; break; }
    if (!clashes) t.push_back(tj);
  }
  std::sort(t.begin(), t.end());

  CollocationGrid grid;
  grid.t = std::move(t);
  grid.u.reserve(grid.t.size());
  for (double tj : grid.t) grid.u.push_back(spline.value(tj));
  return grid;
}

// Maps time to [0,1] over [t0, tF] and volumes to units of the largest
// observed total volume.
class Normalizer {
 public:
  Normalizer() = default;
  Normalizer(double t0, double tf, double volume_scale)
      : t0_(t0), tf_(tf), vscale_(volume_scale) {
    if (!(tf > t0)) throw std::invalid_argument("normalizer: degenerate time range");
    if (!(volume_scale > 0.0)) throw std::invalid_argument("normalizer: volume scale must be positive");
  }

  static Normalizer from_observations(const ObservationSet& obs) {
    obs.validate();
    const double vmax = *std::max_element(obs.totals.begin(), obs.totals.end());
    return Normalizer(obs.days.front(), obs.days.back(), vmax);
  }

  double norm_time(double t) const { return (t - t0_) / (tf_ - t0_); }
  double denorm_time(double tau) const { return t0_ + tau * (tf_ - t0_); }
  double norm_volume(double v) const { return v / vscale_; }
  double denorm_volume(double v) const { return v * vscale_; }

  double t0() const { return t0_; }
  double tf() const { return tf_; }
  double t_span() const { return tf_ - t0_; }
  double volume_scale() const { return vscale_; }

 private:
  double t0_ = 0.0, tf_ = 1.0, vscale_ = 1.0;
};

}  // namespace pinn
