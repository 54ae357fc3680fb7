#pragma once

#include <pinn/network.hpp>
#include <pinn/ode.hpp>
#include <pinn/spline.hpp>
#include <pinn/tape.hpp>

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

// The four training losses (ODE residual, data misfit, initial-condition and
// histology proportion constraints) and their adaptively weighted sum.
// Everything is computed in normalized units: time mapped to [0,1], volumes in
// units of the largest observed total, drug amount in units of `gem` below.

namespace pinn {

using ConstraintSpec = Anchor;

struct Scales {
  double t_span = 1.0;  // tF - t0, days
  double volume = 1.0;  // mm^3 per normalized volume unit
  double gem = 1.0;     // mg per normalized drug unit
  double lambda = 1.0;  // s_MT units per unit of surrogate output
};

// The ten constant rates entering the residual (s_MT is handled separately as
// the time-varying surrogate output). Fixed index order everywhere.
enum class Rate : std::size_t { pC, kTC, kGC, nT, sCT, kGT, rM, kGM, dM, dG };
inline constexpr std::size_t kRateCount = 10;
inline constexpr std::array<const char*, kRateCount> kRateNames = {
    "p_C", "k_TC", "k_GC", "n_T", "s_CT", "k_GT", "r_M", "k_GM", "d_M", "d_G"};

struct RateSpec {
  std::array<double, kRateCount> value{};   // pinned value or trainable init
  std::array<bool, kRateCount> trainable{};

  double& operator[](Rate r) { return value[static_cast<std::size_t>(r)]; }
  double operator[](Rate r) const { return value[static_cast<std::size_t>(r)]; }

  static RateSpec pinned(const ParamSet& p) {
    RateSpec s;
    s[Rate::pC] = p.p_C;  s[Rate::kTC] = p.k_TC; s[Rate::kGC] = p.k_GC;
    s[Rate::nT] = p.n_T;  s[Rate::sCT] = p.s_CT; s[Rate::kGT] = p.k_GT;
    s[Rate::rM] = p.r_M;  s[Rate::kGM] = p.k_GM; s[Rate::dM] = p.d_M;
    s[Rate::dG] = p.d_G;
    return s;
  }

  ParamSet to_params(double s_mt) const {
    ParamSet p;
    p.p_C = (*this)[Rate::pC];  p.k_TC = (*this)[Rate::kTC]; p.k_GC = (*this)[Rate::kGC];
    p.n_T = (*this)[Rate::nT];  p.s_CT = (*this)[Rate::sCT]; p.k_GT = (*this)[Rate::kGT];
    p.r_M = (*this)[Rate::rM];  p.k_GM = (*this)[Rate::kGM]; p.d_M = (*this)[Rate::dM];
    p.d_G = (*this)[Rate::dG];  p.s_MT = s_mt;
    return p;
  }
};

// Everything about the collocation problem that stays fixed across epochs.
// The tau grid starts with the n_residual collocation points (sorted); anchor
// days that are not collocation points are appended as extra evaluation
// columns that do not enter the residual mean.
struct CollocationData {
  std::vector<double> tau;
  std::size_t n_residual = 0;
  Eigen::RowVectorXd forcing_T;  // T_span * U_T(t_j) / volume, residual cols
  Eigen::RowVectorXd forcing_G;  // T_span * U_G(t_j) / gem, residual cols

  std::vector<std::int32_t> data_idx;  // columns of the observation days
  Eigen::VectorXd data_u;              // normalized observed totals

  struct AnchorPoint {
    std::int32_t idx = -1;
    std::array<double, 3> q{};
    double u_hat = 0.0;  // normalized interpolant value at the anchor day
  };
  AnchorPoint ic;
  std::vector<AnchorPoint> bc;

  Scales scales;
  bool bc_mean = false;  // divide L_bc by the number of histology anchors

  double t_of_tau(double tau_v) const { return t0 + tau_v * scales.t_span; }
  double t0 = 0.0;
};

inline CollocationData prepare_collocation(const ObservationSet& obs, const SplineCurve& spline,
                                           int m_interp, const DosingSchedule& schedule,
                                           Scales scales, bool bc_mean = false) {
  obs.validate();
  if (obs.initial.day != obs.days.front())
    throw std::invalid_argument("collocation: initial anchor must sit at the first observation day");
  const CollocationGrid grid = augment(spline, obs, m_interp);
  schedule.validate(obs.days.front(), obs.days.back());

  CollocationData cd;
  cd.scales = scales;
  cd.bc_mean = bc_mean;
  cd.t0 = obs.days.front();
  cd.n_residual = grid.t.size();
  for (double t : grid.t) cd.tau.push_back((t - cd.t0) / scales.t_span);

  cd.forcing_T.resize(static_cast<Eigen::Index>(cd.n_residual));
  cd.forcing_G.resize(static_cast<Eigen::Index>(cd.n_residual));
  for (std::size_t j = 0; j < cd.n_residual; ++j) {
    const DosingRate u = dosing_rate(schedule, grid.t[j]);
    cd.forcing_T(static_cast<Eigen::Index>(j)) = scales.t_span * u.U_T / scales.volume;
    cd.forcing_G(static_cast<Eigen::Index>(j)) = scales.t_span * u.U_G / scales.gem;
  }

  cd.data_u.resize(static_cast<Eigen::Index>(obs.size()));
  for (std::size_t i = 0; i < obs.size(); ++i) {
    const auto it = std::find(grid.t.begin(), grid.t.end(), obs.days[i]);
    if (it == grid.t.end())
      throw std::logic_error("collocation: observation day missing from the augmented grid");
    cd.data_idx.push_back(static_cast<std::int32_t>(it - grid.t.begin()));
    cd.data_u(static_cast<Eigen::Index>(i)) = obs.totals[i] / scales.volume;
  }

  auto place_anchor = [&](const Anchor& a) {
    CollocationData::AnchorPoint p;
    p.q = a.q;
    p.u_hat = spline.value(a.day) / scales.volume;
    const auto it = std::find(grid.t.begin(), grid.t.end(), a.day);
    if (it != grid.t.end()) {
      p.idx = static_cast<std::int32_t>(it - grid.t.begin());
    } else {
      if (a.day < obs.days.front() || a.day > obs.days.back())
        throw std::invalid_argument("collocation: anchor day " + std::to_string(a.day) +
                                    " outside the observation span");
      p.idx = static_cast<std::int32_t>(cd.tau.size());
      cd.tau.push_back((a.day - cd.t0) / scales.t_span);
    }
    return p;
  };
  cd.ic = place_anchor(obs.initial);
  for (const Anchor& a : obs.histology) cd.bc.push_back(place_anchor(a));
  return cd;
}

struct LossBreakdown {
  double L_r = 0, L_d = 0, L_IC = 0, L_bc = 0;
  double w_r = 1, w_d = 1, w_IC = 1, w_bc = 1;
  double total = 0;
};

// ---------------------------------------------------------------------------
// Taped assembly (the training path)

struct TapedRates {
  std::array<ad::Tape::Ref, kRateCount> node{};  // 1x1 value nodes
  std::array<ad::Tape::Ref, kRateCount> raw{};   // leaf refs, -1 when pinned
};

inline TapedRates register_rates(ad::Tape& t, const RateSpec& spec) {
  TapedRates r;
  for (std::size_t i = 0; i < kRateCount; ++i) {
    if (spec.trainable[i]) {
      r.raw[i] = t.scalar_leaf(TrainableScalar::from_value(spec.value[i]).raw);
      r.node[i] = t.softplus(r.raw[i]);
    } else {
      r.raw[i] = -1;
      r.node[i] = t.scalar_constant(spec.value[i]);
    }
  }
  return r;
}

inline std::array<double, kRateCount> read_rates(const ad::Tape& t, const TapedRates& r) {
  std::array<double, kRateCount> out{};
  for (std::size_t i = 0; i < kRateCount; ++i) out[i] = t.val(r.node[i])(0, 0);
  return out;
}

// s_MT row (original units, 1 x n_residual) from the time-varying surrogate.
inline ad::Tape::Ref lambda_from_network(ad::Tape& t, const TapedNet& lam_net,
                                         ad::Tape::Ref x_full, std::size_t n_residual,
                                         double lambda_scale) {
  ad::Tape::Ref full = taped_forward(t, lam_net, x_full);
  if (static_cast<std::size_t>(t.val(full).cols()) > n_residual) {
    std::vector<std::int32_t> idx(n_residual);
    for (std::size_t j = 0; j < n_residual; ++j) idx[j] = static_cast<std::int32_t>(j);
    full = t.cols(full, std::move(idx));
  }
  return t.mul_k(full, lambda_scale);
}

struct LossNodes {
  ad::Tape::Ref x_full = -1;   // 1 x N grid constant
  ad::Tape::Ref u_value = -1;  // 4 x N surrogate outputs
  ad::Tape::Ref L_r = -1, L_d = -1, L_IC = -1, L_bc = -1, total = -1;
};

// Assembles the full loss graph for one epoch. lambda_row must be a
// 1 x n_residual node holding s_MT in original units on the residual grid.
inline LossNodes build_losses(ad::Tape& t, const CollocationData& cd, const TapedNet& u_net,
                              ad::Tape::Ref lambda_row, const TapedRates& rates,
                              const std::array<ad::Tape::Ref, 4>& log_vars,
                              ad::Tape::Ref x_full) {
  using Ref = ad::Tape::Ref;
  const std::size_t n_res = cd.n_residual;
  const double T = cd.scales.t_span;
  const double V = cd.scales.volume;
  const double SG = cd.scales.gem;

  LossNodes out;
  out.x_full = x_full;

  const DualForward df = taped_forward_dual(t, u_net, x_full);
  out.u_value = df.value;

  // residual columns of value and tangent
  auto residual_part = [&](Ref m) {
    if (static_cast<std::size_t>(t.val(m).cols()) == n_res) return m;
    std::vector<std::int32_t> idx(n_res);
    for (std::size_t j = 0; j < n_res; ++j) idx[j] = static_cast<std::int32_t>(j);
    return t.cols(m, std::move(idx));
  };
  const Ref u_res = residual_part(df.value);
  const Ref du_res = residual_part(df.tangent);

  const Ref C = t.row(u_res, 0), Tc = t.row(u_res, 1), M = t.row(u_res, 2), G = t.row(u_res, 3);
  const Ref CT = t.cmul(C, Tc), CG = t.cmul(C, G), TM = t.cmul(Tc, M);
  const Ref TG = t.cmul(Tc, G), MG = t.cmul(M, G);
  auto rate = [&](Rate r) { return rates.node[static_cast<std::size_t>(r)]; };

  // dC/dtau = T (p_C C) - T V (k_TC C T) - T SG (k_GC C G)
  const Ref f_C = t.sub(t.mul_k(t.mul_scalar(rate(Rate::pC), C), T),
                        t.add(t.mul_k(t.mul_scalar(rate(Rate::kTC), CT), T * V),
                              t.mul_k(t.mul_scalar(rate(Rate::kGC), CG), T * SG)));
  // dT/dtau = forcing_T + T (n_T T) - T V (s_CT T C) - T V (s_MT(t) T M) - T SG (k_GT T G)
  const Ref f_T = t.sub(t.add(t.constant(cd.forcing_T),
                              t.mul_k(t.mul_scalar(rate(Rate::nT), Tc), T)),
                        t.add(t.mul_k(t.mul_scalar(rate(Rate::sCT), CT), T * V),
                              t.add(t.mul_k(t.cmul(lambda_row, TM), T * V),
                                    t.mul_k(t.mul_scalar(rate(Rate::kGT), TG), T * SG))));
  // dM/dtau = T (r_M C) - T SG (k_GM M G) - T (d_M M)
  const Ref f_M = t.sub(t.mul_k(t.mul_scalar(rate(Rate::rM), C), T),
                        t.add(t.mul_k(t.mul_scalar(rate(Rate::kGM), MG), T * SG),
                              t.mul_k(t.mul_scalar(rate(Rate::dM), M), T)));
  // dG/dtau = forcing_G - T (d_G G)
  const Ref f_G = t.sub(t.constant(cd.forcing_G),
                        t.mul_k(t.mul_scalar(rate(Rate::dG), G), T));

  const Ref r_C = t.sub(t.row(du_res, 0), f_C);
  const Ref r_T = t.sub(t.row(du_res, 1), f_T);
  const Ref r_M = t.sub(t.row(du_res, 2), f_M);
  const Ref r_G = t.sub(t.row(du_res, 3), f_G);
  out.L_r = t.mul_k(t.add(t.add(t.sum_sq(r_C), t.sum_sq(r_T)),
                          t.add(t.sum_sq(r_M), t.sum_sq(r_G))),
                    1.0 / static_cast<double>(n_res));

  // data loss: mean squared misfit of C+T+M against the observed totals
  const Ref u_data = t.cols(df.value, cd.data_idx);
  const Ref total_pred = t.add(t.row(u_data, 0), t.add(t.row(u_data, 1), t.row(u_data, 2)));
  const Ref data_target = t.constant(cd.data_u.transpose());
  out.L_d = t.mul_k(t.sum_sq(t.sub(total_pred, data_target)),
                    1.0 / static_cast<double>(cd.data_u.size()));

  // proportion anchors
  auto anchor_term = [&](const CollocationData::AnchorPoint& a) {
    const Ref col = t.cols(df.value, {a.idx});
    Ref acc = -1;
    for (int comp = 0; comp < 3; ++comp) {
      const Ref diff = t.add_k(t.row(col, comp), -a.q[static_cast<std::size_t>(comp)] * a.u_hat);
      const Ref sq = t.sum_sq(diff);
      acc = comp == 0 ? sq : t.add(acc, sq);
    }
    return acc;
  };
  out.L_IC = anchor_term(cd.ic);
  if (cd.bc.empty()) {
    out.L_bc = t.scalar_constant(0.0);
  } else {
    ad::Tape::Ref acc = -1;
    for (std::size_t k = 0; k < cd.bc.size(); ++k) {
      const Ref term = anchor_term(cd.bc[k]);
      acc = k == 0 ? term : t.add(acc, term);
    }
    out.L_bc = cd.bc_mean ? t.mul_k(acc, 1.0 / static_cast<double>(cd.bc.size())) : acc;
  }

  // total = sum_k exp(-s_k) L_k + s_k
  const std::array<Ref, 4> Ls = {out.L_r, out.L_d, out.L_IC, out.L_bc};
  Ref total = -1;
  for (std::size_t k = 0; k < 4; ++k) {
    const Ref term = t.add(t.cmul(t.exp(t.neg(log_vars[k])), Ls[k]), log_vars[k]);
    total = k == 0 ? term : t.add(total, term);
  }
  out.total = total;

  if (!std::isfinite(t.val(out.total)(0, 0))) {
    // find the worst residual grid point for the diagnostic
    std::size_t worst = 0;
    double worst_v = -1.0;
    for (std::size_t j = 0; j < n_res; ++j) {
      const double v = std::abs(t.val(r_C)(0, static_cast<Eigen::Index>(j))) +
                       std::abs(t.val(r_T)(0, static_cast<Eigen::Index>(j))) +
                       std::abs(t.val(r_M)(0, static_cast<Eigen::Index>(j))) +
                       std::abs(t.val(r_G)(0, static_cast<Eigen::Index>(j)));
      if (!std::isfinite(v)) { worst = j; worst_v = v; break; }
      if (v > worst_v) { worst_v = v; worst = j; }
    }
    throw std::runtime_error("losses: non-finite total; worst residual at t=" +
                             std::to_string(cd.t_of_tau(cd.tau[worst])));
  }
  return out;
}

inline LossBreakdown read_breakdown(const ad::Tape& t, const LossNodes& n,
                                    const std::array<ad::Tape::Ref, 4>& log_vars) {
  LossBreakdown b;
  b.L_r = t.val(n.L_r)(0, 0);
  b.L_d = t.val(n.L_d)(0, 0);
  b.L_IC = t.val(n.L_IC)(0, 0);
  b.L_bc = t.val(n.L_bc)(0, 0);
  b.w_r = std::exp(-t.val(log_vars[0])(0, 0));
  b.w_d = std::exp(-t.val(log_vars[1])(0, 0));
  b.w_IC = std::exp(-t.val(log_vars[2])(0, 0));
  b.w_bc = std::exp(-t.val(log_vars[3])(0, 0));
  b.total = t.val(n.total)(0, 0);
  return b;
}

// ---------------------------------------------------------------------------
// Plain-value evaluation (tests, verification, reporting)

// Residual loss from explicit normalized curves: u and du_dtau are 4 x n
// (rows C, T, M, G on the residual grid), lambda_row is s_MT in original
// units. Mirrors the taped assembly exactly.
inline double residual_loss_values(const CollocationData& cd, const Eigen::MatrixXd& u,
                                   const Eigen::MatrixXd& du_dtau,
                                   const Eigen::RowVectorXd& lambda_row,
                                   const std::array<double, kRateCount>& k) {
  const auto n = static_cast<Eigen::Index>(cd.n_residual);
  if (u.rows() != 4 || u.cols() != n || du_dtau.rows() != 4 || du_dtau.cols() != n ||
      lambda_row.size() != n)
    throw std::invalid_argument("residual: curve shapes do not match the collocation grid");
  const double T = cd.scales.t_span, V = cd.scales.volume, SG = cd.scales.gem;
  auto kv = [&](Rate r) { return k[static_cast<std::size_t>(r)]; };

  double acc = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    const double C = u(0, j), Tc = u(1, j), M = u(2, j), G = u(3, j);
    const double f_C = T * kv(Rate::pC) * C - T * V * kv(Rate::kTC) * C * Tc -
                       T * SG * kv(Rate::kGC) * C * G;
    const double f_T = cd.forcing_T(j) + T * kv(Rate::nT) * Tc - T * V * kv(Rate::sCT) * Tc * C -
                       T * V * lambda_row(j) * Tc * M - T * SG * kv(Rate::kGT) * Tc * G;
    const double f_M = T * kv(Rate::rM) * C - T * SG * kv(Rate::kGM) * M * G - T * kv(Rate::dM) * M;
    const double f_G = cd.forcing_G(j) - T * kv(Rate::dG) * G;
    const double r0 = du_dtau(0, j) - f_C, r1 = du_dtau(1, j) - f_T;
    const double r2 = du_dtau(2, j) - f_M, r3 = du_dtau(3, j) - f_G;
    const double sq = r0 * r0 + r1 * r1 + r2 * r2 + r3 * r3;
    if (!std::isfinite(sq))
      throw std::runtime_error("residual: non-finite value at grid point t=" +
                               std::to_string(cd.t_of_tau(cd.tau[static_cast<std::size_t>(j)])));
    acc += sq;
  }
  return acc / static_cast<double>(n);
}

// Mean squared misfit between predicted total volume (C+T+M summed from a
// 4 x M_data or 3 x M_data prediction block) and observed normalized totals.
inline double data_loss_values(const Eigen::MatrixXd& u_at_data, const Eigen::VectorXd& u_obs) {
  if (u_at_data.cols() != u_obs.size() || u_obs.size() == 0)
    throw std::invalid_argument("data loss: prediction/observation shape mismatch");
  double acc = 0.0;
  for (Eigen::Index i = 0; i < u_obs.size(); ++i) {
    const double pred = u_at_data(0, i) + u_at_data(1, i) + u_at_data(2, i);
    const double d = pred - u_obs(i);
    acc += d * d;
  }
  return acc / static_cast<double>(u_obs.size());
}

// Squared deviation of (C, T, M) predictions from q * u_hat at one anchor.
inline double anchor_loss_values(const Eigen::VectorXd& u_at_day, const std::array<double, 3>& q,
                                 double u_hat) {
  double acc = 0.0;
  for (int comp = 0; comp < 3; ++comp) {
    const double d = u_at_day(comp) - q[static_cast<std::size_t>(comp)] * u_hat;
    acc += d * d;
  }
  return acc;
}

inline double total_loss_value(const LossBreakdown& b, const std::array<double, 4>& s) {
  const std::array<double, 4> L = {b.L_r, b.L_d, b.L_IC, b.L_bc};
  double total = 0.0;
  for (std::size_t k = 0; k < 4; ++k) total += std::exp(-s[k]) * L[k] + s[k];
  return total;
}

// Full plain-path evaluation of all four losses for given networks; the
// lambda row carries s_MT in original units on the residual grid.
inline LossBreakdown evaluate_losses_plain(const CollocationData& cd, const Network& u_net,
                                           const Eigen::RowVectorXd& lambda_row,
                                           const std::array<double, kRateCount>& rates,
                                           const std::array<double, 4>& log_vars) {
  Eigen::MatrixXd x(1, static_cast<Eigen::Index>(cd.tau.size()));
  for (std::size_t j = 0; j < cd.tau.size(); ++j)
    x(0, static_cast<Eigen::Index>(j)) = cd.tau[j];
  const Network::DualBatch df = u_net.forward_batch_dual(x);

  const auto n = static_cast<Eigen::Index>(cd.n_residual);
  LossBreakdown b;
  b.L_r = residual_loss_values(cd, df.value.leftCols(n), df.tangent.leftCols(n), lambda_row, rates);

  Eigen::MatrixXd u_data(4, static_cast<Eigen::Index>(cd.data_idx.size()));
  for (std::size_t i = 0; i < cd.data_idx.size(); ++i)
    u_data.col(static_cast<Eigen::Index>(i)) = df.value.col(cd.data_idx[i]);
  b.L_d = data_loss_values(u_data, cd.data_u);

  b.L_IC = anchor_loss_values(df.value.col(cd.ic.idx), cd.ic.q, cd.ic.u_hat);
  b.L_bc = 0.0;
  for (const auto& a : cd.bc) b.L_bc += anchor_loss_values(df.value.col(a.idx), a.q, a.u_hat);
  if (cd.bc_mean && !cd.bc.empty()) b.L_bc /= static_cast<double>(cd.bc.size());

  b.w_r = std::exp(-log_vars[0]);
  b.w_d = std::exp(-log_vars[1]);
  b.w_IC = std::exp(-log_vars[2]);
  b.w_bc = std::exp(-log_vars[3]);
  b.total = total_loss_value(b, log_vars);
  return b;
}

}  // namespace pinn
