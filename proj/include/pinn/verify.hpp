#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <pinn/csv.hpp>
#include <pinn/ode.hpp>
#include <pinn/spline.hpp>

namespace pinn {

// Accuracy report for a fit bundle against an independently solved trajectory.
struct VerificationReport {
  bool resampled = false;       // oracle re-gridded onto the bundle grid
  std::string note;             // human-readable remarks (resampling, omissions)
  std::array<double, 4> component_rel_l2{};  // C, T, M, G
  double total_rel_l2 = 0.0;                 // learned C+T+M vs oracle C+T+M
  double smt_rel_l2 = 0.0;                   // s_MT restricted to [8, 21]
  std::vector<double> observation_days;
  std::vector<double> data_point_residuals;  // learned total - observed total
  double data_rmse = 0.0;
  double ode_residual_rms = 0.0;  // finite-difference residual of the mean curves
  std::string config_hash;

  nlohmann::json to_json() const {
    return nlohmann::json{
        {"resampled", resampled},
        {"note", note},
        {"component_rel_l2",
         {{"C", component_rel_l2[0]},
          {"T", component_rel_l2[1]},
          {"M", component_rel_l2[2]},
          {"G", component_rel_l2[3]}}},
        {"total_rel_l2", total_rel_l2},
        {"smt_rel_l2", smt_rel_l2},
        {"observation_days", observation_days},
        {"data_point_residuals", data_point_residuals},
        {"data_rmse", data_rmse},
        {"ode_residual_rms", ode_residual_rms},
        {"config_hash", config_hash}};
  }
};

namespace detail {

inline double rel_l2(const Eigen::RowVectorXd& learned, const Eigen::RowVectorXd& truth) {
  const double denom = truth.norm();
  if (denom == 0.0) return learned.norm() == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return (learned - truth).norm() / denom;
}

}  // namespace detail

// Compares the ensemble-mean curves in `bundle_dir` against `oracle_csv`.
// Grids need not match: the oracle is resampled onto the bundle grid through
// cubic splines when they differ, and the report says so.
inline VerificationReport verify_bundle(const std::string& bundle_dir,
                                        const std::string& oracle_csv) {
  namespace fs = std::filesystem;
  const BandSeries bands = read_bands_csv((fs::path(bundle_dir) / kBandsFile).string());
  const Trajectory oracle = read_trajectory_csv(oracle_csv);

  VerificationReport report;
  const auto n = static_cast<Eigen::Index>(bands.t.size());

  // oracle components on the bundle grid
  Eigen::MatrixXd truth(5, n);
  bool same_grid = oracle.t.size() == bands.t.size();
  if (same_grid)
    for (std::size_t i = 0; i < bands.t.size(); ++i)
      if (oracle.t[i] != bands.t[i]) { same_grid = false; break; }
  if (same_grid) {
    for (Eigen::Index j = 0; j < n; ++j) {
      const SystemState& s = oracle.states[static_cast<std::size_t>(j)];
      truth.col(j) << s.C, s.T, s.M, s.G, oracle.s_mt[static_cast<std::size_t>(j)];
    }
  } else {
    report.resampled = true;
    report.note = "oracle grid differs from bundle grid; oracle resampled via cubic spline";
    std::array<std::vector<double>, 5> comp;
    for (std::size_t i = 0; i < oracle.t.size(); ++i) {
      comp[0].push_back(oracle.states[i].C);
      comp[1].push_back(oracle.states[i].T);
      comp[2].push_back(oracle.states[i].M);
      comp[3].push_back(oracle.states[i].G);
      comp[4].push_back(oracle.s_mt[i]);
    }
    for (Eigen::Index q = 0; q < 5; ++q) {
      const SplineCurve s(oracle.t, comp[static_cast<std::size_t>(q)]);
      for (Eigen::Index j = 0; j < n; ++j)
        truth(q, j) = s.value(bands.t[static_cast<std::size_t>(j)]);
    }
  }

  for (Eigen::Index q = 0; q < 4; ++q)
    report.component_rel_l2[static_cast<std::size_t>(q)] =
        detail::rel_l2(bands.mean.row(q), truth.row(q));
  const Eigen::RowVectorXd learned_total =
      bands.mean.row(0) + bands.mean.row(1) + bands.mean.row(2);
  const Eigen::RowVectorXd truth_total = truth.row(0) + truth.row(1) + truth.row(2);
  report.total_rel_l2 = detail::rel_l2(learned_total, truth_total);

  // s_MT error away from the window endpoints, where it is identifiable
  {
    std::vector<double> l, t;
    for (Eigen::Index j = 0; j < n; ++j) {
      const double tj = bands.t[static_cast<std::size_t>(j)];
      if (tj >= 8.0 && tj <= 21.0) {
        l.push_back(bands.mean(4, j));
        t.push_back(truth(4, j));
      }
    }
    const auto m = static_cast<Eigen::Index>(l.size());
    report.smt_rel_l2 = detail::rel_l2(
        Eigen::Map<const Eigen::RowVectorXd>(l.data(), m),
        Eigen::Map<const Eigen::RowVectorXd>(t.data(), m));
  }

  // residuals at the observation days, when the bundle carries its input data
  const fs::path obs_path = fs::path(bundle_dir) / kObservationsEchoFile;
  if (fs::exists(obs_path)) {
    const ObservationSeries obs = read_observation_series(obs_path.string());
    std::vector<double> totals(learned_total.data(), learned_total.data() + n);
    const SplineCurve total_curve(bands.t, totals);
    double sq = 0.0;
    for (std::size_t i = 0; i < obs.days.size(); ++i) {
      const double r = total_curve.value(obs.days[i]) - obs.totals[i];
      report.observation_days.push_back(obs.days[i]);
      report.data_point_residuals.push_back(r);
      sq += r * r;
    }
    report.data_rmse = std::sqrt(sq / static_cast<double>(obs.days.size()));
  } else {
    report.note += std::string(report.note.empty() ? "" : "; ") +
                   "bundle carries no observation echo; data residuals omitted";
    report.data_rmse = std::numeric_limits<double>::quiet_NaN();
  }

  // how well the learned mean curves satisfy the governing equations:
  // central-difference derivative vs the right-hand side, using the bundle's
  // constants and learned s_MT, in original units
  const fs::path config_path = fs::path(bundle_dir) / kConfigEchoFile;
  const fs::path summary_path = fs::path(bundle_dir) / kSummaryFile;
  if (fs::exists(config_path) && fs::exists(summary_path)) {
    const RunConfig config = parse_config(read_json_file(config_path.string()));
    const nlohmann::json summary = read_json_file(summary_path.string());
    report.config_hash = summary.value("config_hash", std::string());

    RateSpec rates = config.rates;
    if (summary.contains("learned_constants"))
      for (std::size_t r = 0; r < kRateCount; ++r) {
        const auto it = summary["learned_constants"].find(kRateNames[r]);
        if (it != summary["learned_constants"].end())
          rates.value[r] = (*it)["value"].get<double>();
      }
    const ParamSet params = rates.to_params(0.0);

    double sq_sum = 0.0;
    Eigen::Index count = 0;
    for (Eigen::Index j = 1; j + 1 < n; ++j) {
      const double t_prev = bands.t[static_cast<std::size_t>(j - 1)];
      const double t_next = bands.t[static_cast<std::size_t>(j + 1)];
      const double tj = bands.t[static_cast<std::size_t>(j)];
      const SystemState state{bands.mean(0, j), bands.mean(1, j), bands.mean(2, j),
                              bands.mean(3, j)};
      const SystemState f = rhs(state, params, bands.mean(4, j), tj, config.schedule);
      const double inv_dt = 1.0 / (t_next - t_prev);
      const double dC = (bands.mean(0, j + 1) - bands.mean(0, j - 1)) * inv_dt;
      const double dT = (bands.mean(1, j + 1) - bands.mean(1, j - 1)) * inv_dt;
      const double dM = (bands.mean(2, j + 1) - bands.mean(2, j - 1)) * inv_dt;
      const double dG = (bands.mean(3, j + 1) - bands.mean(3, j - 1)) * inv_dt;
      sq_sum += (dC - f.C) * (dC - f.C) + (dT - f.T) * (dT - f.T) +
                (dM - f.M) * (dM - f.M) + (dG - f.G) * (dG - f.G);
      ++count;
    }
    report.ode_residual_rms = std::sqrt(sq_sum / static_cast<double>(count));
  } else {
    report.note += std::string(report.note.empty() ? "" : "; ") +
                   "bundle carries no config/summary echo; equation residual omitted";
    report.ode_residual_rms = std::numeric_limits<double>::quiet_NaN();
  }

  return report;
}

}  // namespace pinn
