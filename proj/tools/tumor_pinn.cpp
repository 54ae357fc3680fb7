// Command-line shell around the inference core: synthetic-data generation,
// ensemble fitting, and independent verification of fit bundles.
//
// Exit codes: 0 success, 2 malformed data file, 3 invalid configuration,
// 4 ensemble aborted. Everything else is a generic failure (1).
#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <pinn/config.hpp>
#include <pinn/csv.hpp>
#include <pinn/ode.hpp>
#include <pinn/trainer.hpp>
#include <pinn/verify.hpp>

namespace fs = std::filesystem;

namespace {

struct Overrides {
  std::vector<std::uint64_t> seeds;
  int epochs = -1;
  std::string out;
};

pinn::RunConfig load_config(const std::string& path, const Overrides& overrides) {
  std::ifstream in(path);
  if (!in) throw pinn::ConfigError("/", "cannot open config file '" + path + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  pinn::RunConfig config = pinn::parse_config_text(buffer.str());
  if (!overrides.seeds.empty()) config.seeds = overrides.seeds;
  if (overrides.epochs >= 0) config.epochs = overrides.epochs;
  if (!overrides.out.empty()) config.output_dir = overrides.out;
  config.validate();
  return config;
}

int cmd_simulate(const std::string& config_path, const Overrides& overrides) {
  const pinn::RunConfig config = load_config(config_path, overrides);

  const pinn::ParamSet params = config.rates.to_params(0.0);
  const pinn::SmtCurve truth = config.simulate.s_mt.to_curve();
  const pinn::Trajectory traj =
      pinn::solve_rk4(config.simulate.initial, params, truth, config.schedule,
                      config.t0, config.t_final, config.simulate.solver_step);

  std::vector<double> histology_days;
  for (const pinn::AnchorConstraint& h : config.histology)
    histology_days.push_back(h.day);
  const pinn::ObservationSet obs = pinn::synthesize_observations(
      traj, config.simulate.sample_days, histology_days, config.simulate.noise,
      config.simulate.noise_seed);

  fs::create_directories(config.output_dir);
  const fs::path oracle_path = fs::path(config.output_dir) / "oracle.csv";
  pinn::write_trajectory_csv(oracle_path.string(), traj);
  if (const fs::path parent = fs::path(config.data_path).parent_path(); !parent.empty())
    fs::create_directories(parent);
  pinn::write_observation_series(config.data_path, {obs.days, obs.totals});

  std::cout << "oracle trajectory: " << oracle_path.string() << " (" << traj.t.size()
            << " rows)\n";
  std::cout << "observations: " << config.data_path << " (" << obs.days.size()
            << " days";
  if (config.simulate.noise > 0.0)
    std::cout << ", noise " << config.simulate.noise;
  std::cout << ")\n";
  auto print_anchor = [](const pinn::Anchor& a) {
    std::cout << "oracle proportions day " << a.day << ": C=" << a.q[0]
              << " T=" << a.q[1] << " M=" << a.q[2] << "\n";
  };
  print_anchor(obs.initial);
  for (const pinn::Anchor& a : obs.histology) print_anchor(a);
  return 0;
}

int cmd_fit(const std::string& config_path, const Overrides& overrides) {
  const pinn::RunConfig config = load_config(config_path, overrides);

  const pinn::ObservationSeries series =
      pinn::read_observation_series(config.data_path);
  if (series.days.front() != config.t0)
    throw pinn::ConfigError("/window/t0", "data starts at day " +
                                              pinn::detail::fmt9(series.days.front()));
  if (series.days.back() != config.t_final)
    throw pinn::ConfigError("/window/t_final",
                            "data ends at day " + pinn::detail::fmt9(series.days.back()));
  if (config.initial_proportions.day != series.days.front())
    throw pinn::ConfigError("/initial_proportions/day",
                            "must coincide with the first observation day");

  pinn::ObservationSet obs;
  obs.days = series.days;
  obs.totals = series.totals;
  config.attach_anchors(obs);
  obs.validate();

  const pinn::EnsembleResult res =
      pinn::run_ensemble(obs, config.to_train_options(), config.seeds);

  fs::create_directories(config.output_dir);
  const fs::path dir(config.output_dir);
  for (const pinn::TrainingRun& run : res.runs) {
    pinn::Trajectory learned;
    learned.t = run.t_grid;
    for (std::size_t i = 0; i < run.t_grid.size(); ++i) {
      const auto col = static_cast<Eigen::Index>(i);
      learned.states.push_back({run.curves(0, col), run.curves(1, col),
                                run.curves(2, col), run.curves(3, col)});
      learned.s_mt.push_back(run.s_mt[i]);
    }
    const std::string tag = std::to_string(run.seed);
    pinn::write_trajectory_csv((dir / ("run_" + tag + ".csv")).string(), learned);
    pinn::write_history_csv((dir / ("history_" + tag + ".csv")).string(), run);
  }
  pinn::write_bands_csv((dir / pinn::kBandsFile).string(), res);
  pinn::write_observation_series((dir / pinn::kObservationsEchoFile).string(),
                                 series);
  pinn::write_json_file((dir / pinn::kConfigEchoFile).string(), config.canonical());
  pinn::write_json_file((dir / pinn::kSummaryFile).string(),
                        pinn::make_summary(res, config));

  std::cout << "ensemble: " << res.runs.size() << "/" << config.seeds.size()
            << " runs converged\n";
  for (const std::string& reason : res.aborted)
    std::cerr << "aborted: " << reason << "\n";
  pinn::LossBreakdown mean{};
  for (const pinn::TrainingRun& run : res.runs) {
    mean.L_r += run.final_losses.L_r;
    mean.L_d += run.final_losses.L_d;
    mean.L_IC += run.final_losses.L_IC;
    mean.L_bc += run.final_losses.L_bc;
  }
  const double k = static_cast<double>(res.runs.size());
  std::cout << "mean final losses: L_r=" << mean.L_r / k << " L_d=" << mean.L_d / k
            << " L_IC=" << mean.L_IC / k << " L_bc=" << mean.L_bc / k << "\n";
  std::cout << "wall time: " << res.wall_time_s << " s\n";
  std::cout << "bundle: " << dir.string() << "\n";
  return 0;
}

int cmd_verify(const std::string& bundle_dir, const std::string& oracle_csv,
               const std::string& out_override) {
  const pinn::VerificationReport report = pinn::verify_bundle(bundle_dir, oracle_csv);

  const fs::path report_path = out_override.empty()
                                   ? fs::path(bundle_dir) / pinn::kReportFile
                                   : fs::path(out_override);
  pinn::write_json_file(report_path.string(), report.to_json());

  std::cout << "component relative L2: C=" << report.component_rel_l2[0]
            << " T=" << report.component_rel_l2[1]
            << " M=" << report.component_rel_l2[2]
            << " G=" << report.component_rel_l2[3] << "\n";
  std::cout << "C+T+M relative L2: " << report.total_rel_l2 << "\n";
  std::cout << "s_MT relative L2 on [8,21]: " << report.smt_rel_l2 << "\n";
  std::cout << "data RMSE: " << report.data_rmse << "\n";
  std::cout << "equation residual RMS: " << report.ode_residual_rms << "\n";
  if (!report.note.empty()) std::cout << "note: " << report.note << "\n";
  std::cout << "report: " << report_path.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tumor subpopulation and interaction-parameter inference from "
               "total-volume measurements"};
  app.require_subcommand(1);

  std::string config_path, bundle_dir, oracle_csv;
  Overrides overrides;

  CLI::App* fit = app.add_subcommand("fit", "train the ensemble on observed data");
  fit->add_option("config", config_path, "configuration file")->required();
  fit->add_option("--seed-override", overrides.seeds,
                  "replace the seed list from the config");
  fit->add_option("--epochs-override", overrides.epochs,
                  "replace the epoch count from the config");
  fit->add_option("--out", overrides.out, "replace the output directory");

  CLI::App* simulate =
      app.add_subcommand("simulate", "generate oracle trajectory and observations");
  simulate->add_option("config", config_path, "configuration file")->required();
  simulate->add_option("--out", overrides.out, "replace the output directory");

  CLI::App* verify =
      app.add_subcommand("verify", "compare a fit bundle against an oracle trajectory");
  verify->add_option("bundle", bundle_dir, "fit bundle directory")->required();
  verify->add_option("oracle", oracle_csv, "oracle trajectory CSV")->required();
  verify->add_option("--out", overrides.out, "write the report here instead");

  CLI11_PARSE(app, argc, argv);

  try {
    if (fit->parsed()) return cmd_fit(config_path, overrides);
    if (simulate->parsed()) return cmd_simulate(config_path, overrides);
    return cmd_verify(bundle_dir, oracle_csv, overrides.out);
  } catch (const pinn::CsvError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const pinn::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 3;
  } catch (const pinn::EnsembleFailure& e) {
    std::cerr << "ensemble failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
