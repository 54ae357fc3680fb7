#pragma once

#include <pinn/losses.hpp>
#include <pinn/network.hpp>
#include <pinn/ode.hpp>
#include <pinn/rng.hpp>
#include <pinn/spline.hpp>
#include <pinn/tape.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

// Adam optimization of all trainable leaves (state surrogate, s_MT surrogate,
// constant rates, loss log-variances), the full-batch training loop, and the
// multi-seed ensemble with mean/std uncertainty bands.

namespace pinn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// A training run that had to stop (diverged or produced unusable state).
struct AbortedRun : std::runtime_error {
  explicit AbortedRun(const std::string& what) : std::runtime_error(what) {}
};

struct EnsembleFailure : std::runtime_error {
  explicit EnsembleFailure(const std::string& what) : std::runtime_error(what) {}
};

class Adam {
 public:
  Adam(const ad::Tape& t, std::vector<ad::Tape::Ref> leaves, AdamConfig cfg)
      : leaves_(std::move(leaves)), cfg_(cfg) {
    for (ad::Tape::Ref r : leaves_) {
      m_.push_back(ad::Mat::Zero(t.val(r).rows(), t.val(r).cols()));
      v_.push_back(ad::Mat::Zero(t.val(r).rows(), t.val(r).cols()));
    }
  }

  // One update from the gradients of the last backward pass. Returns false
  // (and changes nothing) if any gradient is non-finite.
  bool step(ad::Tape& t) {
    for (ad::Tape::Ref r : leaves_) {
      const ad::Mat& g = t.grad_raw(r);
      if (g.size() != 0 && !g.allFinite()) return false;
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < leaves_.size(); ++i) {
      const ad::Mat& g_raw = t.grad_raw(leaves_[i]);
      ad::Mat& m = m_[i];
      ad::Mat& v = v_[i];
      if (g_raw.size() == 0) {  // unreached leaf: zero gradient, moments decay
        m *= cfg_.beta1;
        v *= cfg_.beta2;
      } else {
        m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g_raw;
        v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g_raw.cwiseProduct(g_raw);
      }
      ad::Mat& theta = t.leaf_value(leaves_[i]);
      theta.array() -=
          cfg_.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg_.eps);
    }
    return true;
  }

  long step_count() const { return step_; }
  const std::vector<ad::Tape::Ref>& leaves() const { return leaves_; }
  const std::vector<ad::Mat>& first_moments() const { return m_; }
  const std::vector<ad::Mat>& second_moments() const { return v_; }
  void restore(long step, std::vector<ad::Mat> m, std::vector<ad::Mat> v) {
    if (m.size() != m_.size() || v.size() != v_.size())
      throw std::invalid_argument("adam: restored moment count mismatch");
    step_ = step;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  std::vector<ad::Tape::Ref> leaves_;
  std::vector<ad::Mat> m_, v_;
  AdamConfig cfg_;
  long step_ = 0;
};

struct TrainOptions {
  NetworkConfig u_cfg;    // state surrogate
  NetworkConfig lam_cfg;  // s_MT surrogate
  RateSpec rates;
  std::optional<SmtCurve> pinned_smt;  // bypasses the s_MT surrogate entirely
  DosingSchedule schedule;
  int m_interp = 100;
  int epochs = 20000;
  int log_interval = 100;
  int dense_grid = 500;
  AdamConfig adam;
  double gem_scale = 0.5;
  double lambda_scale = 0.05;
  bool bc_mean = false;
  double log_var_clamp = 10.0;
  double divergence_loss = 1e6;
  int divergence_patience = 100;
  int checkpoint_interval = 0;   // epochs between checkpoint writes; 0 = off
  std::string checkpoint_path;   // required when checkpoint_interval > 0
  std::string resume_from;       // checkpoint file to continue from

  void validate() const {
    u_cfg.validate();
    lam_cfg.validate();
    if (u_cfg.out_dim != 4)
      throw std::invalid_argument("train options: state surrogate must have 4 outputs");
    if (lam_cfg.out_dim != 1)
      throw std::invalid_argument("train options: s_MT surrogate must have 1 output");
    if (epochs < 0) throw std::invalid_argument("train options: negative epoch count");
    if (log_interval <= 0) throw std::invalid_argument("train options: log interval must be positive");
    if (dense_grid < 2) throw std::invalid_argument("train options: dense grid needs >= 2 points");
    if (m_interp < 0) throw std::invalid_argument("train options: negative m_interp");
    if (!(gem_scale > 0.0) || !(lambda_scale > 0.0))
      throw std::invalid_argument("train options: scales must be positive");
    if (checkpoint_interval > 0 && checkpoint_path.empty())
      throw std::invalid_argument("train options: checkpointing enabled without a path");
    for (std::size_t i = 0; i < kRateCount; ++i)
      if (!(rates.value[i] >= 0.0))
        throw std::invalid_argument("train options: negative rate constant");
  }
};

inline TrainOptions default_train_options() {
  TrainOptions o;
  o.u_cfg.hidden = {100, 100, 100};
  o.u_cfg.out_dim = 4;
  o.lam_cfg.hidden = {200, 200};
  o.lam_cfg.out_dim = 1;
  return o;
}

struct TrainingRun {
  std::uint64_t seed = 0;
  std::vector<int> history_epochs;        // 1-based epoch numbers
  std::vector<LossBreakdown> history;     // one entry per log interval
  Network u_net, lam_net;
  std::array<double, kRateCount> rate_values{};
  std::array<double, 4> log_vars{};
  LossBreakdown final_losses;
  std::vector<double> t_grid;             // dense output grid, original units
  Eigen::MatrixXd curves;                 // 4 x dense: C, T, M, G
  std::vector<double> s_mt;               // dense s_MT(t), original units
  double wall_time_s = 0.0;
  Scales scales;
};

namespace detail {

// Exact (hex-float) scalar IO for checkpoints: resumed runs must continue
// bit-identically.
inline void write_value(std::ostream& os, double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%a\n", v);
  os << buf;
}

inline double read_value(std::istream& is) {
  std::string tok;
  if (!(is >> tok)) throw std::runtime_error("checkpoint: truncated file");
  return std::strtod(tok.c_str(), nullptr);
}

}  // namespace detail

void save_checkpoint(const std::string& path, int epoch, const ad::Tape& tape, const Adam& adam,
                     const std::vector<ad::Tape::Ref>& leaves, const TrainingRun& run);
int load_checkpoint(const std::string& path, ad::Tape& tape, Adam& adam,
                    const std::vector<ad::Tape::Ref>& leaves, TrainingRun& run);

// One full training run on a fixed observation set.
inline TrainingRun train(const ObservationSet& obs, const TrainOptions& opt, std::uint64_t seed) {
  const auto t_start = std::chrono::steady_clock::now();
  opt.validate();
  obs.validate();

  const SplineCurve spline = fit_spline(obs);
  const Normalizer norm = Normalizer::from_observations(obs);
  const Scales scales{norm.t_span(), norm.volume_scale(), opt.gem_scale, opt.lambda_scale};
  const CollocationData cd =
      prepare_collocation(obs, spline, opt.m_interp, opt.schedule, scales, opt.bc_mean);

  TrainingRun run;
  run.seed = seed;
  run.scales = scales;
  run.u_net = Network(opt.u_cfg, mix_seed(seed, 0));
  run.lam_net = Network(opt.lam_cfg, mix_seed(seed, 1));

  ad::Tape tape;
  const TapedNet tu = run.u_net.register_on(tape);
  const TapedNet tl = opt.pinned_smt ? TapedNet{} : run.lam_net.register_on(tape);
  const TapedRates rates = register_rates(tape, opt.rates);
  std::array<ad::Tape::Ref, 4> log_vars;
  for (auto& r : log_vars) r = tape.scalar_leaf(0.0);

  std::vector<ad::Tape::Ref> leaves = tu.weights;
  leaves.insert(leaves.end(), tl.weights.begin(), tl.weights.end());
  for (std::size_t i = 0; i < kRateCount; ++i)
    if (rates.raw[i] >= 0) leaves.push_back(rates.raw[i]);
  for (ad::Tape::Ref r : log_vars) leaves.push_back(r);
  Adam adam(tape, leaves, opt.adam);

  // pinned s_MT values on the residual grid, if requested
  Eigen::RowVectorXd pinned_row;
  if (opt.pinned_smt) {
    pinned_row.resize(static_cast<Eigen::Index>(cd.n_residual));
    for (std::size_t j = 0; j < cd.n_residual; ++j)
      pinned_row(static_cast<Eigen::Index>(j)) = (*opt.pinned_smt)(cd.t_of_tau(cd.tau[j]));
  }

  Eigen::MatrixXd grid(1, static_cast<Eigen::Index>(cd.tau.size()));
  for (std::size_t j = 0; j < cd.tau.size(); ++j)
    grid(0, static_cast<Eigen::Index>(j)) = cd.tau[j];

  int start_epoch = 0;
  if (!opt.resume_from.empty())
    start_epoch = load_checkpoint(opt.resume_from, tape, adam, leaves, run);

  const std::size_t checkpoint_mark = tape.mark();
  auto build = [&]() {
    const ad::Tape::Ref x = tape.constant(grid);
    const ad::Tape::Ref lam_row =
        opt.pinned_smt ? tape.constant(pinned_row)
                       : lambda_from_network(tape, tl, x, cd.n_residual, scales.lambda);
    return build_losses(tape, cd, tu, lam_row, rates, log_vars, x);
  };

  int bad_streak = 0;
  for (int epoch = start_epoch; epoch < opt.epochs; ++epoch) {
    bool finite_epoch = true;
    LossBreakdown b;
    try {
      const LossNodes nodes = build();
      b = read_breakdown(tape, nodes, log_vars);
      tape.backward(nodes.total);
      if (!adam.step(tape)) finite_epoch = false;
    } catch (const std::runtime_error&) {
      finite_epoch = false;  // non-finite forward; leave parameters untouched
    }
    tape.reset(checkpoint_mark);

    if (!finite_epoch || !std::isfinite(b.total) || b.total > opt.divergence_loss) {
      if (++bad_streak >= opt.divergence_patience)
        throw AbortedRun("training diverged: " + std::to_string(bad_streak) +
                         " consecutive bad epochs, last total=" +
                         (finite_epoch ? std::to_string(b.total) : std::string("non-finite")) +
                         " at epoch " + std::to_string(epoch + 1) + " (seed " +
                         std::to_string(seed) + ")");
    } else {
      bad_streak = 0;
    }

    if (finite_epoch) {
      // keep the multi-task weights in a sane range
      for (ad::Tape::Ref r : log_vars) {
        double& s = tape.leaf_value(r)(0, 0);
        s = std::clamp(s, -opt.log_var_clamp, opt.log_var_clamp);
      }
    }

    if ((epoch + 1) % opt.log_interval == 0) {
      run.history_epochs.push_back(epoch + 1);
      run.history.push_back(b);
    }
    if (opt.checkpoint_interval > 0 && (epoch + 1) % opt.checkpoint_interval == 0)
      save_checkpoint(opt.checkpoint_path, epoch + 1, tape, adam, leaves, run);
  }

  // final state: losses once more, then read everything back
  {
    const LossNodes nodes = build();
    run.final_losses = read_breakdown(tape, nodes, log_vars);
    tape.reset(checkpoint_mark);
  }
  run.u_net.read_back(tape, tu);
  if (!opt.pinned_smt) run.lam_net.read_back(tape, tl);
  run.rate_values = read_rates(tape, rates);
  for (std::size_t k = 0; k < 4; ++k) run.log_vars[k] = tape.val(log_vars[k])(0, 0);

  // dense curves in original units
  const int nd = opt.dense_grid;
  Eigen::MatrixXd dense_tau(1, nd);
  run.t_grid.resize(static_cast<std::size_t>(nd));
  for (int j = 0; j < nd; ++j) {
    const double tau = static_cast<double>(j) / (nd - 1);
    dense_tau(0, j) = tau;
    run.t_grid[static_cast<std::size_t>(j)] = norm.denorm_time(tau);
  }
  run.curves = run.u_net.forward_batch(dense_tau);
  run.curves.topRows(3) *= scales.volume;
  run.curves.row(3) *= scales.gem;
  run.s_mt.resize(static_cast<std::size_t>(nd));
  if (opt.pinned_smt) {
    for (int j = 0; j < nd; ++j)
      run.s_mt[static_cast<std::size_t>(j)] = (*opt.pinned_smt)(run.t_grid[static_cast<std::size_t>(j)]);
  } else {
    const Eigen::MatrixXd lam = run.lam_net.forward_batch(dense_tau);
    for (int j = 0; j < nd; ++j)
      run.s_mt[static_cast<std::size_t>(j)] = scales.lambda * lam(0, j);
  }

  run.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return run;
}

// --- checkpointing ---------------------------------------------------------

inline void save_checkpoint(const std::string& path, int epoch, const ad::Tape& tape,
                            const Adam& adam, const std::vector<ad::Tape::Ref>& leaves,
                            const TrainingRun& run) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot write " + path);
  std::size_t scalar_count = 0;
  for (ad::Tape::Ref r : leaves) scalar_count += static_cast<std::size_t>(tape.val(r).size());
  os << "pinn-checkpoint 1\n";
  os << "epoch " << epoch << "\n";
  os << "adam_step " << adam.step_count() << "\n";
  os << "scalars " << scalar_count << "\n";
  os << "history " << run.history.size() << "\n";
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    const ad::Mat& th = tape.val(leaves[i]);
    const ad::Mat& m = adam.first_moments()[i];
    const ad::Mat& v = adam.second_moments()[i];
    for (Eigen::Index k = 0; k < th.size(); ++k) detail::write_value(os, th.data()[k]);
    for (Eigen::Index k = 0; k < m.size(); ++k) detail::write_value(os, m.data()[k]);
    for (Eigen::Index k = 0; k < v.size(); ++k) detail::write_value(os, v.data()[k]);
  }
  for (std::size_t i = 0; i < run.history.size(); ++i) {
    const LossBreakdown& b = run.history[i];
    os << run.history_epochs[i] << "\n";
    for (double x : {b.L_r, b.L_d, b.L_IC, b.L_bc, b.w_r, b.w_d, b.w_IC, b.w_bc, b.total})
      detail::write_value(os, x);
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

inline int load_checkpoint(const std::string& path, ad::Tape& tape, Adam& adam,
                           const std::vector<ad::Tape::Ref>& leaves, TrainingRun& run) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  std::string magic;
  int version = 0;
  is >> magic >> version;
  if (magic != "pinn-checkpoint" || version != 1)
    throw std::runtime_error("checkpoint: unrecognized header in " + path);
  std::string key;
  int epoch = 0;
  long adam_step = 0;
  std::size_t scalars = 0, history = 0;
  is >> key >> epoch;
  if (key != "epoch") throw std::runtime_error("checkpoint: malformed file " + path);
  is >> key >> adam_step;
  if (key != "adam_step") throw std::runtime_error("checkpoint: malformed file " + path);
  is >> key >> scalars;
  if (key != "scalars") throw std::runtime_error("checkpoint: malformed file " + path);
  is >> key >> history;
  if (key != "history") throw std::runtime_error("checkpoint: malformed file " + path);

  std::size_t expect = 0;
  for (ad::Tape::Ref r : leaves) expect += static_cast<std::size_t>(tape.val(r).size());
  if (scalars != expect)
    throw std::runtime_error("checkpoint: parameter count " + std::to_string(scalars) +
                             " does not match the configured model (" + std::to_string(expect) + ")");

  std::vector<ad::Mat> m, v;
  for (ad::Tape::Ref r : leaves) {
    ad::Mat& th = tape.leaf_value(r);
    ad::Mat mm(th.rows(), th.cols()), vv(th.rows(), th.cols());
    for (Eigen::Index k = 0; k < th.size(); ++k) th.data()[k] = detail::read_value(is);
    for (Eigen::Index k = 0; k < mm.size(); ++k) mm.data()[k] = detail::read_value(is);
    for (Eigen::Index k = 0; k < vv.size(); ++k) vv.data()[k] = detail::read_value(is);
    m.push_back(std::move(mm));
    v.push_back(std::move(vv));
  }
  adam.restore(adam_step, std::move(m), std::move(v));

  run.history.clear();
  run.history_epochs.clear();
  for (std::size_t i = 0; i < history; ++i) {
    int he = 0;
    if (!(is >> he)) throw std::runtime_error("checkpoint: truncated history in " + path);
    LossBreakdown b;
    b.L_r = detail::read_value(is);
    b.L_d = detail::read_value(is);
    b.L_IC = detail::read_value(is);
    b.L_bc = detail::read_value(is);
    b.w_r = detail::read_value(is);
    b.w_d = detail::read_value(is);
    b.w_IC = detail::read_value(is);
    b.w_bc = detail::read_value(is);
    b.total = detail::read_value(is);
    run.history_epochs.push_back(he);
    run.history.push_back(b);
  }
  return epoch;
}

// --- ensemble --------------------------------------------------------------

struct EnsembleResult {
  std::vector<std::uint64_t> seeds;          // the seeds that survived
  std::vector<TrainingRun> runs;             // in surviving-seed order
  std::vector<std::string> aborted;          // diagnostics of excluded runs
  std::vector<double> t_grid;
  Eigen::MatrixXd mean, stdev;               // 5 x dense: C, T, M, G, s_MT
  double wall_time_s = 0.0;
};

inline EnsembleResult run_ensemble(const ObservationSet& obs, const TrainOptions& opt,
                                   const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw std::invalid_argument("ensemble: need at least one seed");
  const auto t_start = std::chrono::steady_clock::now();

  EnsembleResult res;
  for (std::uint64_t seed : seeds) {
    try {
      TrainingRun run = train(obs, opt, seed);
      res.seeds.push_back(seed);
      res.runs.push_back(std::move(run));
    } catch (const AbortedRun& e) {
      res.aborted.push_back(e.what());
    }
  }
  if (!res.aborted.empty() && res.runs.size() < 3) {
    std::string msg = "ensemble failed: only " + std::to_string(res.runs.size()) +
                      " of " + std::to_string(seeds.size()) + " runs survived";
    for (const std::string& a : res.aborted) msg += "\n  " + a;
    throw EnsembleFailure(msg);
  }

  const auto n_runs = static_cast<Eigen::Index>(res.runs.size());
  const auto nd = static_cast<Eigen::Index>(res.runs.front().t_grid.size());
  res.t_grid = res.runs.front().t_grid;
  res.mean = Eigen::MatrixXd::Zero(5, nd);
  res.stdev = Eigen::MatrixXd::Zero(5, nd);
  for (const TrainingRun& run : res.runs) {
    res.mean.topRows(4) += run.curves;
    for (Eigen::Index j = 0; j < nd; ++j)
      res.mean(4, j) += run.s_mt[static_cast<std::size_t>(j)];
  }
  res.mean /= static_cast<double>(n_runs);
  for (const TrainingRun& run : res.runs) {
    Eigen::MatrixXd d(5, nd);
    d.topRows(4) = run.curves - res.mean.topRows(4);
    for (Eigen::Index j = 0; j < nd; ++j)
      d(4, j) = run.s_mt[static_cast<std::size_t>(j)] - res.mean(4, j);
    res.stdev += d.cwiseProduct(d);
  }
  // population standard deviation: a singleton ensemble has zero-width bands
  res.stdev = (res.stdev / static_cast<double>(n_runs)).cwiseSqrt();

  res.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return res;
}

}  // namespace pinn
