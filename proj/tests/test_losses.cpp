#include <catch2/catch_amalgamated.hpp>

#include <pinn/losses.hpp>
#include <pinn/network.hpp>
#include <pinn/ode.hpp>
#include <pinn/rng.hpp>
#include <pinn/spline.hpp>
#include <pinn/tape.hpp>

#include <array>
#include <cmath>
#include <vector>

using namespace pinn;
using pinn::ad::Mat;
using pinn::ad::Tape;

namespace {

ParamSet fixture_params() {
  ParamSet p;
  p.p_C = 0.3; p.k_TC = 0.05; p.k_GC = 0.02;
  p.n_T = 0.1; p.s_CT = 0.01; p.s_MT = 0.04; p.k_GT = 0.01;
  p.r_M = 0.05; p.k_GM = 0.6; p.d_M = 0.2; p.d_G = 0.5;
  return p;
}

DosingSchedule fixture_schedule() {
  DosingSchedule s;
  s.injections.push_back({Agent::GEM, 10.0, 0.5, 0.25});
  s.injections.push_back({Agent::OT1, 14.0, 20.0, 0.25});
  return s;
}

SmtCurve fixture_smt() { return SmtCurve::sigmoid(0.04, 0.01, 15.0, 1.0); }

struct Problem {
  Trajectory traj;
  ObservationSet obs;
  SplineCurve spline;
  Scales scales;
  CollocationData cd;
};

Problem make_problem(int m_interp, double rk4_h = 0.005) {
  Problem pr;
  const SystemState init{4.99435, 0.09, 0.00565, 0.0};
  pr.traj = solve_rk4(init, fixture_params(), fixture_smt(), fixture_schedule(), 6.0, 23.0, rk4_h);
  pr.obs = synthesize_observations(pr.traj, {6, 9, 13, 16, 20, 23}, {17.0, 23.0}, 0.0, 1);
  pr.spline = fit_spline(pr.obs);
  const Normalizer norm = Normalizer::from_observations(pr.obs);
  pr.scales = {norm.t_span(), norm.volume_scale(), 0.5, 0.05};
  pr.cd = prepare_collocation(pr.obs, pr.spline, m_interp, fixture_schedule(), pr.scales);
  return pr;
}

Eigen::MatrixXd grid_matrix(const CollocationData& cd) {
  Eigen::MatrixXd x(1, static_cast<Eigen::Index>(cd.tau.size()));
  for (std::size_t j = 0; j < cd.tau.size(); ++j) x(0, static_cast<Eigen::Index>(j)) = cd.tau[j];
  return x;
}

NetworkConfig small_cfg(std::vector<int> hidden, int out) {
  NetworkConfig c;
  c.hidden = std::move(hidden);
  c.out_dim = out;
  return c;
}

}  // namespace

TEST_CASE("initial-condition loss arithmetic") {
  SECTION("exact satisfaction gives zero") {
    Eigen::VectorXd pred(3);
    pred << 0.99887, 0.0, 0.00113;
    CHECK(anchor_loss_values(pred, {0.99887, 0.0, 0.00113}, 1.0) == 0.0);
  }
  SECTION("prediction (1,0,0) against (0.99887, 0, 0.00113) with u_hat = 1") {
    Eigen::VectorXd pred(3);
    pred << 1.0, 0.0, 0.0;
    const double got = anchor_loss_values(pred, {0.99887, 0.0, 0.00113}, 1.0);
    CHECK(got == Catch::Approx(2.5538e-6).epsilon(1e-4));
    // exact arithmetic: (1 - 0.99887)^2 + 0 + 0.00113^2
    CHECK(got == Catch::Approx(0.00113 * 0.00113 * 2.0).epsilon(1e-12));
  }
  SECTION("a zero target penalizes the prediction directly") {
    Eigen::VectorXd pred(3);
    pred << 0.99887, 0.07, 0.00113;
    const double got = anchor_loss_values(pred, {0.99887, 0.0, 0.00113}, 1.0);
    CHECK(got == Catch::Approx(0.07 * 0.07).epsilon(1e-12));
  }
}

TEST_CASE("constraint loss arithmetic at the histology anchors") {
  SECTION("day-17 proportions matched exactly give zero") {
    Eigen::VectorXd pred(3);
    pred << 0.95755, 0.01818, 0.02427;
    CHECK(anchor_loss_values(pred, {0.95755, 0.01818, 0.02427}, 1.0) == 0.0);
  }
  SECTION("all-zero prediction against day-23 proportions with u_hat = 1") {
    const Eigen::VectorXd pred = Eigen::VectorXd::Zero(3);
    const double got = anchor_loss_values(pred, {0.95665, 0.00078, 0.04256}, 1.0);
    CHECK(got == Catch::Approx(0.9169911845).epsilon(1e-10));
  }
}

TEST_CASE("data loss arithmetic") {
  SECTION("perfect fit gives zero") {
    Eigen::MatrixXd u(3, 2);
    u << 0.5, 0.6, 0.3, 0.2, 0.2, 0.2;
    Eigen::VectorXd obs(2);
    obs << 1.0, 1.0;
    CHECK(data_loss_values(u, obs) == 0.0);
  }
  SECTION("constant offset delta gives delta squared") {
    Eigen::MatrixXd u(3, 3);
    u.setConstant(0.2);  // totals 0.6
    Eigen::VectorXd obs(3);
    obs.setConstant(0.6 - 0.03);
    CHECK(data_loss_values(u, obs) == Catch::Approx(0.03 * 0.03).epsilon(1e-12));
  }
  SECTION("single observation, 0.8 predicted vs 1.0 observed") {
    Eigen::MatrixXd u(3, 1);
    u << 0.5, 0.2, 0.1;
    Eigen::VectorXd obs(1);
    obs << 1.0;
    CHECK(data_loss_values(u, obs) == Catch::Approx(0.04).epsilon(1e-12));
  }
  SECTION("homogeneity: scaling data and predictions by k scales the loss by k^2") {
    Rng rng(4);
    Eigen::MatrixXd u(3, 4);
    for (int i = 0; i < u.size(); ++i) u.data()[i] = rng.uniform(0.0, 1.0);
    Eigen::VectorXd obs(4);
    for (int i = 0; i < 4; ++i) obs(i) = rng.uniform(0.5, 2.0);
    const double base = data_loss_values(u, obs);
    const double k = 3.7;
    CHECK(data_loss_values(k * u, k * obs) == Catch::Approx(k * k * base).epsilon(1e-12));
  }
}

TEST_CASE("residual loss on a zero vector field vanishes for constant curves") {
  Problem pr = make_problem(20);
  // zero all rates and dosing: constant u solves du/dtau = 0
  CollocationData cd = pr.cd;
  cd.forcing_T.setZero();
  cd.forcing_G.setZero();
  const auto n = static_cast<Eigen::Index>(cd.n_residual);
  const Eigen::MatrixXd u = Eigen::MatrixXd::Constant(4, n, 0.37);
  const Eigen::MatrixXd du = Eigen::MatrixXd::Zero(4, n);
  const Eigen::RowVectorXd lam = Eigen::RowVectorXd::Zero(n);
  CHECK(residual_loss_values(cd, u, du, lam, {}) == 0.0);

  SECTION("perturbing one derivative row raises it above zero") {
    Eigen::MatrixXd du2 = du;
    du2(1, 5) = 0.01;
    CHECK(residual_loss_values(cd, u, du2, lam, {}) > 0.0);
  }
}

TEST_CASE("oracle trajectory substituted into the residual leaves only solver error") {
  Problem pr = make_problem(100, 0.005);
  const CollocationData& cd = pr.cd;
  const double V = pr.scales.volume, SG = pr.scales.gem, T = pr.scales.t_span;

  // dense per-component splines over the fine solver grid
  std::vector<double> tc = pr.traj.t;
  std::vector<double> C(tc.size()), Tv(tc.size()), M(tc.size()), G(tc.size());
  for (std::size_t i = 0; i < tc.size(); ++i) {
    C[i] = pr.traj.states[i].C;
    Tv[i] = pr.traj.states[i].T;
    M[i] = pr.traj.states[i].M;
    G[i] = pr.traj.states[i].G;
  }
  const SplineCurve sC(tc, C), sT(tc, Tv), sM(tc, M), sG(tc, G);

  const auto n = static_cast<Eigen::Index>(cd.n_residual);
  Eigen::MatrixXd u(4, n), du(4, n);
  Eigen::RowVectorXd lam(n);
  const SmtCurve smt = fixture_smt();
  for (Eigen::Index j = 0; j < n; ++j) {
    const double t = cd.t_of_tau(cd.tau[static_cast<std::size_t>(j)]);
    u(0, j) = sC.value(t) / V;
    u(1, j) = sT.value(t) / V;
    u(2, j) = sM.value(t) / V;
    u(3, j) = sG.value(t) / SG;
    du(0, j) = sC.derivative(t) * T / V;
    du(1, j) = sT.derivative(t) * T / V;
    du(2, j) = sM.derivative(t) * T / V;
    du(3, j) = sG.derivative(t) * T / SG;
    lam(j) = smt(t);
  }
  const double L_r =
      residual_loss_values(cd, u, du, lam, RateSpec::pinned(fixture_params()).value);
  CHECK(L_r <= 1e-3);
}

TEST_CASE("residual on coarsely resampled oracle curves shrinks as the grid refines") {
  std::vector<double> L;
  for (int m : {25, 50, 100}) {
    Problem pr = make_problem(m, 0.002);
    const CollocationData& cd = pr.cd;
    const double V = pr.scales.volume, SG = pr.scales.gem, T = pr.scales.t_span;
    const auto n = static_cast<Eigen::Index>(cd.n_residual);

    // splines knotted at the collocation points themselves: the only error
    // is interpolation error, which refinement must reduce
    std::vector<double> tk(static_cast<std::size_t>(n));
    std::vector<double> C(tk.size()), Tv(tk.size()), M(tk.size()), G(tk.size());
    for (std::size_t j = 0; j < tk.size(); ++j) {
      tk[j] = cd.t_of_tau(cd.tau[j]);
      const SystemState s = pr.traj.at(tk[j]);
      C[j] = s.C; Tv[j] = s.T; M[j] = s.M; G[j] = s.G;
    }
    const SplineCurve sC(tk, C), sT(tk, Tv), sM(tk, M), sG(tk, G);
    Eigen::MatrixXd u(4, n), du(4, n);
    Eigen::RowVectorXd lam(n);
    const SmtCurve smt = fixture_smt();
    for (Eigen::Index j = 0; j < n; ++j) {
      const double t = tk[static_cast<std::size_t>(j)];
      u(0, j) = sC.value(t) / V;  du(0, j) = sC.derivative(t) * T / V;
      u(1, j) = sT.value(t) / V;  du(1, j) = sT.derivative(t) * T / V;
      u(2, j) = sM.value(t) / V;  du(2, j) = sM.derivative(t) * T / V;
      u(3, j) = sG.value(t) / SG; du(3, j) = sG.derivative(t) * T / SG;
      lam(j) = smt(t);
    }
    L.push_back(residual_loss_values(cd, u, du, lam, RateSpec::pinned(fixture_params()).value));
  }
  CHECK(L[0] > L[1]);
  CHECK(L[1] > L[2]);
}

TEST_CASE("total loss weighting") {
  LossBreakdown b;
  b.L_r = 0.8; b.L_d = 0.01; b.L_IC = 2e-5; b.L_bc = 0.3;
  SECTION("all log-variances zero: plain sum") {
    CHECK(total_loss_value(b, {0, 0, 0, 0}) ==
          Catch::Approx(0.8 + 0.01 + 2e-5 + 0.3).epsilon(1e-15));
  }
  SECTION("weights stay positive for any log-variance") {
    for (double s : {-8.0, -1.0, 0.0, 2.5, 9.0}) {
      CHECK(std::exp(-s) > 0.0);
      const double t1 = total_loss_value(b, {s, 0, 0, 0});
      CHECK(std::isfinite(t1));
    }
  }
}

TEST_CASE("taped loss assembly") {
  Problem pr = make_problem(30);
  Network u_net(small_cfg({5, 5}, 4), 3);
  Network lam_net(small_cfg({4}, 1), 4);
  const std::array<double, 4> lv = {0.2, -0.4, 0.1, 0.0};
  RateSpec rates = RateSpec::pinned(fixture_params());
  rates.trainable[static_cast<std::size_t>(Rate::pC)] = true;
  rates.trainable[static_cast<std::size_t>(Rate::dG)] = true;

  Tape t;
  TapedNet tu = u_net.register_on(t);
  TapedNet tl = lam_net.register_on(t);
  TapedRates tr = register_rates(t, rates);
  std::array<Tape::Ref, 4> lvr;
  for (int k = 0; k < 4; ++k) lvr[static_cast<std::size_t>(k)] = t.scalar_leaf(lv[static_cast<std::size_t>(k)]);
  const Tape::Ref x_full = t.constant(grid_matrix(pr.cd));
  const Tape::Ref lam_row =
      lambda_from_network(t, tl, x_full, pr.cd.n_residual, pr.scales.lambda);
  const LossNodes ln = build_losses(t, pr.cd, tu, lam_row, tr, lvr, x_full);
  const LossBreakdown taped = read_breakdown(t, ln, lvr);

  SECTION("matches the plain-value evaluation") {
    const auto n = static_cast<Eigen::Index>(pr.cd.n_residual);
    Eigen::MatrixXd xres = grid_matrix(pr.cd).leftCols(n);
    const Eigen::RowVectorXd lam_plain = pr.scales.lambda * lam_net.forward_batch(xres).row(0);
    const LossBreakdown plain =
        evaluate_losses_plain(pr.cd, u_net, lam_plain, read_rates(t, tr), lv);
    CHECK(taped.L_r == Catch::Approx(plain.L_r).epsilon(1e-12));
    CHECK(taped.L_d == Catch::Approx(plain.L_d).epsilon(1e-12));
    CHECK(taped.L_IC == Catch::Approx(plain.L_IC).epsilon(1e-12));
    CHECK(taped.L_bc == Catch::Approx(plain.L_bc).epsilon(1e-12));
    CHECK(taped.total == Catch::Approx(plain.total).epsilon(1e-12));
  }
  SECTION("breakdown satisfies the weighting identity") {
    const double recomputed = std::exp(-lv[0]) * taped.L_r + lv[0] +
                              std::exp(-lv[1]) * taped.L_d + lv[1] +
                              std::exp(-lv[2]) * taped.L_IC + lv[2] +
                              std::exp(-lv[3]) * taped.L_bc + lv[3];
    CHECK(taped.total == Catch::Approx(recomputed).epsilon(1e-12));
    CHECK(taped.w_r == Catch::Approx(std::exp(-lv[0])).epsilon(1e-15));
    CHECK(taped.L_r >= 0.0);
    CHECK(taped.L_d >= 0.0);
    CHECK(taped.L_IC >= 0.0);
    CHECK(taped.L_bc >= 0.0);
  }
  SECTION("log-variance gradient is 1 - exp(-s_k) L_k") {
    t.backward(ln.total);
    const std::array<double, 4> Ls = {taped.L_r, taped.L_d, taped.L_IC, taped.L_bc};
    for (std::size_t k = 0; k < 4; ++k) {
      const double want = 1.0 - std::exp(-lv[k]) * Ls[k];
      CHECK(t.grad(lvr[k])(0, 0) == Catch::Approx(want).epsilon(1e-12));
    }
  }
  SECTION("gradient vanishes at the stationary point s_k = ln L_k") {
    const std::array<double, 4> Ls = {taped.L_r, taped.L_d, taped.L_IC, taped.L_bc};
    Tape t2;
    TapedNet tu2 = u_net.register_on(t2);
    TapedNet tl2 = lam_net.register_on(t2);
    TapedRates tr2 = register_rates(t2, rates);
    std::array<Tape::Ref, 4> lvr2;
    for (std::size_t k = 0; k < 4; ++k) {
      REQUIRE(Ls[k] > 0.0);
      lvr2[k] = t2.scalar_leaf(std::log(Ls[k]));
    }
    const Tape::Ref x2 = t2.constant(grid_matrix(pr.cd));
    const Tape::Ref lam2 = lambda_from_network(t2, tl2, x2, pr.cd.n_residual, pr.scales.lambda);
    const LossNodes ln2 = build_losses(t2, pr.cd, tu2, lam2, tr2, lvr2, x2);
    t2.backward(ln2.total);
    for (std::size_t k = 0; k < 4; ++k)
      CHECK(std::abs(t2.grad(lvr2[k])(0, 0)) < 1e-10);
  }
}

TEST_CASE("total-loss gradients match finite differences on a downsized problem") {
  Problem pr = make_problem(8);
  const NetworkConfig ucfg = small_cfg({5, 5}, 4);
  const NetworkConfig lcfg = small_cfg({4}, 1);
  RateSpec rates = RateSpec::pinned(fixture_params());
  rates.trainable[static_cast<std::size_t>(Rate::pC)] = true;
  rates.trainable[static_cast<std::size_t>(Rate::dG)] = true;

  Rng seed_rng(99);
  for (int config_i = 0; config_i < 3; ++config_i) {
    Network u_net(ucfg, 100 + static_cast<std::uint64_t>(config_i));
    Network lam_net(lcfg, 200 + static_cast<std::uint64_t>(config_i));
    const std::vector<double> u0 = u_net.flatten();
    const std::vector<double> l0 = lam_net.flatten();
    const double raw_pC = TrainableScalar::from_value(0.2 + 0.1 * config_i).raw;
    const double raw_dG = TrainableScalar::from_value(0.4).raw;
    const std::array<double, 4> lv0 = {0.1 * config_i, -0.2, 0.05, 0.3};

    auto eval_total = [&](const std::vector<double>& uf, const std::vector<double>& lf,
                          double rpc, double rdg, const std::array<double, 4>& lv) {
      Network u(ucfg, 0), l(lcfg, 0);
      u.unflatten(uf);
      l.unflatten(lf);
      RateSpec rs = rates;
      rs[Rate::pC] = ad::detail::softplus_scalar(rpc);
      rs[Rate::dG] = ad::detail::softplus_scalar(rdg);
      Tape t;
      TapedNet tu = u.register_on(t), tl = l.register_on(t);
      TapedRates tr = register_rates(t, rs);
      std::array<Tape::Ref, 4> lvr;
      for (std::size_t k = 0; k < 4; ++k) lvr[k] = t.scalar_leaf(lv[k]);
      const Tape::Ref x = t.constant(grid_matrix(pr.cd));
      const Tape::Ref lam = lambda_from_network(t, tl, x, pr.cd.n_residual, pr.scales.lambda);
      return t.val(build_losses(t, pr.cd, tu, lam, tr, lvr, x).total)(0, 0);
    };

    // analytic gradients from one taped pass
    Network u(ucfg, 0), l(lcfg, 0);
    u.unflatten(u0);
    l.unflatten(l0);
    RateSpec rs = rates;
    rs[Rate::pC] = ad::detail::softplus_scalar(raw_pC);
    rs[Rate::dG] = ad::detail::softplus_scalar(raw_dG);
    Tape t;
    TapedNet tu = u.register_on(t), tl = l.register_on(t);
    TapedRates tr = register_rates(t, rs);
    std::array<Tape::Ref, 4> lvr;
    for (std::size_t k = 0; k < 4; ++k) lvr[k] = t.scalar_leaf(lv0[k]);
    const Tape::Ref x = t.constant(grid_matrix(pr.cd));
    const Tape::Ref lam = lambda_from_network(t, tl, x, pr.cd.n_residual, pr.scales.lambda);
    const LossNodes ln = build_losses(t, pr.cd, tu, lam, tr, lvr, x);
    t.backward(ln.total);

    auto flat_grads = [&](const TapedNet& tn) {
      std::vector<double> g;
      for (std::size_t k = 0; k + 1 < tn.dims.size(); ++k) {
        const Mat gw = t.grad(tn.weights[2 * k]);
        for (Eigen::Index i = 0; i < gw.rows(); ++i)
          for (Eigen::Index j = 0; j < gw.cols(); ++j) g.push_back(gw(i, j));
        const Mat gb = t.grad(tn.weights[2 * k + 1]);
        for (Eigen::Index i = 0; i < gb.size(); ++i) g.push_back(gb(i, 0));
      }
      return g;
    };
    const std::vector<double> gu = flat_grads(tu);
    const std::vector<double> gl = flat_grads(tl);

    const double h = 1e-6;
    auto check = [&](double analytic, double fd, const std::string& label) {
      const double denom = std::max({std::abs(fd), std::abs(analytic), 1e-4});
      INFO(label << " analytic=" << analytic << " fd=" << fd);
      CHECK(std::abs(analytic - fd) / denom < 1e-3);
    };

    for (std::size_t i = 0; i < u0.size(); ++i) {
      auto p = u0;
      p[i] = u0[i] + h;
      const double up = eval_total(p, l0, raw_pC, raw_dG, lv0);
      p[i] = u0[i] - h;
      const double dn = eval_total(p, l0, raw_pC, raw_dG, lv0);
      check(gu[i], (up - dn) / (2 * h), "u weight " + std::to_string(i));
    }
    for (std::size_t i = 0; i < l0.size(); ++i) {
      auto p = l0;
      p[i] = l0[i] + h;
      const double up = eval_total(u0, p, raw_pC, raw_dG, lv0);
      p[i] = l0[i] - h;
      const double dn = eval_total(u0, p, raw_pC, raw_dG, lv0);
      check(gl[i], (up - dn) / (2 * h), "lambda weight " + std::to_string(i));
    }
    {
      const double up = eval_total(u0, l0, raw_pC + h, raw_dG, lv0);
      const double dn = eval_total(u0, l0, raw_pC - h, raw_dG, lv0);
      check(t.grad(tr.raw[static_cast<std::size_t>(Rate::pC)])(0, 0), (up - dn) / (2 * h), "raw p_C");
    }
    {
      const double up = eval_total(u0, l0, raw_pC, raw_dG + h, lv0);
      const double dn = eval_total(u0, l0, raw_pC, raw_dG - h, lv0);
      check(t.grad(tr.raw[static_cast<std::size_t>(Rate::dG)])(0, 0), (up - dn) / (2 * h), "raw d_G");
    }
    for (std::size_t k = 0; k < 4; ++k) {
      auto lvp = lv0;
      lvp[k] = lv0[k] + h;
      const double up = eval_total(u0, l0, raw_pC, raw_dG, lvp);
      lvp[k] = lv0[k] - h;
      const double dn = eval_total(u0, l0, raw_pC, raw_dG, lvp);
      check(t.grad(lvr[k])(0, 0), (up - dn) / (2 * h), "log var " + std::to_string(k));
    }
    (void)seed_rng;
  }
}

TEST_CASE("non-finite curves are reported with the offending grid point") {
  Problem pr = make_problem(10);
  const auto n = static_cast<Eigen::Index>(pr.cd.n_residual);
  Eigen::MatrixXd u = Eigen::MatrixXd::Constant(4, n, 0.2);
  Eigen::MatrixXd du = Eigen::MatrixXd::Zero(4, n);
  du(2, 4) = std::nan("");
  const Eigen::RowVectorXd lam = Eigen::RowVectorXd::Constant(n, 0.04);
  CHECK_THROWS_WITH(
      residual_loss_values(pr.cd, u, du, lam, RateSpec::pinned(fixture_params()).value),
      Catch::Matchers::ContainsSubstring("grid point"));
}

TEST_CASE("rate registration distinguishes pinned from trainable constants") {
  RateSpec rs = RateSpec::pinned(fixture_params());
  rs.trainable[static_cast<std::size_t>(Rate::rM)] = true;
  Tape t;
  const TapedRates tr = register_rates(t, rs);
  const auto vals = read_rates(t, tr);
  for (std::size_t i = 0; i < kRateCount; ++i)
    CHECK(vals[i] == Catch::Approx(rs.value[i]).epsilon(1e-9));

  // trainable raw leaves respond to backward; pinned ones have no leaf
  CHECK(tr.raw[static_cast<std::size_t>(Rate::rM)] >= 0);
  CHECK(tr.raw[static_cast<std::size_t>(Rate::pC)] == -1);
}
