#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace lqmfg;
using lqmfg::testing::s;
using lqmfg::testing::table1;

namespace {

struct Leader {
  ModelParams p;
  BlockRiccatiSolution sol;
  LeaderGains gains;
};

Leader leader_for(const ModelParams& p) {
  Leader l{p, solve_block_riccati(p, p.gamma), {}};
  l.gains = leader_gains(l.sol, l.p);
  return l;
}

const Leader& table1_leader() {
  static const Leader l = leader_for(table1());
  return l;
}

struct Full {
  Leader l;
  IncentiveResult res;
  FollowerGains fg;
};

Full full_for(const ModelParams& p) {
  Full f{leader_for(p), {}, {}};
  f.res = solve_cc_incentive(f.l.p, f.l.sol);
  const auto spp = solve_sigma_phi_psi(f.l.p, f.l.sol, f.res.dt, f.res.inc);
  f.fg = follower_gains(f.l.p, f.res.dt, spp, f.res.inc);
  return f;
}

ModelParams no_idiosyncratic(ModelParams p) {
  p.c.Sigma = s(0.0);
  return p;
}

}  // namespace

// ---------------------------------------------------------------------------
// Random numbers

TEST(Rng, PhiloxKnownAnswer) {
  const auto r = philox4x32({0, 0, 0, 0}, {0, 0});
  EXPECT_EQ(r[0], 0x6627e8d5u);
  EXPECT_EQ(r[1], 0xe169c58du);
  EXPECT_EQ(r[2], 0xbc57ac4cu);
  EXPECT_EQ(r[3], 0x9b00dbd8u);
}

TEST(Rng, NormalsAreAddressableAndStandard) {
  const NoiseSource a(42), b(42), c(43);
  EXPECT_EQ(a.normal(3, 1, 7, 0), b.normal(3, 1, 7, 0));
  EXPECT_NE(a.normal(3, 1, 7, 0), c.normal(3, 1, 7, 0));
  EXPECT_NE(a.normal(3, 1, 7, 0), a.normal(3, 1, 7, 1));
  double m = 0, v = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = a.normal(0, 0, static_cast<std::uint32_t>(i), 0);
    m += z;
    v += z * z;
  }
  m /= n;
  v = v / n - m * m;
  EXPECT_LE(std::abs(m), 0.01);
  EXPECT_LE(std::abs(v - 1.0), 0.01);
}

// ---------------------------------------------------------------------------
// Configuration and statistics

TEST(SimConfig, Validation) {
  SimConfig c;
  c.N = 0;
  EXPECT_THROW(c.validate(), ValueError);
  c = {};
  c.n_paths = 0;
  EXPECT_THROW(c.validate(), ValueError);
  c = {};
  c.em_substeps = 3;
  c.noise_substeps = 4;
  EXPECT_THROW(c.validate(), ValueError);
  c = {};
  c.antithetic = true;
  c.n_paths = 3;
  EXPECT_THROW(c.validate(), ValueError);
  c.n_paths = 4;
  EXPECT_NO_THROW(c.validate());
}

TEST(Statistics, PairedMeanUsesPairAverages) {
  const MeanStderr a = mean_stderr({1.0, 3.0, 2.0, 4.0}, true);
  EXPECT_EQ(a.units, 2);
  EXPECT_DOUBLE_EQ(a.mean, 2.5);
  EXPECT_DOUBLE_EQ(a.stderr_, 0.5);
  const MeanStderr b = mean_stderr({1.0, 3.0, 2.0, 4.0});
  EXPECT_EQ(b.units, 4);
}

TEST(Statistics, LogLogSlopeOfPowerLaw) {
  const SlopeFit f = fit_loglog({10, 20, 40, 80}, {0.1, 0.05, 0.025, 0.0125});
  EXPECT_FALSE(f.degenerate);
  EXPECT_NEAR(f.slope, -1.0, 1e-12);
  EXPECT_LE(f.half_width, 1e-9);
  EXPECT_TRUE(fit_loglog({10, 20, 40}, {0.0, 0.0, 0.0}).degenerate);
}

// ---------------------------------------------------------------------------
// Limit system

TEST(Limit, Table1FrozenPath) {
  const auto& l = table1_leader();
  SimConfig cfg;
  const PathBundle b = simulate_limit(l.p, l.gains, cfg);
  ASSERT_EQ(b.paths.size(), 1u);
  const auto& r = b.paths[0];
  EXPECT_NEAR(r.x0(0, 1000), 0.16253034628139867, 1e-12);
  EXPECT_NEAR(r.m(0, 1000), 0.81567707938350875, 1e-12);
  EXPECT_NEAR(r.x0(0, 500), -0.26995702683278416, 1e-12);
  EXPECT_EQ(r.x0(0, 0), 1.0);
  EXPECT_EQ(r.m(0, 0), 1.0);
}

TEST(Limit, ZeroInitialStateStaysAtRestWithZeroCost) {
  ModelParams p = table1();
  p.xi.setZero();
  p.x0init.setZero();
  const Leader l = leader_for(p);
  SimConfig cfg;
  cfg.n_paths = 4;
  const PathBundle b = simulate_limit(l.p, l.gains, cfg);
  for (const auto& r : b.paths) {
    EXPECT_EQ(r.x0.norm(), 0.0);
    EXPECT_EQ(r.m.norm(), 0.0);
    EXPECT_EQ(r.J0, 0.0);
  }
}

TEST(Limit, EulerMaruyamaStrongConvergence) {
  // same Brownian path at 16 fine increments per step, integrated at 1, 4 and 16 substeps
  const auto& l = table1_leader();
  SimConfig cfg;
  cfg.n_paths = 200;
  cfg.noise_substeps = 16;
  auto run = [&](int sub) {
    SimConfig c = cfg;
    c.em_substeps = sub;
    return simulate_limit(l.p, l.gains, c);
  };
  const PathBundle ref = run(16), b1 = run(1), b4 = run(4);
  double e1 = 0, e4 = 0;
  for (std::size_t i = 0; i < ref.paths.size(); ++i) {
    e1 += std::abs(b1.paths[i].x0(0, 1000) - ref.paths[i].x0(0, 1000));
    e4 += std::abs(b4.paths[i].x0(0, 1000) - ref.paths[i].x0(0, 1000));
  }
  EXPECT_GT(e1, 0.0);
  EXPECT_LT(e4, e1 / 1.5);
}

TEST(Limit, ZeroPerturbationGivesZeroMargins) {
  const auto& l = table1_leader();
  SimConfig cfg;
  cfg.n_paths = 8;
  const SaddleReport rep = saddle_check(l.p, l.sol, l.gains, cfg, {0.0});
  ASSERT_EQ(rep.entries.size(), 8u);
  for (const auto& e : rep.entries) {
    EXPECT_EQ(e.margin, 0.0);
    EXPECT_EQ(e.expected, 0.0);
    EXPECT_TRUE(e.ok);
  }
}

TEST(Limit, SaddleInequalitiesHoldOnTable1) {
  const auto& l = table1_leader();
  SimConfig cfg;
  cfg.n_paths = 200;
  const SaddleReport rep = saddle_check(l.p, l.sol, l.gains, cfg);
  EXPECT_TRUE(rep.all_ok);
  EXPECT_TRUE(rep.ratio_ok) << rep.u_ratio;
  double u = 0, v = 0;
  for (const auto& e : rep.entries) {
    if (e.epsilon != 0.5) continue;
    (e.target == Perturbation::Target::control ? u : v) += e.margin;
  }
  EXPECT_GT(u, 0.0);
  EXPECT_LT(v, 0.0);
}

// ---------------------------------------------------------------------------
// Population

TEST(Population, SingleFollowerWithoutIdiosyncraticNoiseTracksMeanField) {
  const Leader l = leader_for(no_idiosyncratic(table1()));
  SimConfig cfg;
  cfg.N = 1;
  cfg.n_paths = 2;
  cfg.mode = PopulationMode::team;
  for (const auto& r : simulate_population(l.p, l.gains, nullptr, nullptr, cfg).paths)
    EXPECT_LE((r.xN - r.m).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Population, SingleFollowerIncentiveModeTracksMeanFieldOnFixture) {
  const Full f = full_for(no_idiosyncratic(lqmfg::testing::exact_incentive_fixture()));
  SimConfig cfg;
  cfg.N = 1;
  cfg.n_paths = 2;
  for (const auto& r : simulate_population(f.l.p, f.l.gains, &f.fg, &f.res.inc, cfg).paths)
    EXPECT_LE((r.xN - r.m).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Population, FollowerStreamsDoNotDependOnPopulationSize) {
  ModelParams p = table1();
  p.c.F = s(0.0);
  p.c.Ft = s(0.0);
  const Leader l = leader_for(p);
  SimConfig cfg;
  cfg.mode = PopulationMode::team;
  cfg.N = 2;
  const PathBundle b2 = simulate_population(l.p, l.gains, nullptr, nullptr, cfg);
  cfg.N = 3;
  const PathBundle b3 = simulate_population(l.p, l.gains, nullptr, nullptr, cfg);
  // equal up to the rounding of vectorized products over 2 vs 3 columns
  EXPECT_LE((b2.paths[0].xi[0] - b3.paths[0].xi[0]).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LE((b2.paths[0].xi[1] - b3.paths[0].xi[1]).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LE((b2.paths[0].x0 - b3.paths[0].x0).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Population, ZeroStateWithoutNoiseGivesZeroCosts) {
  ModelParams p = no_idiosyncratic(table1());
  p.xi.setZero();
  p.x0init.setZero();
  const Leader l = leader_for(p);
  SimConfig cfg;
  cfg.N = 5;
  cfg.n_paths = 2;
  cfg.mode = PopulationMode::team;
  for (const auto& r : simulate_population(l.p, l.gains, nullptr, nullptr, cfg).paths) {
    EXPECT_EQ(r.J0, 0.0);
    EXPECT_EQ(r.Jf, 0.0);
    EXPECT_EQ(r.xN.norm(), 0.0);
  }
}

TEST(Population, EmpiricalMeanMatchesStoredFollowers) {
  const auto& l = table1_leader();
  SimConfig cfg;
  cfg.N = 7;
  cfg.mode = PopulationMode::team;
  cfg.store_all_followers = true;
  const PathBundle b = simulate_population(l.p, l.gains, nullptr, nullptr, cfg);
  ASSERT_EQ(b.stored_agents.size(), 7u);
  Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(1, 1001);
  for (const auto& x : b.paths[0].xi) mean += x;
  mean /= 7.0;
  EXPECT_LE((mean - b.paths[0].xN).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Population, ThreadCountDoesNotChangeResults) {
  const Full f = full_for(table1());
  SimConfig cfg;
  cfg.N = 20;
  cfg.n_paths = 6;
  cfg.threads = 1;
  const PathBundle a = simulate_population(f.l.p, f.l.gains, &f.fg, &f.res.inc, cfg);
  cfg.threads = 4;
  const PathBundle b = simulate_population(f.l.p, f.l.gains, &f.fg, &f.res.inc, cfg);
  for (std::size_t i = 0; i < a.paths.size(); ++i) {
    EXPECT_EQ(a.paths[i].J0, b.paths[i].J0);
    EXPECT_EQ(a.paths[i].Jf, b.paths[i].Jf);
    EXPECT_EQ(a.paths[i].xN, b.paths[i].xN);
    EXPECT_TRUE(std::isfinite(a.paths[i].J0));
    EXPECT_TRUE(std::isfinite(a.paths[i].Jf));
  }
}

TEST(Population, IncentiveModeNeedsFollowerGains) {
  const auto& l = table1_leader();
  SimConfig cfg;
  EXPECT_THROW(simulate_population(l.p, l.gains, nullptr, nullptr, cfg), ValueError);
}

// ---------------------------------------------------------------------------
// Incentive matching measure

TEST(Matching, TeamGainsMatchThemselves) {
  const auto& l = table1_leader();
  FollowerGains fg;
  fg.Gx0bar = l.gains.Theta21;
  fg.Gmbar = l.gains.Theta22;
  fg.Gxi = l.gains.Theta22;
  fg.Gx0 = l.gains.Theta21;
  fg.Gm = l.gains.Theta22;
  EXPECT_EQ(incentive_match(l.gains, fg), 0.0);
  EXPECT_GE(follower_team_gain_scale(l.gains), std::hypot(1.39, 0.0139));
}

// ---------------------------------------------------------------------------
// Sweeps

TEST(Sweep, NoIdiosyncraticNoiseIsDegenerate) {
  const Leader l = leader_for(no_idiosyncratic(table1()));
  SimConfig cfg;
  cfg.n_paths = 4;
  const SweepReport mf = sweep_mean_field_gap(l.p, l.gains, {10, 20, 40}, cfg);
  EXPECT_TRUE(mf.fit.degenerate);
  EXPECT_FALSE(mf.note.empty());
  for (const auto& pt : mf.points) EXPECT_LE(pt.gap, 1e-20);
  const SweepReport og = sweep_optimality_gap(l.p, l.gains, {10, 20, 40}, cfg);
  for (const auto& pt : og.points) EXPECT_LE(pt.gap, 1e-8);
}

TEST(Sweep, MeanFieldGapDecaysLikeOneOverN) {
  const auto& l = table1_leader();
  SimConfig cfg;
  cfg.n_paths = 200;
  const SweepReport mf = sweep_mean_field_gap(l.p, l.gains, {10, 40, 160}, cfg);
  for (std::size_t i = 0; i + 1 < mf.points.size(); ++i) {
    const double ratio = mf.points[i].gap / mf.points[i + 1].gap;
    EXPECT_GE(ratio, 2.5);
    EXPECT_LE(ratio, 6.0);
  }
  EXPECT_NEAR(mf.fit.slope, -1.0, 0.2);
}

TEST(Sweep, CostGapToLimitDecaysLikeOneOverN) {
  const auto& l = table1_leader();
  SimConfig cfg;
  cfg.n_paths = 100;
  const SweepReport og = sweep_optimality_gap(l.p, l.gains, {50, 200, 1000}, cfg);
  for (std::size_t i = 0; i + 1 < og.points.size(); ++i) EXPECT_GT(og.points[i].gap, og.points[i + 1].gap);
  EXPECT_NEAR(og.fit.slope, -1.0, 0.3);
  EXPECT_FALSE(og.note.empty());
}

TEST(Sweep, RejectsBadSizes) {
  EXPECT_THROW(check_sweep_sizes({10, 20}), ValueError);
  EXPECT_THROW(check_sweep_sizes({10, 10, 20}), ValueError);
  EXPECT_THROW(check_sweep_sizes({0, 10, 20}), ValueError);
}
