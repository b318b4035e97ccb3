#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace lqmfg;
using lqmfg::testing::s;
using lqmfg::testing::table1;

namespace {

constexpr double kGammaHatTable1 = 2209.365173;  // bisection at tol 1e-4, threshold 1e8
constexpr double kV0Table1 = 9.13192977841;

const BlockRiccatiSolution& table1_solution() {
  static const ModelParams p = table1();
  static const BlockRiccatiSolution sol = solve_block_riccati(p, p.gamma);
  return sol;
}

}  // namespace

// ---------------------------------------------------------------------------
// Concavity certificate

TEST(Concavity, ZeroWeightsGiveZeroSolution) {
  ModelParams p = table1();
  p.c.Q = s(0.0);
  p.c.G = s(0.0);
  const auto cert = solve_concavity(p, 5.0);
  ASSERT_TRUE(cert.solvable());
  for (std::size_t k = 0; k < cert.K->size(); ++k) EXPECT_EQ((*cert.K)[k].norm(), 0.0);
}

TEST(Concavity, NoDisturbanceMatchesLyapunovIntegration) {
  ModelParams p = table1();
  p.c.E = s(0.0);
  const auto cert = solve_concavity(p, 5.0);
  ASSERT_TRUE(cert.solvable());
  const auto& c = p.c;
  const OdeProblem lyap{MatrixStack{c.G},
                        [&c](double, const MatrixStack& x) {
                          return MatrixStack{-(x[0] * c.A + c.A.transpose() * x[0] + c.C.transpose() * x[0] * c.C + c.Q)};
                        },
                        Direction::backward};
  const OdeSolution ref = integrate(lyap, p.grid());
  ASSERT_FALSE(ref.escaped());
  EXPECT_LE(max_distance(*cert.K, ref.components[0]), 1e-10 * (1.0 + ref.components[0].front().norm()));
}

TEST(Concavity, Table1AtGamma5EscapesAtClosedFormTime) {
  // scalar K' = -(2A + C^2) K - Q - (E^2/(R2 gamma^2)) K^2; blow-up after
  // s* = ln((G - r2)/(G - r1)) / sqrt(disc) time units backward from T
  const ModelParams p = table1();
  const auto cert = solve_concavity(p, 5.0);
  ASSERT_FALSE(cert.solvable());
  const double a = 0.25 / 0.4 / 25.0, b = 2 * 0.3 + 1.0, c = 0.4;
  const double disc = b * b - 4 * a * c;
  const double r1 = (-b + std::sqrt(disc)) / (2 * a), r2 = (-b - std::sqrt(disc)) / (2 * a);
  const double t_star = 10.0 - std::log((1.0 - r2) / (1.0 - r1)) / std::sqrt(disc);
  EXPECT_NEAR(t_star, 7.514, 1e-3);
  const double h = p.grid().h();
  EXPECT_GE(cert.escape->t_escape, t_star - 2 * h);
  EXPECT_LE(cert.escape->t_escape, t_star + h);
}

TEST(Concavity, CertificateIsSymmetricNonnegativeWithSmallResidual) {
  const ModelParams p = lqmfg::testing::random_model(3, 2, 2, 2, 5);
  const auto cert = solve_concavity(p, 5.0);
  ASSERT_TRUE(cert.solvable());
  EXPECT_EQ((*cert.K).back(), p.c.G);
  for (std::size_t k = 0; k < cert.K->size(); ++k) {
    const auto& K = (*cert.K)[k];
    EXPECT_LE((K - K.transpose()).norm(), 1e-9);
    EXPECT_GE(lambda_min(K), -1e-9);
  }
  EXPECT_LE(cert.residual, 1e-6);
}

// ---------------------------------------------------------------------------
// Critical attenuation level

TEST(GammaHat, NoDisturbanceFlagsZero) {
  ModelParams p = table1();
  p.c.E = s(0.0);
  const auto r = estimate_gamma_hat(p, 1e-4);
  EXPECT_TRUE(r.no_escape_found);
  EXPECT_EQ(r.gamma_hat, 0.0);
}

TEST(GammaHat, Table1FrozenBracket) {
  const ModelParams p = table1();
  const auto r = estimate_gamma_hat(p, 1e-4);
  EXPECT_FALSE(r.no_escape_found);
  EXPECT_LE(r.hi - r.lo, 1e-4);
  EXPECT_NEAR(r.gamma_hat, kGammaHatTable1, 1e-4);
  EXPECT_TRUE(solve_concavity(p, r.hi).solvable());
  EXPECT_FALSE(solve_concavity(p, r.lo).solvable());
  EXPECT_TRUE(trace_is_monotone(r.trace));
}

TEST(GammaHat, LargerStateWeightsRaiseTheLevel) {
  // scaled weights push K past 1e8 even without the disturbance term, so both runs
  // use a higher escape threshold
  const EscapePolicy policy{1e12};
  ModelParams p = table1();
  const double base = estimate_gamma_hat(p, 1e-4, policy).gamma_hat;
  p.c.Q *= 100.0;
  p.c.G *= 100.0;
  const auto scaled = estimate_gamma_hat(p, 1e-4, policy);
  EXPECT_GT(scaled.gamma_hat, base);
  EXPECT_TRUE(trace_is_monotone(scaled.trace));
}

TEST(GammaHat, RejectsNonPositiveTolerance) { EXPECT_THROW(estimate_gamma_hat(table1(), 0.0), ValueError); }

TEST(GammaHat, MonotoneTraceCheck) {
  EXPECT_TRUE(trace_is_monotone({{1.0, false}, {4.0, true}, {2.0, false}, {3.0, true}}));
  EXPECT_FALSE(trace_is_monotone({{1.0, true}, {2.0, false}}));
}

// ---------------------------------------------------------------------------
// Block Riccati system

TEST(BlockRiccati, TerminalValuesForTable1) {
  const auto& sol = table1_solution();
  const auto b = sol.at(sol.grid().nodes() - 1);
  EXPECT_DOUBLE_EQ(b.P1(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(b.Pi1(0, 0), -0.01);
  EXPECT_DOUBLE_EQ(b.P2(0, 0), -0.01);
  EXPECT_DOUBLE_EQ(b.Pi2(0, 0), 0.0001);
  const Eigen::MatrixXd PT = sol.P.back();
  EXPECT_DOUBLE_EQ(PT(0, 1), -0.01);
  EXPECT_DOUBLE_EQ(PT(1, 0), -0.01);
}

TEST(BlockRiccati, Table1StructuralIdentities) {
  const ModelParams p = table1();
  const auto& sol = table1_solution();
  EXPECT_LE(sol.max_transpose_gap, 1e-8);
  EXPECT_LE(assembled_form_gap(p, sol), 1e-8);
  for (std::size_t k = 0; k < sol.grid().nodes(); ++k) EXPECT_LE((sol.Pi2[k] - sol.Pi2[k].transpose()).norm(), 1e-8);
  EXPECT_GE(sol.max_condition, 1.0);
}

TEST(BlockRiccati, Table1ResidualConvergesAtSecondOrderInTheMetricGrid) {
  // the central-difference residual carries its own O(h^2) truncation
  ModelParams p = table1();
  const double r1000 = table1_solution().residual;
  p.grid_steps = 2000;
  const double r2000 = solve_block_riccati(p, p.gamma).residual;
  EXPECT_NEAR(r1000 / r2000, 4.0, 0.2);
}

TEST(BlockRiccati, MultiDimensionalIdentities) {
  ModelParams p = lqmfg::testing::random_model(3, 2, 2, 2, 7);
  p.grid_steps = 1000;
  const auto sol = solve_block_riccati(p, p.gamma);
  EXPECT_LE(sol.max_transpose_gap, 1e-8);
  EXPECT_LE(assembled_form_gap(p, sol), 1e-8);
  EXPECT_LE(sol.residual, 1e-6);
  const auto g = leader_gains(sol, p);
  EXPECT_LE(stationarity_residual(sol, g, p), 1e-10);
}

TEST(BlockRiccati, DecoupledLimitMatchesSingleBlockRiccati) {
  ModelParams p = table1();
  p.c.H = s(0.0);
  p.c.Ht = s(0.0);
  p.c.Bt = s(0.0);
  p.c.F = s(0.0);
  p.c.Ft = s(0.0);
  p.c.Gamma1 = s(0.0);
  p.c.Gamma2 = s(0.0);
  const auto sol = solve_block_riccati(p, p.gamma);
  const auto& c = p.c;
  const double g2 = p.gamma * p.gamma;
  const OdeProblem single{MatrixStack{c.G},
                          [&c, g2](double, const MatrixStack& x) {
                            const Eigen::MatrixXd& P = x[0];
                            const Eigen::MatrixXd S = c.R0 + c.D.transpose() * P * c.D;
                            const Eigen::MatrixXd M = c.B.transpose() * P + c.D.transpose() * P * c.C;
                            return MatrixStack{-(P * c.A + c.A.transpose() * P + c.C.transpose() * P * c.C + c.Q +
                                                 P * c.E * c.R2.inverse() * c.E.transpose() * P / g2 -
                                                 M.transpose() * S.inverse() * M)};
                          },
                          Direction::backward};
  const OdeSolution ref = integrate(single, p.grid());
  ASSERT_FALSE(ref.escaped());
  EXPECT_LE(max_distance(sol.P1, ref.components[0]), 1e-10);
  for (std::size_t k = 0; k < sol.grid().nodes(); ++k) {
    EXPECT_EQ(sol.Pi1[k].norm(), 0.0);
    EXPECT_EQ(sol.P2[k].norm(), 0.0);
    EXPECT_EQ(sol.Pi2[k].norm(), 0.0);
  }
}

TEST(BlockRiccati, SmallGammaEscapes) {
  const ModelParams p = table1();
  try {
    solve_block_riccati(p, 0.5);
    FAIL() << "expected an escape";
  } catch (const EscapeError& e) {
    EXPECT_GT(e.escape().t_escape, 0.0);
    EXPECT_GT(e.escape().norm, 1e8);
  }
}

TEST(BlockRiccati, IllConditionedControlWeightIsSingularGain) {
  ModelParams p = lqmfg::testing::random_model(2, 2, 1, 1, 9);
  p.c.D.setZero();
  p.c.R0 = Eigen::Vector2d(1.0, 1e-14).asDiagonal();
  EXPECT_THROW(solve_block_riccati(p, p.gamma), SingularGain);
}

// ---------------------------------------------------------------------------
// Gains and value

TEST(LeaderGains, Table1TerminalGain) {
  const ModelParams p = table1();
  const auto g = leader_gains(table1_solution(), p);
  EXPECT_NEAR(g.Theta21.back()(0, 0), -1.39, 1e-14);
  EXPECT_NEAR(g.Theta22.back()(0, 0), 0.0139, 1e-15);
  // -(R0 + D^2 P1)^-1 (B P1 + Ht P2 + D P1 C) at T
  EXPECT_NEAR(g.Theta11.back()(0, 0), -(0.5 - 0.002 + 0.5) / 0.85, 1e-14);
}

TEST(LeaderGains, ReproduceDefiningFormulas) {
  const ModelParams p = table1();
  const auto& sol = table1_solution();
  const auto g = leader_gains(sol, p);
  const auto& c = p.c;
  for (std::size_t k = 0; k < sol.grid().nodes(); k += 97) {
    const auto b = sol.at(k);
    const Eigen::MatrixXd S = c.R0 + c.D.transpose() * b.P1 * c.D;
    EXPECT_LE((g.Theta11[k] + S.inverse() * (c.B.transpose() * b.P1 + c.Ht.transpose() * b.P2 + c.D.transpose() * b.P1 * c.C))
                  .norm(),
              1e-12);
    EXPECT_LE((g.V2[k] - c.R2.inverse() * c.E.transpose() * b.Pi1 / 25.0).norm(), 1e-12);
  }
}

TEST(LeaderGains, NoDiffusionControlGain) {
  ModelParams p = table1();
  p.c.D = s(0.0);
  const auto sol = solve_block_riccati(p, p.gamma);
  const auto g = leader_gains(sol, p);
  for (std::size_t k = 0; k < sol.grid().nodes(); k += 50) {
    const double expect = -(0.5 * sol.P1[k](0, 0) + 0.2 * sol.P2[k](0, 0)) / 0.6;
    EXPECT_NEAR(g.Theta11[k](0, 0), expect, 1e-12 * (1.0 + std::abs(expect)));
  }
}

TEST(LeaderGains, NoDisturbanceGivesZeroDisturbanceGain) {
  ModelParams p = table1();
  p.c.E = s(0.0);
  const auto sol = solve_block_riccati(p, p.gamma);
  const auto g = leader_gains(sol, p);
  for (std::size_t k = 0; k < sol.grid().nodes(); ++k) {
    EXPECT_EQ(g.V1[k].norm(), 0.0);
    EXPECT_EQ(g.V2[k].norm(), 0.0);
  }
}

TEST(LeaderGains, Table1Stationarity) {
  const ModelParams p = table1();
  const auto& sol = table1_solution();
  EXPECT_LE(stationarity_residual(sol, leader_gains(sol, p), p), 1e-10);
}

TEST(LeaderValue, Table1Frozen) { EXPECT_NEAR(leader_value(table1_solution(), table1()), kV0Table1, 1e-9); }

TEST(LeaderValue, ZeroInitialStatesGiveZero) {
  ModelParams p = table1();
  p.xi.setZero();
  p.x0init.setZero();
  EXPECT_EQ(leader_value(solve_block_riccati(p, p.gamma), p), 0.0);
}

TEST(LeaderValue, ZeroLeaderWeightsGiveZeroSolution) {
  ModelParams p = table1();
  p.c.Q = s(0.0);
  p.c.G = s(0.0);
  const auto sol = solve_block_riccati(p, p.gamma);
  for (std::size_t k = 0; k < sol.grid().nodes(); ++k) EXPECT_EQ(sol.P[k].norm(), 0.0);
  EXPECT_EQ(leader_value(sol, p), 0.0);
}
