#pragma once

#include <Eigen/Dense>

#include <string>

#include "lqmfg/lqmfg.hpp"

namespace lqmfg::testing {

inline ModelParams table1() { return load_config(LQMFG_TABLE1_CONFIG); }

/// The reference config with F=0, Gamma1=Gamma2=0 and unit follower tracking weights: the
/// consistency system has an exact finite incentive matrix.
inline ModelParams exact_incentive_fixture() {
  ModelParams p = table1();
  p.c.F.setZero();
  p.c.Gamma1.setZero();
  p.c.Gamma2.setZero();
  p.c.Gamma1t.setIdentity();
  p.c.Gamma2t.setIdentity();
  return p;
}

inline Eigen::MatrixXd s(double v) { return Eigen::MatrixXd::Constant(1, 1, v); }

/// Random well-posed model of the given dimensions (PSD/PD weights).
inline ModelParams random_model(int n, int mL, int mF, int nv, unsigned seed) {
  std::srand(seed);
  auto r = [](Eigen::Index a, Eigen::Index b) { return Eigen::MatrixXd(0.3 * Eigen::MatrixXd::Random(a, b)); };
  auto spd = [&](Eigen::Index a, double floor) {
    const Eigen::MatrixXd M = Eigen::MatrixXd::Random(a, a);
    return Eigen::MatrixXd(0.2 * M * M.transpose() + floor * Eigen::MatrixXd::Identity(a, a));
  };
  ModelParams p;
  p.dims = {n, mL, mF, nv};
  auto& c = p.c;
  c.A = r(n, n);
  c.B = r(n, mL);
  c.F = r(n, n);
  c.H = r(n, mF);
  c.E = r(n, nv);
  c.C = r(n, n);
  c.D = r(n, mL);
  c.At = r(n, n);
  c.Bt = r(n, mF);
  c.Ft = r(n, n);
  c.Ht = r(n, mL);
  c.Sigma = r(n, n);
  c.Q = spd(n, 0.1);
  c.Gamma1 = Eigen::MatrixXd::Identity(n, n);
  c.R0 = spd(mL, 0.5);
  c.R1 = spd(mF, 0.5);
  c.R2 = spd(nv, 0.5);
  c.Gamma2 = 0.1 * Eigen::MatrixXd::Identity(n, n);
  c.G = spd(n, 0.5);
  c.Qt = spd(n, 0.1);
  c.Gamma1t = Eigen::MatrixXd::Identity(n, n);
  c.R0t = spd(mL, 0.5);
  c.R1t = spd(mF, 0.5);
  c.Gamma2t = Eigen::MatrixXd::Identity(n, n);
  c.Gt = spd(n, 0.1);
  p.xi = Eigen::VectorXd::Ones(n);
  p.x0init = Eigen::VectorXd::Ones(n);
  p.T = 1.0;
  p.gamma = 5.0;
  p.grid_steps = 200;
  p.check_well_formed();
  return p;
}

inline double max_gap(const MatrixTrajectory& a, const MatrixTrajectory& b) {
  double g = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) g = std::max(g, (a[k] - b[k]).norm());
  return g;
}

}  // namespace lqmfg::testing
