#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <initializer_list>
#include <utility>
#include <string>
#include <vector>

#include "lqmfg/errors.hpp"
#include "lqmfg/linalg.hpp"
#include "lqmfg/trajectory.hpp"

namespace lqmfg {

struct Dimensions {
  int n = 1;   // state
  int mL = 1;  // leader control per follower
  int mF = 1;  // follower control
  int nv = 1;  // disturbance

  friend bool operator==(const Dimensions&, const Dimensions&) = default;
};

/// Every coefficient of the leader/follower dynamics and costs. Names ending in `t`
/// are the follower-side (tilde) quantities.
struct Coefficients {
  // leader dynamics
  Eigen::MatrixXd A, B, F, H, E, C, D;
  // follower dynamics
  Eigen::MatrixXd At, Bt, Ft, Ht, Sigma;
  // leader cost
  Eigen::MatrixXd Q, Gamma1, R0, R1, R2, Gamma2, G;
  // follower cost
  Eigen::MatrixXd Qt, Gamma1t, R0t, R1t, Gamma2t, Gt;

  friend bool operator==(const Coefficients&, const Coefficients&) = default;
};

struct ModelParams {
  Dimensions dims;
  Coefficients c;
  Eigen::VectorXd xi;      // leader initial state
  Eigen::VectorXd x0init;  // common follower initial state
  double T = 1.0;
  double gamma = 1.0;
  int grid_steps = 1000;
  double positivity_delta = 1e-10;

  /// Coefficient evaluator. Coefficients are constant in time; solvers go through
  /// this accessor so time-varying extensions do not touch them.
  const Coefficients& coeff(double /*t*/) const { return c; }

  TimeGrid grid() const { return TimeGrid(T, grid_steps); }

  /// Throws DimensionError on any shape inconsistency, ValueError on non-finite or
  /// out-of-range scalars.
  void check_well_formed() const;

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    return a.dims == b.dims && a.c == b.c && a.xi == b.xi && a.x0init == b.x0init && a.T == b.T &&
           a.gamma == b.gamma && a.grid_steps == b.grid_steps && a.positivity_delta == b.positivity_delta;
  }
};

namespace detail {

inline void expect_shape(const Eigen::MatrixXd& m, Eigen::Index r, Eigen::Index c, const char* name) {
  if (m.rows() != r || m.cols() != c) {
    throw DimensionError(std::string(name) + ": expected " + std::to_string(r) + "x" + std::to_string(c) + ", got " +
                         std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  }
  if (!m.allFinite()) throw ValueError(std::string(name) + ": non-finite entry");
}

}  // namespace detail

inline void ModelParams::check_well_formed() const {
  const auto [n, mL, mF, nv] = dims;
  if (n < 1 || mL < 1 || mF < 1 || nv < 1) throw DimensionError("dimensions must be positive");
  using detail::expect_shape;
  expect_shape(c.A, n, n, "A");
  expect_shape(c.F, n, n, "F");
  expect_shape(c.C, n, n, "C");
  expect_shape(c.B, n, mL, "B");
  expect_shape(c.D, n, mL, "D");
  expect_shape(c.H, n, mF, "H");
  expect_shape(c.E, n, nv, "E");
  expect_shape(c.At, n, n, "At");
  expect_shape(c.Ft, n, n, "Ft");
  expect_shape(c.Sigma, n, n, "Sigma");
  expect_shape(c.Bt, n, mF, "Bt");
  expect_shape(c.Ht, n, mL, "Ht");
  expect_shape(c.Q, n, n, "Q");
  expect_shape(c.Gamma1, n, n, "Gamma1");
  expect_shape(c.R0, mL, mL, "R0");
  expect_shape(c.R1, mF, mF, "R1");
  expect_shape(c.R2, nv, nv, "R2");
  expect_shape(c.Gamma2, n, n, "Gamma2");
  expect_shape(c.G, n, n, "G");
  expect_shape(c.Qt, n, n, "Qt");
  expect_shape(c.Gamma1t, n, n, "Gamma1t");
  expect_shape(c.R0t, mL, mL, "R0t");
  expect_shape(c.R1t, mF, mF, "R1t");
  expect_shape(c.Gamma2t, n, n, "Gamma2t");
  expect_shape(c.Gt, n, n, "Gt");
  expect_shape(xi, n, 1, "xi");
  expect_shape(x0init, n, 1, "x");
  if (!(T > 0.0) || !std::isfinite(T)) throw ValueError("horizon must be finite and > 0");
  if (!(gamma > 0.0) || !std::isfinite(gamma)) throw ValueError("gamma must be finite and > 0");
  if (grid_steps < 2) throw ValueError("grid_steps must be >= 2");
  if (!(positivity_delta > 0.0)) throw ValueError("positivity_delta must be > 0");
}

// ---------------------------------------------------------------------------
// Standing assumptions

struct AssumptionCheck {
  std::string assumption;  // "A1".."A4"
  std::string check;       // e.g. "lambda_min(R2) >= delta"
  double margin = 0.0;     // >= 0 iff passed (for thresholds the margin is the raw value)
  bool passed = false;
};

struct ValidationReport {
  std::vector<AssumptionCheck> checks;

  bool all_passed() const {
    for (const auto& c : checks)
      if (!c.passed) return false;
    return true;
  }
  const AssumptionCheck* find(const std::string& check) const {
    for (const auto& c : checks)
      if (c.check == check) return &c;
    return nullptr;
  }
};

inline constexpr double kSymmetryTolerance = 1e-12;

/// Numerical check of (A1)-(A4). Pure; failures are report entries.
inline ValidationReport validate_assumptions(const ModelParams& p) {
  ValidationReport report;
  const Coefficients& c = p.c;
  auto add = [&](const char* a, std::string check, double margin, bool ok) {
    report.checks.push_back({a, std::move(check), margin, ok});
  };

  // A1: bounded (finite) dynamics coefficients.
  using Named = std::pair<const char*, const Eigen::MatrixXd*>;
  for (auto [name, m] : std::initializer_list<Named>{{"A", &c.A}, {"F", &c.F}, {"C", &c.C}, {"At", &c.At},
                                                     {"Ft", &c.Ft}, {"Sigma", &c.Sigma}, {"B", &c.B}, {"D", &c.D},
                                                     {"Ht", &c.Ht}, {"H", &c.H}, {"Bt", &c.Bt}, {"E", &c.E}}) {
    add("A1", std::string("finite(") + name + ")", 0.0, m->allFinite());
  }

  // A2: symmetric weights.
  for (auto [name, m] : std::initializer_list<Named>{{"Q", &c.Q}, {"Gamma1", &c.Gamma1}, {"Qt", &c.Qt},
                                                     {"Gamma1t", &c.Gamma1t}, {"R0", &c.R0}, {"R0t", &c.R0t},
                                                     {"R1", &c.R1}, {"R1t", &c.R1t}, {"R2", &c.R2},
                                                     {"Gamma2", &c.Gamma2}, {"G", &c.G}, {"Gamma2t", &c.Gamma2t},
                                                     {"Gt", &c.Gt}}) {
    const double asym = m->size() ? (*m - m->transpose()).cwiseAbs().maxCoeff() : 0.0;
    add("A2", std::string("symmetric(") + name + ")", kSymmetryTolerance - asym, asym <= kSymmetryTolerance);
  }

  const double delta = p.positivity_delta;
  auto psd = [&](const char* a, const char* name, const Eigen::MatrixXd& m) {
    const double lm = lambda_min(m);
    add(a, std::string("lambda_min(") + name + ") >= 0", lm, lm >= 0.0);
  };
  auto pd = [&](const char* a, const char* name, const Eigen::MatrixXd& m) {
    const double lm = lambda_min(m);
    add(a, std::string("lambda_min(") + name + ") >= delta", lm, lm >= delta);
  };

  psd("A3", "Q", c.Q);
  psd("A3", "G", c.G);
  pd("A3", "R0", c.R0);
  pd("A3", "R1", c.R1);
  pd("A3", "R2", c.R2);

  psd("A4", "Qt", c.Qt);
  psd("A4", "Gt", c.Gt);
  pd("A4", "R0t", c.R0t);
  pd("A4", "R1t", c.R1t);
  return report;
}

}  // namespace lqmfg
