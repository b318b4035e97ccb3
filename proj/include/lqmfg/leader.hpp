#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "lqmfg/errors.hpp"
#include "lqmfg/linalg.hpp"
#include "lqmfg/model.hpp"
#include "lqmfg/odeint.hpp"
#include "lqmfg/trajectory.hpp"

namespace lqmfg {

// ---------------------------------------------------------------------------
// Concavity Riccati equation and the critical attenuation level

/// dK/dt for K' + KA + A'K + C'KC + Q + g^-2 K E R2^-1 E' K = 0.
inline Eigen::MatrixXd concavity_rhs(const Coefficients& c, double gamma, const Eigen::MatrixXd& K) {
  const Eigen::MatrixXd ee = c.E * CheckedLu(c.R2, "R2").solve(c.E.transpose()) / (gamma * gamma);
  return -(K * c.A + c.A.transpose() * K + c.C.transpose() * K * c.C + c.Q + K * ee * K);
}

struct Symmetrize {
  void operator()(MatrixStack& x) const {
    for (auto& m : x) m = symmetrized(m);
  }
};

inline auto concavity_problem(const ModelParams& p, double gamma) {
  if (!(gamma > 0.0)) throw ValueError("gamma must be > 0");
  auto rhs = [&p, gamma](double t, const MatrixStack& x) -> MatrixStack {
    return {concavity_rhs(p.coeff(t), gamma, x[0])};
  };
  return OdeProblem<decltype(rhs), Symmetrize>{{p.c.G}, rhs, Direction::backward, Symmetrize{}};
}

struct ConcavityCertificate {
  double gamma = 0.0;
  std::optional<MatrixTrajectory> K;
  std::optional<Escape> escape;
  double residual = std::numeric_limits<double>::quiet_NaN();

  bool solvable() const { return K.has_value(); }
};

inline ConcavityCertificate solve_concavity(const ModelParams& p, double gamma, const EscapePolicy& policy = {}) {
  const auto problem = concavity_problem(p, gamma);
  OdeSolution sol = integrate(problem, p.grid(), policy);
  ConcavityCertificate cert;
  cert.gamma = gamma;
  if (sol.escaped()) {
    cert.escape = sol.escape;
    return cert;
  }
  cert.residual = residual(sol.components, problem);
  cert.K = std::move(sol.components.front());
  return cert;
}

struct GammaTrial {
  double gamma = 0.0;
  bool solvable = false;
  double t_escape = std::numeric_limits<double>::quiet_NaN();
};

struct GammaHatResult {
  double gamma_hat = 0.0;  // 0 flags "solvable for every tested gamma"
  double lo = 0.0;         // escaped (0 when flagged)
  double hi = 0.0;         // solvable
  bool no_escape_found = false;
  std::vector<GammaTrial> trace;
};

inline constexpr double kGammaCap = 1e6;
inline constexpr double kGammaFloor = 1e-6;

/// Bisection for the smallest gamma at which the concavity equation has no escape.
/// Brackets by doubling / halving from 1.
inline GammaHatResult estimate_gamma_hat(const ModelParams& p, double bracket_tol, const EscapePolicy& policy = {}) {
  if (!(bracket_tol > 0.0)) throw ValueError("bracket_tol must be > 0");
  GammaHatResult out;
  auto probe = [&](double g) {
    const ConcavityCertificate c = solve_concavity(p, g, policy);
    out.trace.push_back({g, c.solvable(), c.escape ? c.escape->t_escape : std::numeric_limits<double>::quiet_NaN()});
    return c.solvable();
  };

  double lo = 0.0, hi = 0.0;
  if (probe(1.0)) {
    hi = 1.0;
    double g = 0.5;
    while (true) {
      if (g < kGammaFloor) {
        out.no_escape_found = true;
        out.gamma_hat = 0.0;
        out.lo = 0.0;
        out.hi = hi;
        return out;
      }
      if (!probe(g)) {
        lo = g;
        break;
      }
      hi = g;
      g *= 0.5;
    }
  } else {
    lo = 1.0;
    double g = 2.0;
    while (true) {
      if (g > kGammaCap) throw NotSolvableAtCap("concavity equation escapes for every gamma up to 1e6");
      if (probe(g)) {
        hi = g;
        break;
      }
      lo = g;
      g *= 2.0;
    }
  }
  while (hi - lo > bracket_tol) {
    const double mid = 0.5 * (lo + hi);
    (probe(mid) ? hi : lo) = mid;
  }
  out.lo = lo;
  out.hi = hi;
  out.gamma_hat = hi;
  return out;
}

/// True when no solvable gamma in the trace lies below an escaped one.
inline bool trace_is_monotone(const std::vector<GammaTrial>& trace) {
  double lowest_solvable = std::numeric_limits<double>::infinity();
  for (const auto& t : trace)
    if (t.solvable) lowest_solvable = std::min(lowest_solvable, t.gamma);
  for (const auto& t : trace)
    if (!t.solvable && t.gamma >= lowest_solvable) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Block Riccati system

struct PBlocks {
  Eigen::MatrixXd P1, Pi1, P2, Pi2;
};

/// Forward-time derivatives of the four coupled block equations.
inline PBlocks block_riccati_rhs(const Coefficients& c, double gamma, const PBlocks& s) {
  const Eigen::MatrixXd AF = c.At + c.Ft;
  const Eigen::MatrixXd ee = c.E * CheckedLu(c.R2, "R2").solve(c.E.transpose()) / (gamma * gamma);
  const CheckedLu s0(c.R0 + c.D.transpose() * s.P1 * c.D, "R0 + D'P1D");
  const CheckedLu r1(c.R1, "R1");

  const Eigen::MatrixXd M1 = c.B.transpose() * s.P1 + c.Ht.transpose() * s.P2 + c.D.transpose() * s.P1 * c.C;
  const Eigen::MatrixXd M2 = c.B.transpose() * s.Pi1 + c.Ht.transpose() * s.Pi2;
  const Eigen::MatrixXd N1 = c.H.transpose() * s.P1 + c.Bt.transpose() * s.P2;
  const Eigen::MatrixXd N2 = c.H.transpose() * s.Pi1 + c.Bt.transpose() * s.Pi2;
  const Eigen::MatrixXd S0M1 = s0.solve(M1), S0M2 = s0.solve(M2);
  const Eigen::MatrixXd R1N1 = r1.solve(N1), R1N2 = r1.solve(N2);

  const Eigen::MatrixXd L1 = s.P1 * c.B + s.Pi1 * c.Ht + c.C.transpose() * s.P1 * c.D;
  const Eigen::MatrixXd L2 = s.P1 * c.H + s.Pi1 * c.Bt;
  const Eigen::MatrixXd K1 = s.P2 * c.B + s.Pi2 * c.Ht;
  const Eigen::MatrixXd K2 = s.P2 * c.H + s.Pi2 * c.Bt;

  PBlocks d;
  d.P1 = -(s.P1 * c.A + c.A.transpose() * s.P1 + c.C.transpose() * s.P1 * c.C + c.Q + s.P1 * ee * s.P1 - L1 * S0M1 -
           L2 * R1N1);
  d.Pi1 = -(s.Pi1 * AF + c.A.transpose() * s.Pi1 + s.P1 * c.F - c.Q * c.Gamma1 + s.P1 * ee * s.Pi1 - L1 * S0M2 -
            L2 * R1N2);
  d.P2 = -(s.P2 * c.A + AF.transpose() * s.P2 + c.F.transpose() * s.P1 - c.Gamma1.transpose() * c.Q +
           s.P2 * ee * s.P1 - K1 * S0M1 - K2 * R1N1);
  d.Pi2 = -(s.Pi2 * AF + AF.transpose() * s.Pi2 + s.P2 * c.F + c.F.transpose() * s.Pi1 +
            c.Gamma1.transpose() * c.Q * c.Gamma1 + s.P2 * ee * s.Pi1 - K1 * S0M2 - K2 * R1N2);
  return d;
}

inline PBlocks terminal_blocks(const Coefficients& c) {
  return {c.G, -c.G * c.Gamma2, -c.Gamma2.transpose() * c.G, c.Gamma2.transpose() * c.G * c.Gamma2};
}

inline auto block_riccati_problem(const ModelParams& p, double gamma) {
  if (!(gamma > 0.0)) throw ValueError("gamma must be > 0");
  auto rhs = [&p, gamma](double t, const MatrixStack& x) -> MatrixStack {
    const PBlocks d = block_riccati_rhs(p.coeff(t), gamma, {x[0], x[1], x[2], x[3]});
    return {d.P1, d.Pi1, d.P2, d.Pi2};
  };
  const PBlocks tb = terminal_blocks(p.c);
  return OdeProblem<decltype(rhs)>{{tb.P1, tb.Pi1, tb.P2, tb.Pi2}, rhs, Direction::backward};
}

/// Barred 2n-dimensional coefficients of the assembled equation.
struct AssembledCoefficients {
  Eigen::MatrixXd A, B, C, D, Q, R, G, E, R2;
};

inline AssembledCoefficients assemble(const Coefficients& c) {
  const Eigen::Index n = c.A.rows(), mL = c.B.cols(), mF = c.H.cols(), nv = c.E.cols();
  AssembledCoefficients a;
  a.A = Eigen::MatrixXd::Zero(2 * n, 2 * n);
  a.A << c.A, c.F, Eigen::MatrixXd::Zero(n, n), c.At + c.Ft;
  a.B.resize(2 * n, mL + mF);
  a.B << c.B, c.H, c.Ht, c.Bt;
  a.C = Eigen::MatrixXd::Zero(2 * n, 2 * n);
  a.C.topLeftCorner(n, n) = c.C;
  a.D = Eigen::MatrixXd::Zero(2 * n, mL + mF);
  a.D.topLeftCorner(n, mL) = c.D;
  a.Q.resize(2 * n, 2 * n);
  a.Q << c.Q, -c.Q * c.Gamma1, -c.Gamma1.transpose() * c.Q, c.Gamma1.transpose() * c.Q * c.Gamma1;
  a.R = Eigen::MatrixXd::Zero(mL + mF, mL + mF);
  a.R.topLeftCorner(mL, mL) = c.R0;
  a.R.bottomRightCorner(mF, mF) = c.R1;
  a.G.resize(2 * n, 2 * n);
  a.G << c.G, -c.G * c.Gamma2, -c.Gamma2.transpose() * c.G, c.Gamma2.transpose() * c.G * c.Gamma2;
  a.E = Eigen::MatrixXd::Zero(2 * n, nv);
  a.E.topRows(n) = c.E;
  a.R2 = c.R2;
  return a;
}

inline Eigen::MatrixXd assembled_rhs(const AssembledCoefficients& a, double gamma, const Eigen::MatrixXd& P) {
  const Eigen::MatrixXd ee = a.E * CheckedLu(a.R2, "R2").solve(a.E.transpose()) / (gamma * gamma);
  const Eigen::MatrixXd S = a.R + a.D.transpose() * P * a.D;
  const Eigen::MatrixXd L = P * a.B + a.C.transpose() * P * a.D;
  const Eigen::MatrixXd Rt = a.B.transpose() * P + a.D.transpose() * P * a.C;
  return -(P * a.A + a.A.transpose() * P + a.C.transpose() * P * a.C + a.Q + P * ee * P -
           L * CheckedLu(S, "R + D'PD").solve(Rt));
}

inline auto assembled_problem(const ModelParams& p, double gamma) {
  const AssembledCoefficients a = assemble(p.c);
  auto rhs = [a, gamma](double, const MatrixStack& x) -> MatrixStack { return {assembled_rhs(a, gamma, x[0])}; };
  return OdeProblem<decltype(rhs)>{{a.G}, rhs, Direction::backward};
}

inline Eigen::MatrixXd assemble_blocks(const PBlocks& b) {
  const Eigen::Index n = b.P1.rows();
  Eigen::MatrixXd P(2 * n, 2 * n);
  P << b.P1, b.Pi1, b.P2, b.Pi2;
  return P;
}

struct BlockRiccatiSolution {
  double gamma = 0.0;
  MatrixTrajectory P1, Pi1, P2, Pi2;
  MatrixTrajectory P;                       // assembled [[P1, Pi1], [P2, Pi2]]
  MatrixTrajectory dP1, dPi1, dP2, dPi2;    // forward-time derivatives at the nodes
  double residual = 0.0;
  double max_condition = 0.0;               // of R0 + D'P1D over the grid
  double max_transpose_gap = 0.0;           // max_t ||Pi1' - P2|| / (1 + ||P2||)

  const TimeGrid& grid() const { return P1.grid(); }
  PBlocks at(std::size_t k) const { return {P1[k], Pi1[k], P2[k], Pi2[k]}; }

  /// Cubic Hermite value at t_k + h/2 from node values and derivatives.
  PBlocks midpoint(std::size_t k) const {
    const double h8 = grid().h() / 8.0;
    auto mid = [&](const MatrixTrajectory& x, const MatrixTrajectory& d) -> Eigen::MatrixXd {
      return 0.5 * (x[k] + x[k + 1]) + h8 * (d[k] - d[k + 1]);
    };
    return {mid(P1, dP1), mid(Pi1, dPi1), mid(P2, dP2), mid(Pi2, dPi2)};
  }
};

inline constexpr double kTransposeCouplingTol = 1e-8;

/// Backward RK4 of the four block equations. Throws EscapeError when the system
/// escapes and SingularGain when R0 + D'P1D is ill-conditioned at any node.
inline BlockRiccatiSolution solve_block_riccati(const ModelParams& p, double gamma, const EscapePolicy& policy = {}) {
  const auto problem = block_riccati_problem(p, gamma);
  const TimeGrid grid = p.grid();
  OdeSolution sol = integrate(problem, grid, policy);
  if (sol.escaped()) throw EscapeError("block Riccati equation", *sol.escape);

  BlockRiccatiSolution out;
  out.gamma = gamma;
  out.residual = residual(sol.components, problem);
  out.P1 = std::move(sol.components[0]);
  out.Pi1 = std::move(sol.components[1]);
  out.P2 = std::move(sol.components[2]);
  out.Pi2 = std::move(sol.components[3]);

  const std::size_t nodes = grid.nodes();
  std::vector<Eigen::MatrixXd> P(nodes), d1(nodes), d2(nodes), d3(nodes), d4(nodes);
  for (std::size_t k = 0; k < nodes; ++k) {
    const PBlocks b = out.at(k);
    P[k] = assemble_blocks(b);
    const Coefficients& c = p.coeff(grid.t(k));
    const CheckedLu s0(c.R0 + c.D.transpose() * b.P1 * c.D, "R0 + D'P1D");
    out.max_condition = std::max(out.max_condition, s0.condition());
    const PBlocks d = block_riccati_rhs(c, gamma, b);
    d1[k] = d.P1;
    d2[k] = d.Pi1;
    d3[k] = d.P2;
    d4[k] = d.Pi2;
    out.max_transpose_gap =
        std::max(out.max_transpose_gap, (b.Pi1.transpose() - b.P2).norm() / (1.0 + b.P2.norm()));
  }
  out.P = MatrixTrajectory(grid, std::move(P));
  out.dP1 = MatrixTrajectory(grid, std::move(d1));
  out.dPi1 = MatrixTrajectory(grid, std::move(d2));
  out.dP2 = MatrixTrajectory(grid, std::move(d3));
  out.dPi2 = MatrixTrajectory(grid, std::move(d4));
  return out;
}

/// Integrates the assembled 2n form on the same grid; max_k ||P_k - P_assembled_k||.
inline double assembled_form_gap(const ModelParams& p, const BlockRiccatiSolution& sol,
                                 const EscapePolicy& policy = {}) {
  OdeSolution full = integrate(assembled_problem(p, sol.gamma), sol.grid(), policy);
  if (full.escaped()) throw EscapeError("assembled Riccati equation", *full.escape);
  return max_distance(full.components.front(), sol.P);
}

// ---------------------------------------------------------------------------
// Gains, value, stationarity

struct GainSet {
  Eigen::MatrixXd Theta11, Theta12, Theta21, Theta22, V1, V2;
};

inline GainSet gains_at(const Coefficients& c, double gamma, const PBlocks& b) {
  const CheckedLu s0(c.R0 + c.D.transpose() * b.P1 * c.D, "R0 + D'P1D");
  const CheckedLu r1(c.R1, "R1");
  const CheckedLu r2(c.R2, "R2");
  GainSet g;
  g.Theta11 = -s0.solve(c.B.transpose() * b.P1 + c.Ht.transpose() * b.P2 + c.D.transpose() * b.P1 * c.C);
  g.Theta12 = -s0.solve(c.B.transpose() * b.Pi1 + c.Ht.transpose() * b.Pi2);
  g.Theta21 = -r1.solve(c.H.transpose() * b.P1 + c.Bt.transpose() * b.P2);
  g.Theta22 = -r1.solve(c.H.transpose() * b.Pi1 + c.Bt.transpose() * b.Pi2);
  g.V1 = r2.solve(c.E.transpose() * b.P1) / (gamma * gamma);
  g.V2 = r2.solve(c.E.transpose() * b.Pi1) / (gamma * gamma);
  return g;
}

struct LeaderGains {
  double gamma = 0.0;
  MatrixTrajectory Theta11, Theta12, Theta21, Theta22;
  MatrixTrajectory V1, V2;  // disturbance gains on x0 and m

  const TimeGrid& grid() const { return Theta11.grid(); }
  GainSet at(std::size_t k) const {
    return {Theta11[k], Theta12[k], Theta21[k], Theta22[k], V1[k], V2[k]};
  }
};

inline LeaderGains leader_gains(const BlockRiccatiSolution& sol, const ModelParams& p) {
  const TimeGrid& grid = sol.grid();
  const std::size_t nodes = grid.nodes();
  std::vector<Eigen::MatrixXd> t11(nodes), t12(nodes), t21(nodes), t22(nodes), v1(nodes), v2(nodes);
  for (std::size_t k = 0; k < nodes; ++k) {
    GainSet g = gains_at(p.coeff(grid.t(k)), sol.gamma, sol.at(k));
    t11[k] = std::move(g.Theta11);
    t12[k] = std::move(g.Theta12);
    t21[k] = std::move(g.Theta21);
    t22[k] = std::move(g.Theta22);
    v1[k] = std::move(g.V1);
    v2[k] = std::move(g.V2);
  }
  LeaderGains out;
  out.gamma = sol.gamma;
  out.Theta11 = MatrixTrajectory(grid, std::move(t11));
  out.Theta12 = MatrixTrajectory(grid, std::move(t12));
  out.Theta21 = MatrixTrajectory(grid, std::move(t21));
  out.Theta22 = MatrixTrajectory(grid, std::move(t22));
  out.V1 = MatrixTrajectory(grid, std::move(v1));
  out.V2 = MatrixTrajectory(grid, std::move(v2));
  return out;
}

/// <P1(0) xi, xi> + <(Pi1(0) + P2(0)') x, xi> + <Pi2(0) x, x>
inline double leader_value(const BlockRiccatiSolution& sol, const ModelParams& p) {
  const Eigen::VectorXd& xi = p.xi;
  const Eigen::VectorXd& x = p.x0init;
  return xi.dot(sol.P1[0] * xi) + xi.dot((sol.Pi1[0] + sol.P2[0].transpose()) * x) + x.dot(sol.Pi2[0] * x);
}

/// Gain-level residual of the three stationarity conditions (coefficients of x0 and m
/// in each line); returns the max Frobenius norm over nodes and lines.
inline double stationarity_residual(const BlockRiccatiSolution& sol, const LeaderGains& g, const ModelParams& p) {
  const TimeGrid& grid = sol.grid();
  double worst = 0.0;
  for (std::size_t k = 0; k < grid.nodes(); ++k) {
    const Coefficients& c = p.coeff(grid.t(k));
    const PBlocks b = sol.at(k);
    const GainSet s = g.at(k);
    const double g2 = g.gamma * g.gamma;
    const Eigen::MatrixXd r[6] = {
        c.B.transpose() * b.P1 + c.D.transpose() * b.P1 * (c.C + c.D * s.Theta11) + c.Ht.transpose() * b.P2 +
            c.R0 * s.Theta11,
        c.B.transpose() * b.Pi1 + c.D.transpose() * b.P1 * c.D * s.Theta12 + c.Ht.transpose() * b.Pi2 +
            c.R0 * s.Theta12,
        c.H.transpose() * b.P1 + c.Bt.transpose() * b.P2 + c.R1 * s.Theta21,
        c.H.transpose() * b.Pi1 + c.Bt.transpose() * b.Pi2 + c.R1 * s.Theta22,
        c.E.transpose() * b.P1 - g2 * c.R2 * s.V1,
        c.E.transpose() * b.Pi1 - g2 * c.R2 * s.V2,
    };
    for (const auto& m : r) worst = std::max(worst, m.norm());
  }
  return worst;
}

}  // namespace lqmfg
