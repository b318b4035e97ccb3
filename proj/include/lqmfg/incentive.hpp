#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "lqmfg/errors.hpp"
#include "lqmfg/leader.hpp"
#include "lqmfg/linalg.hpp"
#include "lqmfg/model.hpp"
#include "lqmfg/odeint.hpp"
#include "lqmfg/trajectory.hpp"

namespace lqmfg {

// ---------------------------------------------------------------------------
// Nodewise formulas

struct ZetaEta {
  Eigen::MatrixXd zeta, eta;
};

/// zeta = Theta11 + L R1^-1 (H'P1 + Bt'P2), eta = Theta12 + L R1^-1 (H'Pi1 + Bt'Pi2)
inline ZetaEta zeta_eta(const Coefficients& c, const Eigen::MatrixXd& L, const PBlocks& b) {
  const CheckedLu s0(c.R0 + c.D.transpose() * b.P1 * c.D, "R0 + D'P1D");
  const CheckedLu r1(c.R1, "R1");
  ZetaEta z;
  z.zeta = -s0.solve(c.B.transpose() * b.P1 + c.Ht.transpose() * b.P2 + c.D.transpose() * b.P1 * c.C) +
           L * r1.solve(c.H.transpose() * b.P1 + c.Bt.transpose() * b.P2);
  z.eta = -s0.solve(c.B.transpose() * b.Pi1 + c.Ht.transpose() * b.Pi2) +
          L * r1.solve(c.H.transpose() * b.Pi1 + c.Bt.transpose() * b.Pi2);
  return z;
}

/// Coefficients of the consistency system for a given incentive matrix.
struct CCCoefficients {
  Eigen::MatrixXd A1h, B1h, H1h, A2h, B2h, H2h, A3h, B3h, H3h;
};

/// (Rt1 + L'Rt0 L)^-1
inline Eigen::MatrixXd follower_weight_inverse(const Coefficients& c, const Eigen::MatrixXd& L) {
  return CheckedLu(c.R1t + L.transpose() * c.R0t * L, "Rt1 + L'Rt0L").inverse();
}

inline CCCoefficients cc_coefficients(const Coefficients& c, double gamma, const Eigen::MatrixXd& L, const PBlocks& b) {
  const ZetaEta z = zeta_eta(c, L, b);
  const Eigen::MatrixXd f = follower_weight_inverse(c, L);
  const Eigen::MatrixXd W = c.Bt + c.Ht * L;
  const Eigen::MatrixXd HB = c.H + c.B * L;
  const Eigen::MatrixXd DL = c.D * L;
  const Eigen::MatrixXd fLz = f * L.transpose() * c.R0t * z.zeta;
  const Eigen::MatrixXd fLe = f * L.transpose() * c.R0t * z.eta;
  const Eigen::MatrixXd ee = c.E * CheckedLu(c.R2, "R2").solve(c.E.transpose()) / (gamma * gamma);
  CCCoefficients k;
  k.A1h = c.At + c.Ft + c.Ht * z.eta - W * fLe;
  k.B1h = c.Ht * z.zeta - W * fLz;
  k.H1h = -W * f * W.transpose();
  k.A2h = c.A + ee * b.P1 + c.B * z.zeta - HB * fLz;
  k.B2h = c.F + ee * b.Pi1 + c.B * z.eta - HB * fLe;
  k.H2h = -HB * f * W.transpose();
  k.A3h = c.C + c.D * z.zeta - DL * fLz;
  k.B3h = c.D * z.eta - DL * fLe;
  k.H3h = -DL * f * W.transpose();
  return k;
}

struct MatchingResidual {
  Eigen::MatrixXd r1, r2;  // mF x n each

  double norm() const { return std::sqrt(r1.squaredNorm() + r2.squaredNorm()); }
  Eigen::VectorXd stacked() const {
    Eigen::VectorXd v(r1.size() + r2.size());
    v << r1.reshaped(), r2.reshaped();
    return v;
  }
};

/// The two algebraic matching conditions of the consistency system, with zeta/eta
/// recomputed from L.
inline MatchingResidual matching_residual(const Coefficients& c, const Eigen::MatrixXd& L, const Eigen::MatrixXd& Delta,
                                          const Eigen::MatrixXd& Theta, const PBlocks& b) {
  const ZetaEta z = zeta_eta(c, L, b);
  const Eigen::MatrixXd f = follower_weight_inverse(c, L);
  const Eigen::MatrixXd W = c.Bt + c.Ht * L;
  const CheckedLu r1(c.R1, "R1");
  MatchingResidual r;
  r.r1 = f * (L.transpose() * c.R0t * z.zeta + W.transpose() * Theta) -
         r1.solve(c.H.transpose() * b.P1 + c.Bt.transpose() * b.P2);
  r.r2 = f * (L.transpose() * c.R0t * z.eta + W.transpose() * Delta) -
         r1.solve(c.H.transpose() * b.Pi1 + c.Bt.transpose() * b.Pi2);
  return r;
}

/// Forward-time derivatives of (Delta, Theta).
inline std::pair<Eigen::MatrixXd, Eigen::MatrixXd> delta_theta_rhs(const Coefficients& c, const CCCoefficients& k,
                                                                   const Eigen::MatrixXd& Delta,
                                                                   const Eigen::MatrixXd& Theta) {
  const Eigen::MatrixXd AtT = c.At.transpose();
  Eigen::MatrixXd dD = -(Delta * k.A1h + AtT * Delta + Delta * k.H1h * Delta + Theta * (k.B2h + k.H2h * Delta) + c.Qt -
                         c.Qt * c.Gamma1t);
  Eigen::MatrixXd dT = -(Theta * k.A2h + AtT * Theta + Theta * k.H2h * Theta + Delta * (k.B1h + k.H1h * Theta));
  return {std::move(dD), std::move(dT)};
}

/// Forward-time derivatives of (Sigma, Phi, Psi) given (Delta, Theta).
inline std::array<Eigen::MatrixXd, 3> sigma_phi_psi_rhs(const Coefficients& c, const CCCoefficients& k,
                                                        const Eigen::MatrixXd& Delta, const Eigen::MatrixXd& Theta,
                                                        const Eigen::MatrixXd& Sigma, const Eigen::MatrixXd& Phi,
                                                        const Eigen::MatrixXd& Psi) {
  const Eigen::MatrixXd AtT = c.At.transpose();
  return {
      -(Sigma * c.At + AtT * Sigma + Sigma * k.H1h * Sigma + c.Qt),
      -(Phi * (k.A1h + k.H1h * Delta) + AtT * Phi + Sigma * k.H1h * Phi + Sigma * (k.A1h - c.At) +
        Psi * (k.B2h + k.H2h * Delta) - c.Qt * c.Gamma1t),
      -(Psi * (k.A2h + k.H2h * Theta) + AtT * Psi + Sigma * k.H1h * Psi + Sigma * k.B1h + Phi * (k.B1h + k.H1h * Theta)),
  };
}

// ---------------------------------------------------------------------------
// Least squares for L

struct LeastSquaresOptions {
  double tol = 1e-9;        // target residual norm
  int max_iter = 50;
  double damping = 1e-3;    // initial Levenberg parameter
};

struct LeastSquaresResult {
  Eigen::MatrixXd L;
  double residual = std::numeric_limits<double>::infinity();
  int iterations = 0;
};

/// Levenberg-Marquardt on a matrix unknown with a central-difference Jacobian.
/// `fn` maps L to a residual vector.
template <class Fn>
LeastSquaresResult levenberg_marquardt(const Fn& fn, Eigen::MatrixXd L, const LeastSquaresOptions& opt) {
  const Eigen::Index rows = L.rows(), cols = L.cols(), nx = L.size();
  Eigen::VectorXd r = fn(L);
  double cost = r.squaredNorm();
  double lambda = opt.damping;
  int it = 0;
  for (; it < opt.max_iter; ++it) {
    if (std::sqrt(cost) <= 1e-3 * opt.tol) break;
    Eigen::MatrixXd J(r.size(), nx);
    for (Eigen::Index j = 0; j < nx; ++j) {
      const double step = 1e-6 * (1.0 + std::abs(L.reshaped()(j)));
      Eigen::MatrixXd Lp = L, Lm = L;
      Lp.reshaped()(j) += step;
      Lm.reshaped()(j) -= step;
      J.col(j) = (fn(Lp) - fn(Lm)) / (2.0 * step);
    }
    const Eigen::MatrixXd JtJ = J.transpose() * J;
    const Eigen::VectorXd g = J.transpose() * r;
    const Eigen::VectorXd scale = JtJ.diagonal().cwiseMax(1e-12 * JtJ.diagonal().maxCoeff());
    bool accepted = false;
    Eigen::VectorXd delta;
    while (lambda < 1e12) {
      Eigen::MatrixXd A = JtJ;
      A.diagonal() += lambda * scale;
      delta = -A.ldlt().solve(g);
      Eigen::MatrixXd trial = L + delta.reshaped(rows, cols);
      Eigen::VectorXd rt = fn(trial);
      const double ct = rt.squaredNorm();
      if (std::isfinite(ct) && ct < cost) {
        L = std::move(trial);
        r = std::move(rt);
        cost = ct;
        lambda = std::max(lambda / 10.0, 1e-15);
        accepted = true;
        break;
      }
      lambda *= 10.0;
    }
    if (!accepted) break;
    if (delta.norm() <= 1e-15 * (1.0 + L.norm())) break;
  }
  return {std::move(L), std::sqrt(cost), it};
}

// ---------------------------------------------------------------------------
// Backward march of the consistency DAE

enum class Coupling {
  stagewise,        // L re-solved at every RK4 stage state
  zero_order_hold,  // L from the step's starting node held over the step
};

struct IncentiveOptions {
  double newton_tol = 1e-9;
  int max_iter = 50;
  double damping = 1e-3;
  Coupling coupling = Coupling::zero_order_hold;
  EscapePolicy escape{};
};

struct IncentiveMatrices {
  MatrixTrajectory L, zeta, eta;
};

struct DeltaThetaSolution {
  MatrixTrajectory Delta, Theta;
  MatrixTrajectory matching_residual;  // 2x1 per node: (||r1||, ||r2||)
  double max_matching_residual = 0.0;
  double fraction_within_tol = 0.0;    // share of nodes with stacked residual <= newton_tol
  double ode_residual = 0.0;           // central-difference residual with the node L
  Coupling coupling = Coupling::zero_order_hold;
  /// L at the four RK4 stages of the step from node k+1 to node k (index k).
  std::vector<std::array<Eigen::MatrixXd, 4>> stage_L;
};

struct IncentiveResult {
  DeltaThetaSolution dt;
  IncentiveMatrices inc;
  bool converged = false;  // max matching residual <= 100 * newton_tol
  double newton_tol = 0.0;
};

/// Carries the best-effort solution when the residual floor is not reached.
class NoIncentiveSolution : public Error {
 public:
  explicit NoIncentiveSolution(std::shared_ptr<const IncentiveResult> best)
      : Error("consistency system: matching residual " + std::to_string(best->dt.max_matching_residual) +
              " exceeds 100 x newton_tol " + std::to_string(best->newton_tol)),
        best_(std::move(best)) {}
  const IncentiveResult& best_effort() const { return *best_; }
  const char* kind() const noexcept override { return "NoIncentiveSolution"; }

 private:
  std::shared_ptr<const IncentiveResult> best_;
};

namespace detail {

inline LeastSquaresResult solve_L(const Coefficients& c, const PBlocks& b, const Eigen::MatrixXd& Delta,
                                  const Eigen::MatrixXd& Theta, const Eigen::MatrixXd& L0,
                                  const LeastSquaresOptions& opt) {
  auto fn = [&](const Eigen::MatrixXd& L) { return matching_residual(c, L, Delta, Theta, b).stacked(); };
  return levenberg_marquardt(fn, L0, opt);
}

/// Terminal node: L = 0 first, then scaled identities; smallest residual wins.
inline LeastSquaresResult solve_L_multistart(const Coefficients& c, const PBlocks& b, const Eigen::MatrixXd& Delta,
                                             const Eigen::MatrixXd& Theta, const LeastSquaresOptions& opt) {
  const Eigen::Index mL = c.B.cols(), mF = c.H.cols();
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(mL, mF);
  LeastSquaresResult best = solve_L(c, b, Delta, Theta, Eigen::MatrixXd::Zero(mL, mF), opt);
  for (double s : {-2.0, -1.0, 0.0, 1.0, 2.0}) {
    LeastSquaresResult r = solve_L(c, b, Delta, Theta, s * I, opt);
    if (r.residual < best.residual) best = std::move(r);
  }
  return best;
}

inline bool out_of_range(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double threshold) {
  return !a.allFinite() || !b.allFinite() || a.norm() > threshold || b.norm() > threshold;
}

}  // namespace detail

/// Solves the consistency DAE backward from T. Never throws on a large matching
/// residual; `converged` reports whether the residual floor was reached.
inline IncentiveResult solve_cc_incentive_report(const ModelParams& p, const BlockRiccatiSolution& leader,
                                                 const IncentiveOptions& opts = {}) {
  if (!(opts.newton_tol > 0.0) || opts.max_iter < 1 || !(opts.damping > 0.0)) {
    throw ValueError("incentive options: newton_tol, max_iter and damping must be positive");
  }
  const TimeGrid& grid = leader.grid();
  const std::size_t M = static_cast<std::size_t>(grid.steps());
  const double h = grid.h();
  const double gamma = leader.gamma;
  const LeastSquaresOptions lso{opts.newton_tol, opts.max_iter, opts.damping};
  const double thr = opts.escape.norm_threshold;

  std::vector<Eigen::MatrixXd> D(M + 1), Th(M + 1), Ls(M + 1), Z(M + 1), E(M + 1), R(M + 1);
  std::vector<std::array<Eigen::MatrixXd, 4>> stage(M);

  const Coefficients& cT = p.coeff(grid.t(M));
  D[M] = cT.Gt - cT.Gt * cT.Gamma2t;
  Th[M] = Eigen::MatrixXd::Zero(D[M].rows(), D[M].cols());
  Ls[M] = detail::solve_L_multistart(cT, leader.at(M), D[M], Th[M], lso).L;

  for (std::size_t k = M; k-- > 0;) {
    const double t1 = grid.t(k + 1), t0 = grid.t(k), tm = t1 - 0.5 * h;
    const PBlocks b1 = leader.at(k + 1), bm = leader.midpoint(k), b0 = leader.at(k);
    const Coefficients &c1 = p.coeff(t1), &cm = p.coeff(tm), &c0 = p.coeff(t0);
    auto& L = stage[k];
    L[0] = Ls[k + 1];
    auto eval = [&](int i, const Coefficients& c, const PBlocks& b, const Eigen::MatrixXd& d,
                    const Eigen::MatrixXd& th) {
      if (i > 0) {
        L[i] = opts.coupling == Coupling::stagewise ? detail::solve_L(c, b, d, th, L[i - 1], lso).L : L[0];
      }
      return delta_theta_rhs(c, cc_coefficients(c, gamma, L[i], b), d, th);
    };
    const auto k1 = eval(0, c1, b1, D[k + 1], Th[k + 1]);
    Eigen::MatrixXd sd = D[k + 1] - 0.5 * h * k1.first, st = Th[k + 1] - 0.5 * h * k1.second;
    if (detail::out_of_range(sd, st, thr)) throw EscapeError("Delta/Theta equations", {tm, std::max(sd.norm(), st.norm()), k});
    const auto k2 = eval(1, cm, bm, sd, st);
    sd = D[k + 1] - 0.5 * h * k2.first;
    st = Th[k + 1] - 0.5 * h * k2.second;
    if (detail::out_of_range(sd, st, thr)) throw EscapeError("Delta/Theta equations", {tm, std::max(sd.norm(), st.norm()), k});
    const auto k3 = eval(2, cm, bm, sd, st);
    sd = D[k + 1] - h * k3.first;
    st = Th[k + 1] - h * k3.second;
    if (detail::out_of_range(sd, st, thr)) throw EscapeError("Delta/Theta equations", {t0, std::max(sd.norm(), st.norm()), k});
    const auto k4 = eval(3, c0, b0, sd, st);
    D[k] = D[k + 1] - (h / 6.0) * (k1.first + 2.0 * k2.first + 2.0 * k3.first + k4.first);
    Th[k] = Th[k + 1] - (h / 6.0) * (k1.second + 2.0 * k2.second + 2.0 * k3.second + k4.second);
    if (detail::out_of_range(D[k], Th[k], thr)) throw EscapeError("Delta/Theta equations", {t0, std::max(D[k].norm(), Th[k].norm()), k});
    Ls[k] = detail::solve_L(c0, b0, D[k], Th[k], L[3], lso).L;
  }

  IncentiveResult out;
  out.newton_tol = opts.newton_tol;
  std::size_t within = 0;
  for (std::size_t k = 0; k <= M; ++k) {
    const Coefficients& c = p.coeff(grid.t(k));
    const PBlocks b = leader.at(k);
    const ZetaEta z = zeta_eta(c, Ls[k], b);
    Z[k] = z.zeta;
    E[k] = z.eta;
    const MatchingResidual mr = matching_residual(c, Ls[k], D[k], Th[k], b);
    R[k] = Eigen::Vector2d(mr.r1.norm(), mr.r2.norm());
    out.dt.max_matching_residual = std::max(out.dt.max_matching_residual, mr.norm());
    if (mr.norm() <= opts.newton_tol) ++within;
  }
  out.dt.fraction_within_tol = static_cast<double>(within) / static_cast<double>(M + 1);
  out.dt.coupling = opts.coupling;
  out.dt.Delta = MatrixTrajectory(grid, std::move(D));
  out.dt.Theta = MatrixTrajectory(grid, std::move(Th));
  out.dt.matching_residual = MatrixTrajectory(grid, std::move(R));
  out.dt.stage_L = std::move(stage);
  out.inc.L = MatrixTrajectory(grid, std::move(Ls));
  out.inc.zeta = MatrixTrajectory(grid, std::move(Z));
  out.inc.eta = MatrixTrajectory(grid, std::move(E));

  // ODE residual of (Delta, Theta) with the node values of L.
  const IncentiveMatrices& inc = out.inc;
  auto rhs = [&](double t, const MatrixStack& x) -> MatrixStack {
    const auto k = static_cast<std::size_t>(std::llround(t / h));
    const Coefficients& c = p.coeff(t);
    auto d = delta_theta_rhs(c, cc_coefficients(c, gamma, inc.L[k], leader.at(k)), x[0], x[1]);
    return {std::move(d.first), std::move(d.second)};
  };
  const OdeProblem<decltype(rhs)> problem{{out.dt.Delta.back(), out.dt.Theta.back()}, rhs, Direction::backward};
  out.dt.ode_residual = residual({out.dt.Delta, out.dt.Theta}, problem);
  out.converged = out.dt.max_matching_residual <= 100.0 * opts.newton_tol;
  return out;
}

/// As solve_cc_incentive_report, but throws NoIncentiveSolution (carrying the best
/// effort) when the matching residual exceeds 100 x newton_tol.
inline IncentiveResult solve_cc_incentive(const ModelParams& p, const BlockRiccatiSolution& leader,
                                          const IncentiveOptions& opts = {}) {
  IncentiveResult r = solve_cc_incentive_report(p, leader, opts);
  if (!r.converged) throw NoIncentiveSolution(std::make_shared<const IncentiveResult>(std::move(r)));
  return r;
}

/// Stage values of L for a prescribed node trajectory: endpoints at the outer stages,
/// the node average at the two midpoint stages.
inline std::vector<std::array<Eigen::MatrixXd, 4>> stage_values(const MatrixTrajectory& L) {
  std::vector<std::array<Eigen::MatrixXd, 4>> s(L.size() - 1);
  for (std::size_t k = 0; k + 1 < L.size(); ++k) {
    const Eigen::MatrixXd mid = 0.5 * (L[k] + L[k + 1]);
    s[k] = {L[k + 1], mid, mid, L[k]};
  }
  return s;
}

// ---------------------------------------------------------------------------
// Decoupling equations

struct SigmaPhiPsiSolution {
  MatrixTrajectory Sigma, Phi, Psi;
  MatrixTrajectory Delta, Theta;  // re-integrated alongside
  double max_theta_psi_gap = 0.0;      // max_t ||Theta - Psi|| / (1 + ||Theta||)
  double max_delta_split_gap = 0.0;    // max_t ||Delta - Sigma - Phi|| / (1 + ||Delta||)
};

inline constexpr double kRelationTol = 1e-6;

/// Integrates (Delta, Theta, Sigma, Phi, Psi) jointly with the stage values of L.
/// Does not check the relations.
inline SigmaPhiPsiSolution integrate_sigma_phi_psi(const ModelParams& p, const BlockRiccatiSolution& leader,
                                                   const std::vector<std::array<Eigen::MatrixXd, 4>>& stage_L,
                                                   const EscapePolicy& policy = {}) {
  const TimeGrid& grid = leader.grid();
  const std::size_t M = static_cast<std::size_t>(grid.steps());
  if (stage_L.size() != M) throw GridMismatch("stage values of L do not match the grid");
  const double h = grid.h();
  const double gamma = leader.gamma;
  const Coefficients& cT = p.coeff(grid.t(M));
  const Eigen::Index n = cT.A.rows();

  using State = std::array<Eigen::MatrixXd, 5>;  // Delta, Theta, Sigma, Phi, Psi
  std::vector<State> x(M + 1);
  x[M] = {cT.Gt - cT.Gt * cT.Gamma2t, Eigen::MatrixXd::Zero(n, n), cT.Gt, -cT.Gt * cT.Gamma2t,
          Eigen::MatrixXd::Zero(n, n)};
  auto rhs = [&](const Coefficients& c, const PBlocks& b, const Eigen::MatrixXd& L, const State& s) {
    const CCCoefficients k = cc_coefficients(c, gamma, L, b);
    auto dt = delta_theta_rhs(c, k, s[0], s[1]);
    auto sp = sigma_phi_psi_rhs(c, k, s[0], s[1], s[2], s[3], s[4]);
    return State{std::move(dt.first), std::move(dt.second), std::move(sp[0]), std::move(sp[1]), std::move(sp[2])};
  };
  auto axpy = [](const State& a, double w, const State& d) {
    State r;
    for (int i = 0; i < 5; ++i) r[i] = a[i] + w * d[i];
    return r;
  };
  auto check = [&](const State& s, double t, std::size_t node) {
    double worst = 0.0;
    for (const auto& m : s) worst = std::max(worst, m.allFinite() ? m.norm() : std::numeric_limits<double>::infinity());
    if (!(worst <= policy.norm_threshold)) throw EscapeError("Sigma/Phi/Psi equations", {t, worst, node});
  };
  for (std::size_t k = M; k-- > 0;) {
    const double t1 = grid.t(k + 1), t0 = grid.t(k), tm = t1 - 0.5 * h;
    const PBlocks b1 = leader.at(k + 1), bm = leader.midpoint(k), b0 = leader.at(k);
    const auto& L = stage_L[k];
    const State k1 = rhs(p.coeff(t1), b1, L[0], x[k + 1]);
    State s = axpy(x[k + 1], -0.5 * h, k1);
    check(s, tm, k);
    const State k2 = rhs(p.coeff(tm), bm, L[1], s);
    s = axpy(x[k + 1], -0.5 * h, k2);
    check(s, tm, k);
    const State k3 = rhs(p.coeff(tm), bm, L[2], s);
    s = axpy(x[k + 1], -h, k3);
    check(s, t0, k);
    const State k4 = rhs(p.coeff(t0), b0, L[3], s);
    for (int i = 0; i < 5; ++i) x[k][i] = x[k + 1][i] - (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    check(x[k], t0, k);
  }

  std::array<std::vector<Eigen::MatrixXd>, 5> cols;
  for (auto& v : cols) v.resize(M + 1);
  SigmaPhiPsiSolution out;
  for (std::size_t k = 0; k <= M; ++k) {
    for (int i = 0; i < 5; ++i) cols[i][k] = x[k][i];
    const auto& s = x[k];
    out.max_theta_psi_gap = std::max(out.max_theta_psi_gap, (s[1] - s[4]).norm() / (1.0 + s[1].norm()));
    out.max_delta_split_gap = std::max(out.max_delta_split_gap, (s[0] - s[2] - s[3]).norm() / (1.0 + s[0].norm()));
  }
  out.Delta = MatrixTrajectory(grid, std::move(cols[0]));
  out.Theta = MatrixTrajectory(grid, std::move(cols[1]));
  out.Sigma = MatrixTrajectory(grid, std::move(cols[2]));
  out.Phi = MatrixTrajectory(grid, std::move(cols[3]));
  out.Psi = MatrixTrajectory(grid, std::move(cols[4]));
  return out;
}

/// Solves the decoupling equations and checks Theta = Psi, Delta = Sigma + Phi
/// against the supplied Delta/Theta. Throws RelationViolated on a breach.
inline SigmaPhiPsiSolution solve_sigma_phi_psi(const ModelParams& p, const BlockRiccatiSolution& leader,
                                               const DeltaThetaSolution& dt, const IncentiveMatrices& inc,
                                               const EscapePolicy& policy = {}) {
  if (!(inc.L.grid() == leader.grid()) || !(dt.Delta.grid() == leader.grid())) {
    throw GridMismatch("solve_sigma_phi_psi: inputs on different grids");
  }
  const auto stages = dt.stage_L.empty() ? stage_values(inc.L) : dt.stage_L;
  SigmaPhiPsiSolution s = integrate_sigma_phi_psi(p, leader, stages, policy);
  s.max_theta_psi_gap = 0.0;
  s.max_delta_split_gap = 0.0;
  for (std::size_t k = 0; k < s.Sigma.size(); ++k) {
    s.max_theta_psi_gap =
        std::max(s.max_theta_psi_gap, (dt.Theta[k] - s.Psi[k]).norm() / (1.0 + dt.Theta[k].norm()));
    s.max_delta_split_gap = std::max(s.max_delta_split_gap,
                                     (dt.Delta[k] - s.Sigma[k] - s.Phi[k]).norm() / (1.0 + dt.Delta[k].norm()));
  }
  if (!(s.max_theta_psi_gap <= kRelationTol) || !(s.max_delta_split_gap <= kRelationTol)) {
    throw RelationViolated("decoupling relations violated: Theta-Psi gap " + std::to_string(s.max_theta_psi_gap) +
                           ", Delta-(Sigma+Phi) gap " + std::to_string(s.max_delta_split_gap));
  }
  return s;
}

/// Delta/Theta for a prescribed L trajectory (no matching solve).
inline DeltaThetaSolution delta_theta_for(const ModelParams& p, const BlockRiccatiSolution& leader,
                                          const MatrixTrajectory& L, const EscapePolicy& policy = {}) {
  const auto stages = stage_values(L);
  SigmaPhiPsiSolution s = integrate_sigma_phi_psi(p, leader, stages, policy);
  DeltaThetaSolution dt;
  dt.Delta = std::move(s.Delta);
  dt.Theta = std::move(s.Theta);
  dt.stage_L = stages;
  const TimeGrid& grid = leader.grid();
  std::vector<Eigen::MatrixXd> R(grid.nodes());
  for (std::size_t k = 0; k < grid.nodes(); ++k) {
    const MatchingResidual mr = matching_residual(p.coeff(grid.t(k)), L[k], dt.Delta[k], dt.Theta[k], leader.at(k));
    R[k] = Eigen::Vector2d(mr.r1.norm(), mr.r2.norm());
    dt.max_matching_residual = std::max(dt.max_matching_residual, mr.norm());
  }
  dt.matching_residual = MatrixTrajectory(grid, std::move(R));
  return dt;
}

/// zeta/eta trajectories for a prescribed L.
inline IncentiveMatrices incentive_matrices_for(const ModelParams& p, const BlockRiccatiSolution& leader,
                                                const MatrixTrajectory& L) {
  const TimeGrid& grid = leader.grid();
  std::vector<Eigen::MatrixXd> Z(grid.nodes()), E(grid.nodes());
  for (std::size_t k = 0; k < grid.nodes(); ++k) {
    ZetaEta z = zeta_eta(p.coeff(grid.t(k)), L[k], leader.at(k));
    Z[k] = std::move(z.zeta);
    E[k] = std::move(z.eta);
  }
  return {L, MatrixTrajectory(grid, std::move(Z)), MatrixTrajectory(grid, std::move(E))};
}

// ---------------------------------------------------------------------------
// Follower feedback

struct FollowerGainSet {
  Eigen::MatrixXd Gx0bar, Gmbar, Gxi, Gx0, Gm;
};

inline FollowerGainSet follower_gains_at(const Coefficients& c, const Eigen::MatrixXd& L, const Eigen::MatrixXd& zeta,
                                         const Eigen::MatrixXd& eta, const Eigen::MatrixXd& Delta,
                                         const Eigen::MatrixXd& Theta, const Eigen::MatrixXd& Sigma,
                                         const Eigen::MatrixXd& Phi, const Eigen::MatrixXd& Psi) {
  const Eigen::MatrixXd f = follower_weight_inverse(c, L);
  const Eigen::MatrixXd Wt = (c.Bt + c.Ht * L).transpose();
  const Eigen::MatrixXd Lz = L.transpose() * c.R0t * zeta;
  const Eigen::MatrixXd Le = L.transpose() * c.R0t * eta;
  return {-f * (Lz + Wt * Theta), -f * (Le + Wt * Delta), -f * Wt * Sigma, -f * (Lz + Wt * Psi), -f * (Le + Wt * Phi)};
}

struct FollowerGains {
  MatrixTrajectory Gx0bar, Gmbar;   // population-average feedback on (x0, m)
  MatrixTrajectory Gxi, Gx0, Gm;    // individual feedback on (xi, x0, m)

  const TimeGrid& grid() const { return Gxi.grid(); }
};

inline FollowerGains follower_gains(const ModelParams& p, const DeltaThetaSolution& dt, const SigmaPhiPsiSolution& spp,
                                    const IncentiveMatrices& inc) {
  const TimeGrid& grid = inc.L.grid();
  if (!(dt.Delta.grid() == grid) || !(spp.Sigma.grid() == grid)) throw GridMismatch("follower_gains: grid mismatch");
  const std::size_t nodes = grid.nodes();
  std::array<std::vector<Eigen::MatrixXd>, 5> g;
  for (auto& v : g) v.resize(nodes);
  for (std::size_t k = 0; k < nodes; ++k) {
    FollowerGainSet s = follower_gains_at(p.coeff(grid.t(k)), inc.L[k], inc.zeta[k], inc.eta[k], dt.Delta[k],
                                          dt.Theta[k], spp.Sigma[k], spp.Phi[k], spp.Psi[k]);
    g[0][k] = std::move(s.Gx0bar);
    g[1][k] = std::move(s.Gmbar);
    g[2][k] = std::move(s.Gxi);
    g[3][k] = std::move(s.Gx0);
    g[4][k] = std::move(s.Gm);
  }
  FollowerGains out;
  out.Gx0bar = MatrixTrajectory(grid, std::move(g[0]));
  out.Gmbar = MatrixTrajectory(grid, std::move(g[1]));
  out.Gxi = MatrixTrajectory(grid, std::move(g[2]));
  out.Gx0 = MatrixTrajectory(grid, std::move(g[3]));
  out.Gm = MatrixTrajectory(grid, std::move(g[4]));
  return out;
}

}  // namespace lqmfg
