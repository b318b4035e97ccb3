#pragma once

#include <Eigen/Dense>
#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "lqmfg/errors.hpp"
#include "lqmfg/incentive.hpp"
#include "lqmfg/leader.hpp"
#include "lqmfg/model.hpp"
#include "lqmfg/parallel.hpp"
#include "lqmfg/rng.hpp"
#include "lqmfg/trajectory.hpp"

namespace lqmfg {

enum class Disturbance { worst, zero };

/// team: every follower applies the leader's decentralized team gains on (x0, m).
/// incentive: followers apply their own optimal feedback and the leader answers each
/// follower through the incentive rule.
enum class PopulationMode { incentive, team };

/// Open-loop deviation eps * sign * phi(t) * direction added to the leader's
/// control pair (u0, u1) or to the disturbance.
struct Perturbation {
  enum class Target { none, control, disturbance };
  enum class Shape { constant, bump };

  Target target = Target::none;
  Shape shape = Shape::constant;
  double sign = 1.0;
  double epsilon = 0.0;
  Eigen::VectorXd direction;  // empty: all-ones, normalized

  /// phi(t): 1, or sin^2 bump supported on [T/4, 3T/4].
  static double profile(Shape s, double t, double T) {
    if (s == Shape::constant) return 1.0;
    const double a = 0.25 * T, b = 0.75 * T;
    if (t <= a || t >= b) return 0.0;
    const double x = std::sin(std::numbers::pi * (t - a) / (b - a));
    return x * x;
  }

  Eigen::VectorXd unit_direction(Eigen::Index dim) const {
    if (direction.size() == 0) return Eigen::VectorXd::Ones(dim) / std::sqrt(static_cast<double>(dim));
    if (direction.size() != dim) throw DimensionError("perturbation direction has the wrong length");
    return direction.normalized();
  }
};

struct SimConfig {
  int N = 100;
  int n_paths = 1;
  std::uint64_t master_seed = 42;
  int em_substeps = 1;
  int noise_substeps = 0;      // Brownian resolution per grid step; 0 means em_substeps
  unsigned threads = 0;        // 0: hardware concurrency
  int stored_followers = 16;   // individual series kept for agents 1..min(N, this)
  bool store_all_followers = false;
  bool store_series = true;    // keep per-path time series (costs are always kept)
  bool antithetic = false;     // paths 2j, 2j+1 share W0 and use opposite idiosyncratic noise
  Disturbance disturbance = Disturbance::worst;
  PopulationMode mode = PopulationMode::incentive;
  Perturbation perturbation;

  int fine_steps() const { return noise_substeps > 0 ? noise_substeps : em_substeps; }

  void validate() const {
    if (N < 1) throw ValueError("SimConfig: N must be >= 1");
    if (n_paths < 1) throw ValueError("SimConfig: n_paths must be >= 1");
    if (em_substeps < 1) throw ValueError("SimConfig: em_substeps must be >= 1");
    if (fine_steps() % em_substeps != 0) throw ValueError("SimConfig: noise_substeps must be a multiple of em_substeps");
    if (antithetic && n_paths % 2 != 0) throw ValueError("SimConfig: antithetic sampling needs an even path count");
    if (stored_followers < 0) throw ValueError("SimConfig: stored_followers must be >= 0");
  }
};

/// One Monte Carlo replication. Series columns are grid nodes.
struct PathRecord {
  Eigen::MatrixXd x0, m, xN;         // n x (M+1); xN empty for the limit system
  Eigen::MatrixXd u0, u1, v;         // population-average controls
  std::vector<Eigen::MatrixXd> xi;   // stored followers, n x (M+1)
  std::vector<Eigen::MatrixXd> u1i;  // stored followers, mF x (M+1)
  Eigen::VectorXd gap2;              // |xN - m|^2 per node (population only)
  double J0 = 0.0;                   // leader's zero-sum cost
  double Jf = 0.0;                   // follower cost averaged over agents
};

struct PathBundle {
  TimeGrid grid;
  int N = 0;                 // 0 for the limit system
  bool antithetic = false;
  std::vector<int> stored_agents;  // 1-based follower indices
  std::vector<PathRecord> paths;
};

// ---------------------------------------------------------------------------
// Statistics helpers

struct MeanStderr {
  double mean = 0.0;
  double stderr_ = 0.0;
  int units = 0;
};

/// Mean and standard error over independent units; with antithetic pairing the
/// units are pair averages of consecutive samples.
inline MeanStderr mean_stderr(const std::vector<double>& x, bool paired = false) {
  std::vector<double> u;
  if (paired) {
    for (std::size_t i = 0; i + 1 < x.size(); i += 2) u.push_back(0.5 * (x[i] + x[i + 1]));
  } else {
    u = x;
  }
  MeanStderr r;
  r.units = static_cast<int>(u.size());
  if (u.empty()) return r;
  const double n = static_cast<double>(u.size());
  r.mean = pairwise_sum<double>(0, u.size(), [&](std::size_t i) { return u[i]; }, 0.0) / n;
  if (u.size() > 1) {
    const double ss =
        pairwise_sum<double>(0, u.size(), [&](std::size_t i) { return (u[i] - r.mean) * (u[i] - r.mean); }, 0.0);
    r.stderr_ = std::sqrt(ss / (n - 1.0) / n);
  }
  return r;
}

struct SlopeFit {
  double slope = std::numeric_limits<double>::quiet_NaN();
  double intercept = std::numeric_limits<double>::quiet_NaN();
  double half_width = std::numeric_limits<double>::quiet_NaN();  // 95% confidence
  bool degenerate = true;
};

/// Least-squares slope of log(y) against log(x); degenerate if fewer than three
/// positive points.
inline SlopeFit fit_loglog(const std::vector<double>& x, const std::vector<double>& y) {
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] > 0.0 && y[i] > 1e-300 && std::isfinite(y[i])) {
      lx.push_back(std::log(x[i]));
      ly.push_back(std::log(y[i]));
    }
  }
  SlopeFit f;
  if (lx.size() < 3 || lx.size() != x.size()) return f;
  const double n = static_cast<double>(lx.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    mx += lx[i];
    my += ly[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
  }
  if (!(sxx > 0.0)) return f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double sse = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    const double e = ly[i] - f.intercept - f.slope * lx[i];
    sse += e * e;
  }
  const double se = std::sqrt(sse / (n - 2.0) / sxx);
  const boost::math::students_t dist(n - 2.0);
  f.half_width = boost::math::quantile(boost::math::complement(dist, 0.025)) * se;
  f.degenerate = false;
  return f;
}

// ---------------------------------------------------------------------------
// Gain tables

namespace detail {

/// Every feedback coefficient the steppers need at one node.
struct NodeGains {
  Eigen::MatrixXd T11, T12, T21, T22, V1, V2;
  Eigen::MatrixXd L, Gxi, Gx0, Gm, Gx0bar, Gmbar;  // incentive mode only
};

inline Eigen::MatrixXd lerp(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double w) {
  if (a.size() == 0) return a;
  return (1.0 - w) * a + w * b;
}

inline NodeGains lerp(const NodeGains& a, const NodeGains& b, double w) {
  return {lerp(a.T11, b.T11, w), lerp(a.T12, b.T12, w), lerp(a.T21, b.T21, w), lerp(a.T22, b.T22, w),
          lerp(a.V1, b.V1, w),   lerp(a.V2, b.V2, w),   lerp(a.L, b.L, w),     lerp(a.Gxi, b.Gxi, w),
          lerp(a.Gx0, b.Gx0, w), lerp(a.Gm, b.Gm, w),   lerp(a.Gx0bar, b.Gx0bar, w), lerp(a.Gmbar, b.Gmbar, w)};
}

inline std::vector<NodeGains> gain_table(const LeaderGains& g, const FollowerGains* fg, const IncentiveMatrices* inc) {
  std::vector<NodeGains> t(g.grid().nodes());
  for (std::size_t k = 0; k < t.size(); ++k) {
    t[k].T11 = g.Theta11[k];
    t[k].T12 = g.Theta12[k];
    t[k].T21 = g.Theta21[k];
    t[k].T22 = g.Theta22[k];
    t[k].V1 = g.V1[k];
    t[k].V2 = g.V2[k];
    if (fg != nullptr && inc != nullptr) {
      t[k].L = inc->L[k];
      t[k].Gxi = fg->Gxi[k];
      t[k].Gx0 = fg->Gx0[k];
      t[k].Gm = fg->Gm[k];
      t[k].Gx0bar = fg->Gx0bar[k];
      t[k].Gmbar = fg->Gmbar[k];
    }
  }
  return t;
}

/// Brownian increments: the W0 increment (agent 0) and, when requested, the n x N
/// follower increments over one Euler-Maruyama substep, summed from the fine level.
struct Increments {
  const NoiseSource& noise;
  std::uint32_t key_path;
  double idio_sign;
  int fine_per_em;
  double sqrt_fine_dt;

  double w0(std::uint32_t first_fine) const {
    double s = 0.0;
    for (int j = 0; j < fine_per_em; ++j) s += noise.normal(key_path, 0, first_fine + j, 0);
    return sqrt_fine_dt * s;
  }
  void followers(std::uint32_t first_fine, Eigen::MatrixXd& dW) const {
    dW.setZero();
    for (Eigen::Index i = 0; i < dW.cols(); ++i)
      for (int j = 0; j < fine_per_em; ++j)
        for (Eigen::Index r = 0; r < dW.rows(); ++r)
          dW(r, i) += noise.normal(key_path, static_cast<std::uint32_t>(i + 1), first_fine + j,
                                   static_cast<std::uint32_t>(r));
    dW *= idio_sign * sqrt_fine_dt;
  }
};

inline double quad(const Eigen::VectorXd& x, const Eigen::MatrixXd& W) { return x.dot(W * x); }

inline void guard_finite(const Eigen::MatrixXd& x, double t) {
  if (!x.allFinite()) throw NonFiniteState("state became non-finite at t=" + std::to_string(t));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Limit closed-loop system

namespace detail {

inline PathRecord limit_path(const ModelParams& p, const std::vector<NodeGains>& table, const SimConfig& cfg,
                             std::size_t path, const NoiseSource& noise) {
  const TimeGrid grid = p.grid();
  const int M = grid.steps();
  const double h = grid.h();
  const int sub = cfg.em_substeps;
  const double dt = h / sub;
  const int fine_per_em = cfg.fine_steps() / sub;
  const Coefficients& c = p.c;
  const Eigen::Index n = p.dims.n, mL = p.dims.mL, mF = p.dims.mF, nv = p.dims.nv;

  const auto key = static_cast<std::uint32_t>(cfg.antithetic ? path / 2 : path);
  const Increments inc{noise, key, 1.0, fine_per_em, std::sqrt(h / cfg.fine_steps())};

  const Perturbation& pert = cfg.perturbation;
  Eigen::VectorXd du = Eigen::VectorXd::Zero(mL + mF), dv = Eigen::VectorXd::Zero(nv);
  if (pert.target == Perturbation::Target::control) du = pert.unit_direction(mL + mF);
  if (pert.target == Perturbation::Target::disturbance) dv = pert.unit_direction(nv);
  auto amp = [&](double t) { return pert.sign * pert.epsilon * Perturbation::profile(pert.shape, t, p.T); };

  struct Controls {
    Eigen::VectorXd u0, u1, v;
  };
  auto controls = [&](const NodeGains& g, const Eigen::VectorXd& x0, const Eigen::VectorXd& m, double t) {
    Controls u{g.T11 * x0 + g.T12 * m, g.T21 * x0 + g.T22 * m,
               cfg.disturbance == Disturbance::worst ? Eigen::VectorXd(g.V1 * x0 + g.V2 * m)
                                                     : Eigen::VectorXd::Zero(nv)};
    const double a = amp(t);
    if (a != 0.0) {
      u.u0 += a * du.head(mL);
      u.u1 += a * du.tail(mF);
      u.v += a * dv;
    }
    return u;
  };

  PathRecord rec;
  if (cfg.store_series) {
    rec.x0.resize(n, M + 1);
    rec.m.resize(n, M + 1);
    rec.u0.resize(mL, M + 1);
    rec.u1.resize(mF, M + 1);
    rec.v.resize(nv, M + 1);
  }
  Eigen::VectorXd x0 = p.xi, m = p.x0init;
  const double g2 = p.gamma * p.gamma;
  const Eigen::MatrixXd AFt = c.At + c.Ft;
  double J = 0.0;
  for (int k = 0; k <= M; ++k) {
    const double t = grid.t(k);
    const Controls u = controls(table[k], x0, m, t);
    const Eigen::VectorXd dev = x0 - c.Gamma1 * m;
    const double run = quad(dev, c.Q) + quad(u.u0, c.R0) + quad(u.u1, c.R1) - g2 * quad(u.v, c.R2);
    J += (k == 0 || k == M ? 0.5 : 1.0) * h * run;
    if (cfg.store_series) {
      rec.x0.col(k) = x0;
      rec.m.col(k) = m;
      rec.u0.col(k) = u.u0;
      rec.u1.col(k) = u.u1;
      rec.v.col(k) = u.v;
    }
    if (k == M) break;
    for (int s = 0; s < sub; ++s) {
      const double ts = t + s * dt;
      const Controls us = s == 0 ? u : controls(lerp(table[k], table[k + 1], static_cast<double>(s) / sub), x0, m, ts);
      const double dW0 = inc.w0(static_cast<std::uint32_t>((k * sub + s) * fine_per_em));
      const Eigen::VectorXd drift0 = c.A * x0 + c.B * us.u0 + c.F * m + c.H * us.u1 + c.E * us.v;
      const Eigen::VectorXd diff0 = c.C * x0 + c.D * us.u0;
      const Eigen::VectorXd driftm = AFt * m + c.Bt * us.u1 + c.Ht * us.u0;
      x0 += dt * drift0 + diff0 * dW0;
      m += dt * driftm;
    }
    guard_finite(x0, grid.t(k + 1));
  }
  const Eigen::VectorXd devT = x0 - c.Gamma2 * m;
  rec.J0 = J + quad(devT, c.G);
  return rec;
}

}  // namespace detail

/// Euler-Maruyama for the limiting closed loop: x0 driven by W0, m with zero diffusion.
inline PathBundle simulate_limit(const ModelParams& p, const LeaderGains& gains, const SimConfig& cfg) {
  cfg.validate();
  if (!(gains.grid() == p.grid())) throw GridMismatch("simulate_limit: gains and model grid differ");
  const auto table = detail::gain_table(gains, nullptr, nullptr);
  const NoiseSource noise(cfg.master_seed);
  PathBundle b;
  b.grid = p.grid();
  b.antithetic = cfg.antithetic;
  b.paths.resize(static_cast<std::size_t>(cfg.n_paths));
  parallel_for(b.paths.size(), cfg.threads,
               [&](std::size_t i) { b.paths[i] = detail::limit_path(p, table, cfg, i, noise); });
  return b;
}

// ---------------------------------------------------------------------------
// N-follower population

namespace detail {

inline PathRecord population_path(const ModelParams& p, const std::vector<NodeGains>& table, const SimConfig& cfg,
                                  const std::vector<int>& stored, std::size_t path, const NoiseSource& noise) {
  const TimeGrid grid = p.grid();
  const int M = grid.steps();
  const double h = grid.h();
  const int sub = cfg.em_substeps;
  const double dt = h / sub;
  const int fine_per_em = cfg.fine_steps() / sub;
  const Coefficients& c = p.c;
  const Eigen::Index n = p.dims.n, mL = p.dims.mL, mF = p.dims.mF, nv = p.dims.nv;
  const int N = cfg.N;
  const bool incentive = cfg.mode == PopulationMode::incentive;

  const auto key = static_cast<std::uint32_t>(cfg.antithetic ? path / 2 : path);
  const double sign = cfg.antithetic && path % 2 == 1 ? -1.0 : 1.0;
  const Increments inc{noise, key, sign, fine_per_em, std::sqrt(h / cfg.fine_steps())};
  const bool idio = !c.Sigma.isZero(0.0);

  Eigen::VectorXd x0 = p.xi, m = p.x0init;
  Eigen::MatrixXd X = p.x0init.replicate(1, N);
  Eigen::MatrixXd U0(mL, N), U1(mF, N), dW = Eigen::MatrixXd::Zero(n, N);
  Eigen::VectorXd v(nv), xN(n);
  Eigen::VectorXd mbar_u0(mL), mbar_u1(mF);  // limiting average controls driving m

  // Controls at state (x0, m, X) with the given gains.
  auto controls = [&](const NodeGains& g) {
    xN = X.rowwise().mean();
    const Eigen::VectorXd team0 = g.T11 * x0 + g.T12 * m;
    const Eigen::VectorXd team1 = g.T21 * x0 + g.T22 * m;
    if (incentive) {
      // u1i = Gxi xi + Gx0 x0 + Gm m; the incentive rule L u1i + zeta x0 + eta m is
      // evaluated as team0 + L (u1i - team1), which is the same expression with
      // zeta = T11 - L T21 and eta = T12 - L T22 substituted.
      U1 = g.Gxi * X;
      U1.colwise() += g.Gx0 * x0 + g.Gm * m;
      U0 = g.L * (U1.colwise() - team1);
      U0.colwise() += team0;
      mbar_u1 = g.Gx0bar * x0 + g.Gmbar * m;
      mbar_u0 = team0 + g.L * (mbar_u1 - team1);
    } else {
      U0 = team0.replicate(1, N);
      U1 = team1.replicate(1, N);
      mbar_u0 = team0;
      mbar_u1 = team1;
    }
    v = cfg.disturbance == Disturbance::worst ? Eigen::VectorXd(g.V1 * x0 + g.V2 * m) : Eigen::VectorXd::Zero(nv);
  };

  PathRecord rec;
  if (cfg.store_series) {
    rec.x0.resize(n, M + 1);
    rec.m.resize(n, M + 1);
    rec.xN.resize(n, M + 1);
    rec.u0.resize(mL, M + 1);
    rec.u1.resize(mF, M + 1);
    rec.v.resize(nv, M + 1);
    rec.xi.assign(stored.size(), Eigen::MatrixXd(n, M + 1));
    rec.u1i.assign(stored.size(), Eigen::MatrixXd(mF, M + 1));
  }
  rec.gap2.resize(M + 1);

  const double g2 = p.gamma * p.gamma;
  const Eigen::MatrixXd AFt = c.At + c.Ft;
  double J0 = 0.0, Jf = 0.0;
  for (int k = 0; k <= M; ++k) {
    controls(table[k]);
    const Eigen::VectorXd u0N = U0.rowwise().mean(), u1N = U1.rowwise().mean();
    const double w = (k == 0 || k == M ? 0.5 : 1.0) * h;
    J0 += w * (quad(x0 - c.Gamma1 * xN, c.Q) + quad(u0N, c.R0) + quad(u1N, c.R1) - g2 * quad(v, c.R2));
    const Eigen::MatrixXd D = X - (c.Gamma1t * xN).replicate(1, N);
    const double fsum = (D.array() * (c.Qt * D).array()).sum() + (U0.array() * (c.R0t * U0).array()).sum() +
                        (U1.array() * (c.R1t * U1).array()).sum();
    Jf += w * fsum / N;
    rec.gap2(k) = (xN - m).squaredNorm();
    if (cfg.store_series) {
      rec.x0.col(k) = x0;
      rec.m.col(k) = m;
      rec.xN.col(k) = xN;
      rec.u0.col(k) = u0N;
      rec.u1.col(k) = u1N;
      rec.v.col(k) = v;
      for (std::size_t j = 0; j < stored.size(); ++j) {
        rec.xi[j].col(k) = X.col(stored[j] - 1);
        rec.u1i[j].col(k) = U1.col(stored[j] - 1);
      }
    }
    if (k == M) break;
    for (int s = 0; s < sub; ++s) {
      if (s > 0) controls(lerp(table[k], table[k + 1], static_cast<double>(s) / sub));
      const auto first = static_cast<std::uint32_t>((k * sub + s) * fine_per_em);
      const double dW0 = inc.w0(first);
      if (idio) inc.followers(first, dW);
      const Eigen::VectorXd u0N_s = U0.rowwise().mean(), u1N_s = U1.rowwise().mean();
      const Eigen::VectorXd drift0 = c.A * x0 + c.B * u0N_s + c.F * xN + c.H * u1N_s + c.E * v;
      const Eigen::VectorXd diff0 = c.C * x0 + c.D * u0N_s;
      const Eigen::VectorXd driftm = AFt * m + c.Bt * mbar_u1 + c.Ht * mbar_u0;
      Eigen::MatrixXd driftX = c.At * X + c.Bt * U1 + c.Ht * U0;
      driftX.colwise() += c.Ft * xN;
      x0 += dt * drift0 + diff0 * dW0;
      m += dt * driftm;
      X += dt * driftX;
      if (idio) X += c.Sigma * dW;
    }
    guard_finite(X, grid.t(k + 1));
    guard_finite(x0, grid.t(k + 1));
  }
  xN = X.rowwise().mean();
  rec.J0 = J0 + quad(x0 - c.Gamma2 * xN, c.G);
  const Eigen::MatrixXd DT = X - (c.Gamma2t * xN).replicate(1, N);
  rec.Jf = Jf + (DT.array() * (c.Gt * DT).array()).sum() / N;
  return rec;
}

}  // namespace detail

/// Simulates the leader, the N followers and the mean-field state. In incentive
/// mode `fgains` and `inc` are required; in team mode they are ignored.
inline PathBundle simulate_population(const ModelParams& p, const LeaderGains& gains, const FollowerGains* fgains,
                                      const IncentiveMatrices* inc, const SimConfig& cfg) {
  cfg.validate();
  if (!(gains.grid() == p.grid())) throw GridMismatch("simulate_population: gains and model grid differ");
  if (cfg.mode == PopulationMode::incentive) {
    if (fgains == nullptr || inc == nullptr) throw ValueError("incentive mode needs follower gains and L");
    if (!(fgains->grid() == p.grid()) || !(inc->L.grid() == p.grid())) throw GridMismatch("simulate_population: grid");
  }
  const auto table =
      detail::gain_table(gains, cfg.mode == PopulationMode::incentive ? fgains : nullptr, inc);
  const NoiseSource noise(cfg.master_seed);
  PathBundle b;
  b.grid = p.grid();
  b.N = cfg.N;
  b.antithetic = cfg.antithetic;
  const int keep = cfg.store_all_followers ? cfg.N : std::min(cfg.N, cfg.stored_followers);
  for (int i = 1; i <= keep; ++i) b.stored_agents.push_back(i);
  b.paths.resize(static_cast<std::size_t>(cfg.n_paths));
  parallel_for(b.paths.size(), cfg.threads, [&](std::size_t i) {
    b.paths[i] = detail::population_path(p, table, cfg, b.stored_agents, i, noise);
  });
  return b;
}

// ---------------------------------------------------------------------------
// Costs

struct CostReport {
  MeanStderr J0;
  MeanStderr Jf;
  double V0 = std::numeric_limits<double>::quiet_NaN();
};

inline CostReport eval_costs(const PathBundle& b, double V0 = std::numeric_limits<double>::quiet_NaN()) {
  std::vector<double> j0, jf;
  for (const auto& r : b.paths) {
    j0.push_back(r.J0);
    jf.push_back(r.Jf);
  }
  return {mean_stderr(j0, b.antithetic), mean_stderr(jf, b.antithetic), V0};
}

// ---------------------------------------------------------------------------
// Saddle-point inequalities

struct SaddleEntry {
  Perturbation::Target target = Perturbation::Target::control;
  Perturbation::Shape shape = Perturbation::Shape::constant;
  double sign = 1.0;
  double epsilon = 0.0;
  double margin = 0.0;    // J0(perturbed) - J0(saddle), common random numbers
  double stderr_ = 0.0;
  double expected = 0.0;  // closed-loop second-order prediction
  bool ok = false;
};

struct SaddleReport {
  std::vector<SaddleEntry> entries;
  double u_ratio = std::numeric_limits<double>::quiet_NaN();  // mean u-margin at the largest / smallest eps
  bool ratio_ok = false;
  bool all_ok = false;
};

/// Predicted margin eps^2 * int phi^2 d'Wd for the control (W = Rbar + Dbar'P Dbar) or
/// -gamma^2 eps^2 int phi^2 d'R2 d for the disturbance; trapezoidal on the grid.
inline double expected_margin(const ModelParams& p, const BlockRiccatiSolution& sol, const Perturbation& pert) {
  const TimeGrid& grid = sol.grid();
  const Eigen::Index mL = p.dims.mL, mF = p.dims.mF, nv = p.dims.nv;
  double acc = 0.0;
  for (std::size_t k = 0; k < grid.nodes(); ++k) {
    const double t = grid.t(k);
    const double phi = Perturbation::profile(pert.shape, t, p.T);
    const Coefficients& c = p.coeff(t);
    double q = 0.0;
    if (pert.target == Perturbation::Target::control) {
      const Eigen::VectorXd d = pert.unit_direction(mL + mF);
      Eigen::MatrixXd W = Eigen::MatrixXd::Zero(mL + mF, mL + mF);
      W.topLeftCorner(mL, mL) = c.R0 + c.D.transpose() * sol.P1[k] * c.D;
      W.bottomRightCorner(mF, mF) = c.R1;
      q = d.dot(W * d);
    } else if (pert.target == Perturbation::Target::disturbance) {
      const Eigen::VectorXd d = pert.unit_direction(nv);
      q = -p.gamma * p.gamma * d.dot(c.R2 * d);
    }
    acc += (k == 0 || k + 1 == grid.nodes() ? 0.5 : 1.0) * grid.h() * phi * phi * q;
  }
  return pert.epsilon * pert.epsilon * acc;
}

/// Battery {constant, bump} x {+, -} for each eps, applied to the control pair and
/// to the disturbance, with the other player keeping its feedback law.
inline SaddleReport saddle_check(const ModelParams& p, const BlockRiccatiSolution& sol, const LeaderGains& gains,
                                 SimConfig cfg, const std::vector<double>& epsilons = {0.1, 0.5}) {
  cfg.store_series = false;
  cfg.perturbation = {};
  cfg.disturbance = Disturbance::worst;
  const PathBundle base = simulate_limit(p, gains, cfg);
  SaddleReport rep;
  rep.all_ok = true;
  std::vector<double> u_mean(epsilons.size(), 0.0);
  for (std::size_t e = 0; e < epsilons.size(); ++e) {
    int count = 0;
    for (auto target : {Perturbation::Target::control, Perturbation::Target::disturbance}) {
      for (auto shape : {Perturbation::Shape::constant, Perturbation::Shape::bump}) {
        for (double sign : {1.0, -1.0}) {
          SimConfig c2 = cfg;
          c2.perturbation.target = target;
          c2.perturbation.shape = shape;
          c2.perturbation.sign = sign;
          c2.perturbation.epsilon = epsilons[e];
          const PathBundle pb = simulate_limit(p, gains, c2);
          std::vector<double> diff(pb.paths.size());
          for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = pb.paths[i].J0 - base.paths[i].J0;
          const MeanStderr ms = mean_stderr(diff, cfg.antithetic);
          SaddleEntry en{target, shape, sign, epsilons[e], ms.mean, ms.stderr_, expected_margin(p, sol, c2.perturbation)};
          en.ok = target == Perturbation::Target::control ? ms.mean >= -3.0 * ms.stderr_ : ms.mean <= 3.0 * ms.stderr_;
          rep.all_ok = rep.all_ok && en.ok;
          if (target == Perturbation::Target::control) {
            u_mean[e] += ms.mean;
            ++count;
          }
          rep.entries.push_back(en);
        }
      }
    }
    if (count > 0) u_mean[e] /= count;
  }
  if (epsilons.size() >= 2) {
    const auto lo = std::min_element(epsilons.begin(), epsilons.end()) - epsilons.begin();
    const auto hi = std::max_element(epsilons.begin(), epsilons.end()) - epsilons.begin();
    if (epsilons[lo] > 0.0 && u_mean[lo] != 0.0) {
      rep.u_ratio = u_mean[hi] / u_mean[lo];
      const double target = (epsilons[hi] / epsilons[lo]) * (epsilons[hi] / epsilons[lo]);
      rep.ratio_ok = std::abs(rep.u_ratio - target) <= 0.2 * target;
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Incentive matching

/// max_t ||(Gx0bar, Gmbar) - (Theta21, Theta22)||_F
inline double incentive_match(const LeaderGains& g, const FollowerGains& fg) {
  if (!(g.grid() == fg.grid())) throw GridMismatch("incentive_match: grid mismatch");
  double gap = 0.0;
  for (std::size_t k = 0; k < g.grid().nodes(); ++k) {
    const double d2 = (fg.Gx0bar[k] - g.Theta21[k]).squaredNorm() + (fg.Gmbar[k] - g.Theta22[k]).squaredNorm();
    gap = std::max(gap, std::sqrt(d2));
  }
  return gap;
}

/// max_t ||(Theta21, Theta22)||_F
inline double follower_team_gain_scale(const LeaderGains& g) {
  double s = 0.0;
  for (std::size_t k = 0; k < g.grid().nodes(); ++k)
    s = std::max(s, std::sqrt(g.Theta21[k].squaredNorm() + g.Theta22[k].squaredNorm()));
  return s;
}

// ---------------------------------------------------------------------------
// Population-size sweeps (decentralized team strategies)

struct SweepPoint {
  int N = 0;
  double gap = 0.0;
  double stderr_ = 0.0;
};

struct SweepReport {
  std::string label;
  std::vector<SweepPoint> points;
  SlopeFit fit;
  std::string note;
};

inline void check_sweep_sizes(const std::vector<int>& Ns) {
  if (Ns.size() < 3) throw ValueError("sweep needs at least three population sizes");
  for (std::size_t i = 1; i < Ns.size(); ++i)
    if (Ns[i] <= Ns[i - 1]) throw ValueError("population sizes must be strictly increasing");
  if (Ns.front() < 1) throw ValueError("population sizes must be positive");
}

/// sup_t of the Monte Carlo mean of |x^(N)(t) - m(t)|^2 for each N, and its
/// log-log slope.
inline SweepReport sweep_mean_field_gap(const ModelParams& p, const LeaderGains& gains, const std::vector<int>& Ns,
                                        SimConfig cfg) {
  check_sweep_sizes(Ns);
  cfg.mode = PopulationMode::team;
  cfg.store_series = false;
  cfg.stored_followers = 0;
  SweepReport rep;
  rep.label = "mean-field gap sup_t E|x^(N)-m|^2";
  std::vector<double> xs, ys;
  for (int N : Ns) {
    cfg.N = N;
    const PathBundle b = simulate_population(p, gains, nullptr, nullptr, cfg);
    const std::size_t nodes = b.grid.nodes();
    SweepPoint pt{N, -1.0, 0.0};
    for (std::size_t k = 0; k < nodes; ++k) {
      std::vector<double> vals(b.paths.size());
      for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = b.paths[i].gap2(static_cast<Eigen::Index>(k));
      const MeanStderr ms = mean_stderr(vals, cfg.antithetic);
      if (ms.mean > pt.gap) pt = {N, ms.mean, ms.stderr_};
    }
    rep.points.push_back(pt);
    xs.push_back(N);
    ys.push_back(pt.gap);
  }
  rep.fit = fit_loglog(xs, ys);
  // without idiosyncratic noise every follower tracks m exactly; what is left is rounding
  if (p.c.Sigma.isZero(0.0)) rep.fit = SlopeFit{};
  if (rep.fit.degenerate) rep.note = "degenerate: gap vanishes (no idiosyncratic noise)";
  return rep;
}

/// Proxy optimality gap |J0^(N)(decentralized) - J0(limit saddle)| with common W0;
/// the centralized saddle value itself is not computed.
inline SweepReport sweep_optimality_gap(const ModelParams& p, const LeaderGains& gains, const std::vector<int>& Ns,
                                        SimConfig cfg) {
  check_sweep_sizes(Ns);
  cfg.mode = PopulationMode::team;
  cfg.store_series = false;
  cfg.stored_followers = 0;
  SimConfig lim = cfg;
  lim.perturbation = {};
  const PathBundle base = simulate_limit(p, gains, lim);
  SweepReport rep;
  rep.label = "proxy optimality gap |J0^(N) - J0^limit|";
  rep.note = "proxy: compared against the limit-system saddle value, not the centralized inf-sup";
  std::vector<double> xs, ys;
  for (int N : Ns) {
    cfg.N = N;
    const PathBundle b = simulate_population(p, gains, nullptr, nullptr, cfg);
    std::vector<double> diff(b.paths.size());
    for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = b.paths[i].J0 - base.paths[i].J0;
    const MeanStderr ms = mean_stderr(diff, cfg.antithetic);
    rep.points.push_back({N, std::abs(ms.mean), ms.stderr_});
    xs.push_back(N);
    ys.push_back(std::abs(ms.mean));
  }
  rep.fit = fit_loglog(xs, ys);
  return rep;
}

}  // namespace lqmfg
