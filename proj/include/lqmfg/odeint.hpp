#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <limits>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "lqmfg/errors.hpp"
#include "lqmfg/trajectory.hpp"

namespace lqmfg {

/// State of a matrix ODE system: one matrix per unknown.
using MatrixStack = std::vector<Eigen::MatrixXd>;

enum class Direction { backward, forward };

struct NoProjection {
  void operator()(MatrixStack&) const {}
};

/// Matrix ODE dX/dt = rhs(t, X) with X given at t = T (backward) or t = 0 (forward).
/// `rhs` always returns the derivative in forward time.
template <class Rhs, class Projection = NoProjection>
struct OdeProblem {
  MatrixStack boundary;
  Rhs rhs;
  Direction direction = Direction::backward;
  Projection project{};
};

template <class Rhs>
OdeProblem(MatrixStack, Rhs, Direction) -> OdeProblem<Rhs>;
template <class Rhs, class Projection>
OdeProblem(MatrixStack, Rhs, Direction, Projection) -> OdeProblem<Rhs, Projection>;

struct EscapePolicy {
  double norm_threshold = 1e8;
};

struct Escape {
  double t_escape = 0.0;
  double norm = 0.0;
  std::size_t node = 0;
};

/// Thrown by solvers whose contract treats a finite escape as an error.
class EscapeError : public Error {
 public:
  EscapeError(const std::string& what, Escape e)
      : Error(what + ": finite escape at t=" + std::to_string(e.t_escape) + " (norm " + std::to_string(e.norm) + ")"),
        escape_(e) {}
  const Escape& escape() const { return escape_; }
  const char* kind() const noexcept override { return "Escape"; }

 private:
  Escape escape_;
};

struct OdeSolution {
  std::vector<MatrixTrajectory> components;  // empty when escaped
  std::optional<Escape> escape;

  bool escaped() const { return escape.has_value(); }
};

namespace detail {

inline double max_component_norm(const MatrixStack& x) {
  double m = 0.0;
  for (const auto& c : x) {
    if (!c.allFinite()) return std::numeric_limits<double>::infinity();
    m = std::max(m, c.norm());
  }
  return m;
}

inline bool all_finite(const MatrixStack& x) {
  return std::all_of(x.begin(), x.end(), [](const Eigen::MatrixXd& m) { return m.allFinite(); });
}

inline void check_shapes(const MatrixStack& state, const MatrixStack& deriv) {
  if (state.size() != deriv.size()) throw DimensionError("rhs returned a different number of components");
  for (std::size_t i = 0; i < state.size(); ++i) {
    if (state[i].rows() != deriv[i].rows() || state[i].cols() != deriv[i].cols()) {
      throw DimensionError("rhs component " + std::to_string(i) + " has the wrong shape");
    }
  }
}

inline MatrixStack axpy(const MatrixStack& x, double a, const MatrixStack& k) {
  MatrixStack y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] + a * k[i];
  return y;
}

}  // namespace detail

/// Fixed-step classical RK4 on `grid`, with finite-escape detection.
///
/// Every stage input is checked: a stage state that is non-finite or whose largest
/// component Frobenius norm exceeds the threshold ends the integration with an
/// Escape record at the node being computed. A non-finite derivative at a finite,
/// in-range state is a NonFiniteRhs error.
template <class Rhs, class Projection>
OdeSolution integrate(const OdeProblem<Rhs, Projection>& problem, const TimeGrid& grid,
                      const EscapePolicy& escape = {}) {
  if (!(escape.norm_threshold > 1.0)) throw ValueError("EscapePolicy: threshold must be > 1");
  const std::size_t nodes = grid.nodes();
  const std::size_t ncomp = problem.boundary.size();
  const bool backward = problem.direction == Direction::backward;
  const double hs = backward ? -grid.h() : grid.h();

  std::vector<std::vector<Eigen::MatrixXd>> values(ncomp, std::vector<Eigen::MatrixXd>(nodes));
  MatrixStack x = problem.boundary;
  std::size_t node = backward ? nodes - 1 : 0;
  for (std::size_t i = 0; i < ncomp; ++i) values[i][node] = x[i];

  OdeSolution out;
  auto escape_at = [&](std::size_t at, double norm) {
    out.escape = Escape{grid.t(at), norm, at};
    return out;
  };
  {
    const double n0 = detail::max_component_norm(x);
    if (!(n0 <= escape.norm_threshold)) return escape_at(node, n0);
  }

  auto eval = [&](double t, const MatrixStack& state) {
    MatrixStack d = problem.rhs(t, state);
    detail::check_shapes(state, d);
    if (!detail::all_finite(d)) {
      throw NonFiniteRhs("rhs produced a non-finite value at t=" + std::to_string(t));
    }
    return d;
  };

  for (int step = 0; step < grid.steps(); ++step) {
    const std::size_t next = backward ? node - 1 : node + 1;
    const double t = grid.t(node);
    const double tm = t + 0.5 * hs;
    const double tn = grid.t(next);

    const MatrixStack k1 = eval(t, x);
    MatrixStack s = detail::axpy(x, 0.5 * hs, k1);
    if (double nn = detail::max_component_norm(s); !(nn <= escape.norm_threshold)) return escape_at(next, nn);
    const MatrixStack k2 = eval(tm, s);
    s = detail::axpy(x, 0.5 * hs, k2);
    if (double nn = detail::max_component_norm(s); !(nn <= escape.norm_threshold)) return escape_at(next, nn);
    const MatrixStack k3 = eval(tm, s);
    s = detail::axpy(x, hs, k3);
    if (double nn = detail::max_component_norm(s); !(nn <= escape.norm_threshold)) return escape_at(next, nn);
    const MatrixStack k4 = eval(tn, s);

    for (std::size_t i = 0; i < ncomp; ++i) x[i] += (hs / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    problem.project(x);
    if (double nn = detail::max_component_norm(x); !(nn <= escape.norm_threshold)) return escape_at(next, nn);

    node = next;
    for (std::size_t i = 0; i < ncomp; ++i) values[i][node] = x[i];
  }

  out.components.reserve(ncomp);
  for (auto& v : values) out.components.emplace_back(grid, std::move(v));
  return out;
}

/// max over interior nodes of ||central difference - rhs||_F / (1 + ||rhs||_F),
/// with the norms taken over the whole stacked state.
template <class Rhs, class Projection>
double residual(const std::vector<MatrixTrajectory>& trajectory, const OdeProblem<Rhs, Projection>& problem) {
  if (trajectory.size() != problem.boundary.size()) throw GridMismatch("residual: component count mismatch");
  if (trajectory.empty()) return 0.0;
  const TimeGrid grid = trajectory.front().grid();
  for (const auto& c : trajectory) {
    if (!(c.grid() == grid) || c.size() != grid.nodes()) throw GridMismatch("residual: components on different grids");
  }
  const double h = grid.h();
  double worst = 0.0;
  MatrixStack x(trajectory.size());
  for (std::size_t k = 1; k + 1 < grid.nodes(); ++k) {
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = trajectory[i][k];
    const MatrixStack f = problem.rhs(grid.t(k), x);
    double diff2 = 0.0;
    double rhs2 = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const Eigen::MatrixXd cd = (trajectory[i][k + 1] - trajectory[i][k - 1]) / (2.0 * h);
      diff2 += (cd - f[i]).squaredNorm();
      rhs2 += f[i].squaredNorm();
    }
    worst = std::max(worst, std::sqrt(diff2) / (1.0 + std::sqrt(rhs2)));
  }
  return worst;
}

}  // namespace lqmfg
