#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "lqmfg/errors.hpp"

namespace lqmfg {

/// Uniform grid t_k = k*T/M on [0, T].
class TimeGrid {
 public:
  TimeGrid() = default;
  TimeGrid(double horizon, int steps) : horizon_(horizon), steps_(steps) {
    if (!(horizon > 0.0) || !std::isfinite(horizon)) throw ValueError("TimeGrid: horizon must be finite and > 0");
    if (steps < 1) throw ValueError("TimeGrid: steps must be >= 1");
  }

  double horizon() const { return horizon_; }
  int steps() const { return steps_; }
  std::size_t nodes() const { return static_cast<std::size_t>(steps_) + 1; }
  double h() const { return horizon_ / steps_; }

  // Endpoint is returned exactly so that t(M) == T bitwise.
  double t(std::size_t k) const {
    if (k >= static_cast<std::size_t>(steps_)) return horizon_;
    return horizon_ * (static_cast<double>(k) / steps_);
  }

  /// A grid with `factor` times as many steps on the same horizon.
  TimeGrid refined(int factor) const { return TimeGrid(horizon_, steps_ * factor); }

  friend bool operator==(const TimeGrid& a, const TimeGrid& b) {
    return a.horizon_ == b.horizon_ && a.steps_ == b.steps_;
  }

 private:
  double horizon_ = 1.0;
  int steps_ = 1;
};

/// Matrix-valued function sampled on every node of a TimeGrid.
class MatrixTrajectory {
 public:
  MatrixTrajectory() = default;
  MatrixTrajectory(TimeGrid grid, Eigen::Index rows, Eigen::Index cols)
      : grid_(grid), values_(grid.nodes(), Eigen::MatrixXd::Zero(rows, cols)) {}
  MatrixTrajectory(TimeGrid grid, std::vector<Eigen::MatrixXd> values)
      : grid_(grid), values_(std::move(values)) {
    if (values_.size() != grid_.nodes()) throw GridMismatch("MatrixTrajectory: one value per grid node required");
  }

  const TimeGrid& grid() const { return grid_; }
  std::size_t size() const { return values_.size(); }
  Eigen::Index rows() const { return values_.empty() ? 0 : values_.front().rows(); }
  Eigen::Index cols() const { return values_.empty() ? 0 : values_.front().cols(); }

  const Eigen::MatrixXd& operator[](std::size_t k) const { return values_[k]; }
  Eigen::MatrixXd& operator[](std::size_t k) { return values_[k]; }
  const Eigen::MatrixXd& front() const { return values_.front(); }
  const Eigen::MatrixXd& back() const { return values_.back(); }
  const std::vector<Eigen::MatrixXd>& values() const { return values_; }

  /// Piecewise-linear interpolation; O(h^2) between nodes, exact on nodes.
  Eigen::MatrixXd operator()(double t) const {
    const double h = grid_.h();
    const double s = std::clamp(t / h, 0.0, static_cast<double>(grid_.steps()));
    auto k = static_cast<std::size_t>(std::floor(s));
    if (k >= static_cast<std::size_t>(grid_.steps())) return values_.back();
    const double w = s - static_cast<double>(k);
    if (w == 0.0) return values_[k];
    return (1.0 - w) * values_[k] + w * values_[k + 1];
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](const Eigen::MatrixXd& m) { return m.allFinite(); });
  }

  /// max_k ||a_k - b_k||_F
  friend double max_distance(const MatrixTrajectory& a, const MatrixTrajectory& b) {
    if (!(a.grid_ == b.grid_)) throw GridMismatch("max_distance: trajectories live on different grids");
    double d = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) d = std::max(d, (a[k] - b[k]).norm());
    return d;
  }

 private:
  TimeGrid grid_;
  std::vector<Eigen::MatrixXd> values_;
};

}  // namespace lqmfg
