#pragma once

#include <Eigen/Dense>

#include <limits>
#include <string>

#include "lqmfg/errors.hpp"

namespace lqmfg {

inline Eigen::MatrixXd symmetrized(const Eigen::MatrixXd& m) { return 0.5 * (m + m.transpose()); }

/// Smallest eigenvalue of the symmetric part.
inline double lambda_min(const Eigen::MatrixXd& m) {
  if (m.size() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(symmetrized(m), Eigen::EigenvaluesOnly);
  return es.eigenvalues()(0);
}

/// Dense LU with a reciprocal-condition check. `what` names the matrix in errors.
class CheckedLu {
 public:
  static constexpr double kMaxCondition = 1e12;

  CheckedLu(const Eigen::MatrixXd& m, const char* what) : lu_(m) {
    const double rc = lu_.rcond();
    condition_ = rc > 0.0 ? 1.0 / rc : std::numeric_limits<double>::infinity();
    if (!(condition_ <= kMaxCondition)) {
      throw SingularGain(std::string(what) + " is singular or ill-conditioned (cond ~ " + std::to_string(condition_) + ")");
    }
  }

  template <class Rhs>
  Eigen::MatrixXd solve(const Rhs& rhs) const { return lu_.solve(rhs); }
  Eigen::MatrixXd inverse() const { return lu_.inverse(); }
  double condition() const { return condition_; }

 private:
  Eigen::PartialPivLU<Eigen::MatrixXd> lu_;
  double condition_ = 0.0;
};

}  // namespace lqmfg
