#pragma once

#include <Eigen/Dense>

#include <charconv>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "lqmfg/errors.hpp"
#include "lqmfg/trajectory.hpp"

namespace lqmfg {

/// Shortest decimal text that round-trips to the same double.
inline std::string format_double(double x) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

/// Column names for a rows x cols matrix series: `name` when 1x1, else name_ij (row-major).
inline std::vector<std::string> matrix_columns(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
  if (rows == 1 && cols == 1) return {name};
  std::vector<std::string> out;
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) out.push_back(name + "_" + std::to_string(i) + std::to_string(j));
  return out;
}

/// Time-indexed table: first column `t`, then one block of columns per series.
class CsvTable {
 public:
  explicit CsvTable(TimeGrid grid) : grid_(grid) {}

  /// Column-per-node series (rows x nodes), e.g. a state path.
  void add_series(const std::string& name, const Eigen::MatrixXd& values) {
    if (values.cols() != static_cast<Eigen::Index>(grid_.nodes())) throw GridMismatch("csv: series '" + name + "' length");
    for (const auto& col : matrix_columns(name, values.rows(), 1)) names_.push_back(col);
    blocks_.push_back(values);
  }

  void add_trajectory(const std::string& name, const MatrixTrajectory& tr) {
    if (!(tr.grid() == grid_)) throw GridMismatch("csv: trajectory '" + name + "' grid");
    const Eigen::Index r = tr.rows(), c = tr.cols();
    Eigen::MatrixXd flat(r * c, static_cast<Eigen::Index>(grid_.nodes()));
    for (std::size_t k = 0; k < grid_.nodes(); ++k)
      for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) flat(i * c + j, static_cast<Eigen::Index>(k)) = tr[k](i, j);
    for (const auto& col : matrix_columns(name, r, c)) names_.push_back(col);
    blocks_.push_back(std::move(flat));
  }

  const std::vector<std::string>& columns() const { return names_; }

  void write(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ParseError("cannot write '" + path + "'");
    out << "t";
    for (const auto& n : names_) out << ',' << n;
    out << '\n';
    for (std::size_t k = 0; k < grid_.nodes(); ++k) {
      out << format_double(grid_.t(k));
      for (const auto& b : blocks_)
        for (Eigen::Index i = 0; i < b.rows(); ++i) out << ',' << format_double(b(i, static_cast<Eigen::Index>(k)));
      out << '\n';
    }
  }

 private:
  TimeGrid grid_;
  std::vector<std::string> names_;
  std::vector<Eigen::MatrixXd> blocks_;
};

/// Plain row table with a fixed header.
inline void write_rows(const std::string& path, const std::vector<std::string>& header,
                       const std::vector<std::vector<std::string>>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot write '" + path + "'");
  for (std::size_t j = 0; j < header.size(); ++j) out << (j ? "," : "") << header[j];
  out << '\n';
  for (const auto& r : rows) {
    if (r.size() != header.size()) throw DimensionError("csv: row width differs from header in '" + path + "'");
    for (std::size_t j = 0; j < r.size(); ++j) out << (j ? "," : "") << r[j];
    out << '\n';
  }
}

}  // namespace lqmfg
