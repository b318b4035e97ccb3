#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <fstream>
#include <sstream>
#include <string>

#include "lqmfg/errors.hpp"
#include "lqmfg/model.hpp"

namespace lqmfg {

struct LoadOptions {
  // Reject configs whose coefficients violate (A1)-(A4) with a ValueError.
  bool enforce_assumptions = true;
};

namespace detail {

using nlohmann::json;

inline const json& require(const json& obj, const char* section, const char* key) {
  if (!obj.is_object() || !obj.contains(key)) {
    throw ParseError(std::string("missing key '") + key + "' in '" + section + "'");
  }
  return obj.at(key);
}

inline double parse_number(const json& v, const std::string& where) {
  if (!v.is_number()) throw ParseError(where + ": expected a number");
  return v.get<double>();
}

// Accepts a scalar (1x1 only), a flat array (column vector) or a row-major nested array.
inline Eigen::MatrixXd parse_matrix(const json& v, const std::string& where) {
  if (v.is_number()) {
    Eigen::MatrixXd m(1, 1);
    m(0, 0) = v.get<double>();
    return m;
  }
  if (!v.is_array() || v.empty()) throw ParseError(where + ": expected number or non-empty array");
  if (!v.front().is_array()) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(v.size()), 1);
    for (std::size_t i = 0; i < v.size(); ++i) m(static_cast<Eigen::Index>(i), 0) = parse_number(v[i], where);
    return m;
  }
  const std::size_t rows = v.size();
  const std::size_t cols = v.front().size();
  if (cols == 0) throw ParseError(where + ": empty row");
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (std::size_t i = 0; i < rows; ++i) {
    if (!v[i].is_array() || v[i].size() != cols) throw ParseError(where + ": ragged rows");
    for (std::size_t j = 0; j < cols; ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = parse_number(v[i][j], where);
  }
  return m;
}

inline Eigen::MatrixXd matrix_field(const json& obj, const char* section, const char* key) {
  return parse_matrix(require(obj, section, key), std::string(section) + "." + key);
}

inline Eigen::VectorXd vector_field(const json& obj, const char* section, const char* key) {
  Eigen::MatrixXd m = matrix_field(obj, section, key);
  if (m.cols() != 1) throw DimensionError(std::string(section) + "." + key + ": expected a vector");
  return m.col(0);
}

inline json matrix_to_json(const Eigen::MatrixXd& m, bool scalar_ok) {
  if (scalar_ok && m.rows() == 1 && m.cols() == 1) return m(0, 0);
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline json vector_to_json(const Eigen::VectorXd& v, bool scalar_ok) {
  if (scalar_ok && v.size() == 1) return v(0);
  json arr = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
  return arr;
}

}  // namespace detail

/// Builds ModelParams from a parsed config document.
inline ModelParams params_from_json(const nlohmann::json& doc, const LoadOptions& opts = {}) {
  using detail::matrix_field;
  using detail::require;
  using detail::vector_field;
  if (!doc.is_object()) throw ParseError("config root must be an object");

  ModelParams p;
  const auto& dims = require(doc, "config", "dimensions");
  auto dim = [&](const char* key) {
    const auto& v = require(dims, "dimensions", key);
    if (!v.is_number_integer()) throw ParseError(std::string("dimensions.") + key + ": expected an integer");
    return v.get<int>();
  };
  p.dims = {dim("n"), dim("mL"), dim("mF"), dim("nv")};

  const auto& ld = require(doc, "config", "leader_dynamics");
  p.c.A = matrix_field(ld, "leader_dynamics", "A");
  p.c.B = matrix_field(ld, "leader_dynamics", "B");
  p.c.F = matrix_field(ld, "leader_dynamics", "F");
  p.c.H = matrix_field(ld, "leader_dynamics", "H");
  p.c.E = matrix_field(ld, "leader_dynamics", "E");
  p.c.C = matrix_field(ld, "leader_dynamics", "C");
  p.c.D = matrix_field(ld, "leader_dynamics", "D");
  p.xi = vector_field(ld, "leader_dynamics", "xi");

  const auto& fd = require(doc, "config", "follower_dynamics");
  p.c.At = matrix_field(fd, "follower_dynamics", "A");
  p.c.Bt = matrix_field(fd, "follower_dynamics", "B");
  p.c.Ft = matrix_field(fd, "follower_dynamics", "F");
  p.c.Ht = matrix_field(fd, "follower_dynamics", "H");
  p.c.Sigma = matrix_field(fd, "follower_dynamics", "sigma");
  p.x0init = vector_field(fd, "follower_dynamics", "x");

  const auto& lc = require(doc, "config", "leader_cost");
  p.c.Q = matrix_field(lc, "leader_cost", "Q");
  p.c.Gamma1 = matrix_field(lc, "leader_cost", "Gamma1");
  p.c.R0 = matrix_field(lc, "leader_cost", "R0");
  p.c.R1 = matrix_field(lc, "leader_cost", "R1");
  p.c.R2 = matrix_field(lc, "leader_cost", "R2");
  p.c.Gamma2 = matrix_field(lc, "leader_cost", "Gamma2");
  p.c.G = matrix_field(lc, "leader_cost", "G");

  const auto& fc = require(doc, "config", "follower_cost");
  p.c.Qt = matrix_field(fc, "follower_cost", "Q");
  p.c.Gamma1t = matrix_field(fc, "follower_cost", "Gamma1");
  p.c.R0t = matrix_field(fc, "follower_cost", "R0");
  p.c.R1t = matrix_field(fc, "follower_cost", "R1");
  p.c.Gamma2t = matrix_field(fc, "follower_cost", "Gamma2");
  p.c.Gt = matrix_field(fc, "follower_cost", "G");

  p.T = detail::parse_number(require(doc, "config", "horizon"), "horizon");
  p.gamma = detail::parse_number(require(doc, "config", "gamma"), "gamma");
  const auto& gs = require(doc, "config", "grid_steps");
  if (!gs.is_number_integer()) throw ParseError("grid_steps: expected an integer");
  p.grid_steps = gs.get<int>();
  if (doc.contains("positivity_delta")) p.positivity_delta = detail::parse_number(doc["positivity_delta"], "positivity_delta");

  p.check_well_formed();
  if (opts.enforce_assumptions) {
    const ValidationReport report = validate_assumptions(p);
    if (!report.all_passed()) {
      std::string msg = "standing assumptions violated:";
      for (const auto& c : report.checks)
        if (!c.passed) msg += " " + c.assumption + " " + c.check + " (margin " + std::to_string(c.margin) + ");";
      throw ValueError(msg);
    }
  }
  return p;
}

inline ModelParams load_config(const std::string& path, const LoadOptions& opts = {}) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open config file '" + path + "'");
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("malformed config '" + path + "': " + e.what());
  }
  return params_from_json(doc, opts);
}

inline nlohmann::json params_to_json(const ModelParams& p) {
  using detail::matrix_to_json;
  using detail::vector_to_json;
  using nlohmann::json;
  const bool scalar = p.dims.n == 1 && p.dims.mL == 1 && p.dims.mF == 1 && p.dims.nv == 1;
  const Coefficients& c = p.c;
  json doc;
  doc["dimensions"] = {{"n", p.dims.n}, {"mL", p.dims.mL}, {"mF", p.dims.mF}, {"nv", p.dims.nv}};
  doc["leader_dynamics"] = {{"A", matrix_to_json(c.A, scalar)}, {"B", matrix_to_json(c.B, scalar)},
                            {"F", matrix_to_json(c.F, scalar)}, {"H", matrix_to_json(c.H, scalar)},
                            {"E", matrix_to_json(c.E, scalar)}, {"C", matrix_to_json(c.C, scalar)},
                            {"D", matrix_to_json(c.D, scalar)}, {"xi", vector_to_json(p.xi, scalar)}};
  doc["follower_dynamics"] = {{"A", matrix_to_json(c.At, scalar)}, {"B", matrix_to_json(c.Bt, scalar)},
                              {"F", matrix_to_json(c.Ft, scalar)}, {"H", matrix_to_json(c.Ht, scalar)},
                              {"sigma", matrix_to_json(c.Sigma, scalar)}, {"x", vector_to_json(p.x0init, scalar)}};
  doc["leader_cost"] = {{"Q", matrix_to_json(c.Q, scalar)},   {"Gamma1", matrix_to_json(c.Gamma1, scalar)},
                        {"R0", matrix_to_json(c.R0, scalar)}, {"R1", matrix_to_json(c.R1, scalar)},
                        {"R2", matrix_to_json(c.R2, scalar)}, {"Gamma2", matrix_to_json(c.Gamma2, scalar)},
                        {"G", matrix_to_json(c.G, scalar)}};
  doc["follower_cost"] = {{"Q", matrix_to_json(c.Qt, scalar)},   {"Gamma1", matrix_to_json(c.Gamma1t, scalar)},
                          {"R0", matrix_to_json(c.R0t, scalar)}, {"R1", matrix_to_json(c.R1t, scalar)},
                          {"Gamma2", matrix_to_json(c.Gamma2t, scalar)}, {"G", matrix_to_json(c.Gt, scalar)}};
  doc["horizon"] = p.T;
  doc["gamma"] = p.gamma;
  doc["grid_steps"] = p.grid_steps;
  doc["positivity_delta"] = p.positivity_delta;
  return doc;
}

inline void save_config(const ModelParams& p, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write config file '" + path + "'");
  out << params_to_json(p).dump(2) << '\n';
}

}  // namespace lqmfg
