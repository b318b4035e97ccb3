#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lqmfg/lqmfg.hpp"
#include "lqmfg/manifest.hpp"

using nlohmann::json;
using namespace lqmfg;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;
constexpr int kExitModule = 3;

struct Globals {
  std::string config = LQMFG_DEFAULT_CONFIG;
  std::string out = "lqmfg-out";
  std::uint64_t seed = 42;
  unsigned threads = 0;
  int grid_steps = 0;  // 0: keep the config value
};

// LQMFG_<FLAG> environment variables take precedence over the matching flags.
void apply_env(Globals& g) {
  auto env = [](const char* name) -> std::optional<std::string> {
    const char* v = std::getenv(name);
    if (v == nullptr || *v == '\0') return std::nullopt;
    return std::string(v);
  };
  try {
    if (auto v = env("LQMFG_CONFIG")) g.config = *v;
    if (auto v = env("LQMFG_OUT")) g.out = *v;
    if (auto v = env("LQMFG_SEED")) g.seed = std::stoull(*v);
    if (auto v = env("LQMFG_THREADS")) g.threads = static_cast<unsigned>(std::stoul(*v));
    if (auto v = env("LQMFG_GRID_STEPS")) g.grid_steps = std::stoi(*v);
  } catch (const std::exception&) {
    throw ParseError("malformed LQMFG_* environment override");
  }
}

/// A named pass/fail entry of summary.json.
struct Check {
  std::string name;
  double value;
  double threshold;
  bool passed;
  std::string detail;
};

json checks_json(const std::vector<Check>& cs) {
  json a = json::array();
  for (const auto& c : cs) {
    json e = {{"name", c.name}, {"value", c.value}, {"threshold", c.threshold}, {"passed", c.passed}};
    if (!c.detail.empty()) e["detail"] = c.detail;
    a.push_back(e);
  }
  return a;
}

void print_checks(const std::vector<Check>& cs) {
  for (const auto& c : cs)
    std::printf("  [%s] %-34s value=%-12.6g threshold=%-10.3g %s\n", c.passed ? "ok" : "FAIL", c.name.c_str(), c.value,
                c.threshold, c.detail.c_str());
}

/// Loads the config and applies grid/gamma overrides; the effective config is
/// what gets stored next to the manifest.
ModelParams load_effective(const Globals& g, std::optional<double> gamma) {
  ModelParams p = load_config(g.config);
  if (g.grid_steps > 0) p.grid_steps = g.grid_steps;
  if (gamma) p.gamma = *gamma;
  p.check_well_formed();
  return p;
}

void write_json(RunManifest& m, const std::string& file, const json& doc) {
  std::ofstream out(m.path(file), std::ios::binary);
  out << doc.dump(2) << '\n';
  m.add_output(file);
}

// ---------------------------------------------------------------------------
// Stage: gamma-hat

struct GammaStage {
  GammaHatResult res;
  std::vector<Check> checks;
};

GammaStage run_gamma_hat(const ModelParams& p, double tol) {
  GammaStage s{estimate_gamma_hat(p, tol), {}};
  const auto& r = s.res;
  if (r.no_escape_found) {
    s.checks.push_back({"gamma_hat_flagged_zero", 0.0, 0.0, true, "concave for every tested gamma"});
  } else {
    s.checks.push_back({"gamma_bracket_width", r.hi - r.lo, 1e-3, r.hi - r.lo <= 1e-3, ""});
    const auto lo = solve_concavity(p, r.lo), hi = solve_concavity(p, r.hi);
    s.checks.push_back({"gamma_bracket_escape_at_lo", lo.solvable() ? 0.0 : 1.0, 1.0, !lo.solvable(), ""});
    s.checks.push_back({"gamma_bracket_solvable_at_hi", hi.solvable() ? 1.0 : 0.0, 1.0, hi.solvable(), ""});
  }
  s.checks.push_back({"gamma_hat_below_gamma", r.gamma_hat, p.gamma, r.gamma_hat < p.gamma,
                      "gamma_hat must lie below the configured gamma"});
  s.checks.push_back({"gamma_trace_monotone", trace_is_monotone(r.trace) ? 1.0 : 0.0, 1.0, trace_is_monotone(r.trace), ""});
  return s;
}

void write_gamma_trace(const GammaHatResult& r, const std::string& path) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& t : r.trace)
    rows.push_back({format_double(t.gamma), t.solvable ? "1" : "0", std::isnan(t.t_escape) ? "" : format_double(t.t_escape)});
  write_rows(path, {"gamma", "solvable", "t_escape"}, rows);
}

json gamma_json(const GammaHatResult& r) {
  return {{"gamma_hat", r.gamma_hat}, {"lo", r.lo}, {"hi", r.hi}, {"no_escape_found", r.no_escape_found},
          {"trials", r.trace.size()}};
}

// ---------------------------------------------------------------------------
// Stage: leader

struct LeaderStage {
  ConcavityCertificate K;
  BlockRiccatiSolution sol;
  LeaderGains gains;
  double V0 = 0.0;
  std::vector<Check> checks;
  json summary;
};

LeaderStage run_leader(const ModelParams& p) {
  LeaderStage s;
  s.K = solve_concavity(p, p.gamma);
  s.sol = solve_block_riccati(p, p.gamma);  // throws EscapeError
  s.gains = leader_gains(s.sol, p);
  s.V0 = leader_value(s.sol, p);
  const double agap = assembled_form_gap(p, s.sol);
  const double stat = stationarity_residual(s.sol, s.gains, p);
  if (s.K.solvable()) {
    s.checks.push_back({"concavity_solvable", 1.0, 1.0, true, ""});
    s.checks.push_back({"concavity_residual", s.K.residual, 1e-6, s.K.residual <= 1e-6, ""});
  } else {
    std::ostringstream d;
    d << "Escape: concavity equation blows up at t=" << s.K.escape->t_escape << " (norm " << s.K.escape->norm << ")";
    s.checks.push_back({"concavity_solvable", 0.0, 1.0, false, d.str()});
  }
  s.checks.push_back({"block_riccati_residual", s.sol.residual, 1e-6, s.sol.residual <= 1e-6, ""});
  s.checks.push_back({"transpose_coupling", s.sol.max_transpose_gap, 1e-8, s.sol.max_transpose_gap <= 1e-8, ""});
  s.checks.push_back({"assembled_form_gap", agap, 1e-8, agap <= 1e-8, ""});
  s.checks.push_back({"stationarity_residual", stat, 1e-10, stat <= 1e-10, ""});
  s.summary = {{"gamma", p.gamma},
               {"V0", s.V0},
               {"concavity_solvable", s.K.solvable()},
               {"concavity_residual", s.K.solvable() ? json(s.K.residual) : json(nullptr)},
               {"concavity_escape_t", s.K.escape ? json(s.K.escape->t_escape) : json(nullptr)},
               {"block_residual", s.sol.residual},
               {"max_transpose_gap", s.sol.max_transpose_gap},
               {"assembled_form_gap", agap},
               {"stationarity_residual", stat},
               {"max_condition_R0_DtP1D", s.sol.max_condition}};
  return s;
}

void write_riccati(const BlockRiccatiSolution& sol, const std::string& path) {
  CsvTable t(sol.grid());
  t.add_trajectory("P1", sol.P1);
  t.add_trajectory("Pi1", sol.Pi1);
  t.add_trajectory("P2", sol.P2);
  t.add_trajectory("Pi2", sol.Pi2);
  t.write(path);
}

void write_gains(const LeaderGains& g, const std::string& path) {
  CsvTable t(g.grid());
  t.add_trajectory("Theta11", g.Theta11);
  t.add_trajectory("Theta12", g.Theta12);
  t.add_trajectory("Theta21", g.Theta21);
  t.add_trajectory("Theta22", g.Theta22);
  t.add_trajectory("V1", g.V1);
  t.add_trajectory("V2", g.V2);
  t.write(path);
}

void write_leader_outputs(const LeaderStage& s, RunManifest& m) {
  write_riccati(s.sol, m.path("riccati_P.csv"));
  m.add_output("riccati_P.csv");
  write_gains(s.gains, m.path("leader_gains.csv"));
  m.add_output("leader_gains.csv");
  if (s.K.solvable()) {
    CsvTable t(s.K.K->grid());
    t.add_trajectory("K", *s.K.K);
    t.write(m.path("concavity_K.csv"));
    m.add_output("concavity_K.csv");
  }
}

// ---------------------------------------------------------------------------
// Stage: incentive

struct IncentiveStage {
  std::shared_ptr<const IncentiveResult> res;
  std::optional<SigmaPhiPsiSolution> spp;
  std::optional<FollowerGains> fg;
  double match_gap = 0.0;
  double match_threshold = 0.0;
  double max_abs_L = 0.0;
  std::vector<Check> checks;
  json summary;
};

IncentiveStage run_incentive(const ModelParams& p, const LeaderStage& leader) {
  IncentiveStage s;
  s.res = std::make_shared<IncentiveResult>(solve_cc_incentive_report(p, leader.sol, {}));
  const auto& r = *s.res;
  for (std::size_t k = 0; k < r.inc.L.size(); ++k) s.max_abs_L = std::max(s.max_abs_L, r.inc.L[k].cwiseAbs().maxCoeff());
  s.checks.push_back({"matching_residual", r.dt.max_matching_residual, 1e-6, r.dt.max_matching_residual <= 1e-6, ""});
  s.checks.push_back({"matching_within_tol_fraction", r.dt.fraction_within_tol, 0.99, r.dt.fraction_within_tol >= 0.99, ""});
  s.checks.push_back({"delta_theta_ode_residual", r.dt.ode_residual, 1e-5, r.dt.ode_residual <= 1e-5, ""});
  s.summary = {{"max_matching_residual", r.dt.max_matching_residual},
               {"fraction_within_newton_tol", r.dt.fraction_within_tol},
               {"delta_theta_ode_residual", r.dt.ode_residual},
               {"converged", r.converged},
               {"max_abs_L", s.max_abs_L},
               {"L_T", r.inc.L.back()(0, 0)},
               {"L_0", r.inc.L.front()(0, 0)}};
  if (!r.converged) return s;
  s.spp = integrate_sigma_phi_psi(p, leader.sol, r.dt.stage_L);
  // relation check without throwing, so the gap is reported either way
  double th = 0.0, de = 0.0;
  for (std::size_t k = 0; k < r.dt.Delta.size(); ++k) {
    th = std::max(th, (r.dt.Theta[k] - s.spp->Psi[k]).norm() / (1.0 + r.dt.Theta[k].norm()));
    de = std::max(de, (r.dt.Delta[k] - s.spp->Sigma[k] - s.spp->Phi[k]).norm() / (1.0 + r.dt.Delta[k].norm()));
  }
  s.checks.push_back({"relation_theta_psi", th, 1e-6, th <= 1e-6, ""});
  s.checks.push_back({"relation_delta_sigma_phi", de, 1e-6, de <= 1e-6, ""});
  s.fg = follower_gains(p, r.dt, *s.spp, r.inc);
  s.match_gap = incentive_match(leader.gains, *s.fg);
  s.match_threshold = 1e-4 * (1.0 + follower_team_gain_scale(leader.gains));
  s.checks.push_back({"incentive_match_gap", s.match_gap, s.match_threshold, s.match_gap <= s.match_threshold, ""});
  s.summary["relation_theta_psi"] = th;
  s.summary["relation_delta_sigma_phi"] = de;
  // the leader's per-follower control carries L (u1 - Theta21 x0 - Theta22 m), so the
  // gain mismatch is multiplied by |L| in the realized population dynamics
  double amp = 0.0;
  for (std::size_t k = 0; k < r.inc.L.size(); ++k) {
    const double gk = std::sqrt((s.fg->Gx0bar[k] - leader.gains.Theta21[k]).squaredNorm() +
                                (s.fg->Gmbar[k] - leader.gains.Theta22[k]).squaredNorm());
    amp = std::max(amp, r.inc.L[k].norm() * gk);
  }
  s.summary["incentive_match_gap"] = s.match_gap;
  s.summary["L_times_gain_mismatch"] = amp;
  s.summary["incentive_match_threshold"] = s.match_threshold;
  return s;
}

void write_incentive_matrices(const IncentiveResult& r, const std::string& path) {
  CsvTable t(r.inc.L.grid());
  t.add_trajectory("L", r.inc.L);
  t.add_trajectory("zeta", r.inc.zeta);
  t.add_trajectory("eta", r.inc.eta);
  t.write(path);
}

void write_delta_theta(const IncentiveResult& r, const std::string& path) {
  CsvTable t(r.dt.Delta.grid());
  t.add_trajectory("Delta", r.dt.Delta);
  t.add_trajectory("Theta", r.dt.Theta);
  t.write(path);
}

void write_incentive_outputs(const IncentiveStage& s, RunManifest& m) {
  const auto& r = *s.res;
  write_incentive_matrices(r, m.path("incentive_L_zeta_eta.csv"));
  m.add_output("incentive_L_zeta_eta.csv");
  write_delta_theta(r, m.path("delta_theta.csv"));
  m.add_output("delta_theta.csv");
  {
    CsvTable t(r.dt.matching_residual.grid());
    Eigen::MatrixXd res(2, static_cast<Eigen::Index>(r.dt.matching_residual.size()));
    for (std::size_t k = 0; k < r.dt.matching_residual.size(); ++k) res.col(static_cast<Eigen::Index>(k)) = r.dt.matching_residual[k];
    t.add_series("r1", res.row(0));
    t.add_series("r2", res.row(1));
    t.write(m.path("matching_residual.csv"));
    m.add_output("matching_residual.csv");
  }
  if (s.spp) {
    CsvTable t(s.spp->Sigma.grid());
    t.add_trajectory("Sigma", s.spp->Sigma);
    t.add_trajectory("Phi", s.spp->Phi);
    t.add_trajectory("Psi", s.spp->Psi);
    t.write(m.path("sigma_phi_psi.csv"));
    m.add_output("sigma_phi_psi.csv");
  }
  if (s.fg) {
    CsvTable t(s.fg->grid());
    t.add_trajectory("Gx0bar", s.fg->Gx0bar);
    t.add_trajectory("Gmbar", s.fg->Gmbar);
    t.add_trajectory("Gxi", s.fg->Gxi);
    t.add_trajectory("Gx0", s.fg->Gx0);
    t.add_trajectory("Gm", s.fg->Gm);
    t.write(m.path("follower_gains.csv"));
    m.add_output("follower_gains.csv");
  }
}

// ---------------------------------------------------------------------------
// Stage: simulation

struct SimOptions {
  int N = 100;
  int paths = 500;
  PopulationMode mode = PopulationMode::incentive;
  Disturbance disturbance = Disturbance::worst;
  int em_substeps = 1;
  bool saddle = true;
};

struct SimStage {
  PathBundle limit_fig, pop_fig;
  CostReport limit_cost, pop_cost;
  std::optional<SaddleReport> saddle;
  std::vector<Check> checks;
  json summary;
};

SimStage run_simulation(const ModelParams& p, const LeaderStage& leader, const IncentiveStage* inc, const SimOptions& o,
                        const Globals& g) {
  SimStage s;
  SimConfig cfg;
  cfg.N = o.N;
  cfg.master_seed = g.seed;
  cfg.threads = g.threads;
  cfg.em_substeps = o.em_substeps;
  cfg.disturbance = o.disturbance;
  cfg.mode = o.mode;
  const FollowerGains* fg = inc != nullptr && inc->fg ? &*inc->fg : nullptr;
  const IncentiveMatrices* im = inc != nullptr ? &inc->res->inc : nullptr;
  if (o.mode == PopulationMode::incentive && fg == nullptr)
    throw ValueError("incentive-mode population needs a converged incentive solution");

  cfg.n_paths = 1;
  s.limit_fig = simulate_limit(p, leader.gains, cfg);
  s.pop_fig = simulate_population(p, leader.gains, fg, im, cfg);

  cfg.n_paths = o.paths;
  cfg.store_series = false;
  s.limit_cost = eval_costs(simulate_limit(p, leader.gains, cfg), leader.V0);
  s.pop_cost = eval_costs(simulate_population(p, leader.gains, fg, im, cfg), leader.V0);

  const double z = std::abs(s.limit_cost.J0.mean - leader.V0) / s.limit_cost.J0.stderr_;
  if (o.disturbance == Disturbance::worst && o.em_substeps >= 1) {
    s.checks.push_back({"limit_J0_vs_V0_zscore", z, 3.0, z <= 3.0, ""});
    s.checks.push_back({"limit_J0_stderr", s.limit_cost.J0.stderr_, 0.02 * (std::abs(leader.V0) + 1.0),
                        s.limit_cost.J0.stderr_ <= 0.02 * (std::abs(leader.V0) + 1.0), ""});
  }
  auto ms = [](const MeanStderr& m) { return json{{"mean", m.mean}, {"stderr", m.stderr_}, {"units", m.units}}; };
  s.summary = {{"N", o.N},
               {"paths", o.paths},
               {"seed", g.seed},
               {"mode", o.mode == PopulationMode::team ? "team" : "incentive"},
               {"disturbance", o.disturbance == Disturbance::worst ? "worst" : "zero"},
               {"V0", leader.V0},
               {"limit_J0", ms(s.limit_cost.J0)},
               {"population_J0", ms(s.pop_cost.J0)},
               {"population_follower_cost", ms(s.pop_cost.Jf)}};
  if (inc != nullptr && inc->fg) s.summary["incentive_match_gap"] = inc->match_gap;

  if (o.saddle) {
    SimConfig sc = cfg;
    sc.n_paths = o.paths;
    s.saddle = saddle_check(p, leader.sol, leader.gains, sc);
    json entries = json::array();
    for (const auto& e : s.saddle->entries)
      entries.push_back({{"target", e.target == Perturbation::Target::control ? "control" : "disturbance"},
                         {"shape", e.shape == Perturbation::Shape::constant ? "constant" : "bump"},
                         {"sign", e.sign},
                         {"epsilon", e.epsilon},
                         {"margin", e.margin},
                         {"stderr", e.stderr_},
                         {"expected", e.expected},
                         {"ok", e.ok}});
    s.summary["saddle"] = {{"entries", entries}, {"u_margin_ratio", s.saddle->u_ratio}, {"all_ok", s.saddle->all_ok}};
    s.checks.push_back({"saddle_sign_constraints", s.saddle->all_ok ? 1.0 : 0.0, 1.0, s.saddle->all_ok, ""});
    s.checks.push_back({"saddle_quadratic_ratio", s.saddle->u_ratio, 25.0,
                        s.saddle->u_ratio >= 20.0 && s.saddle->u_ratio <= 30.0, "accepted range [20, 30]"});
  }
  return s;
}

void write_limit_states(const PathBundle& b, const std::string& path) {
  CsvTable t(b.grid);
  t.add_series("x0", b.paths[0].x0);
  t.add_series("m", b.paths[0].m);
  t.write(path);
}

void write_population_states(const PathBundle& b, const std::string& path) {
  CsvTable t(b.grid);
  const auto& r = b.paths[0];
  t.add_series("x0", r.x0);
  t.add_series("m", r.m);
  t.add_series("xN", r.xN);
  for (std::size_t j = 0; j < b.stored_agents.size(); ++j) t.add_series("x_" + std::to_string(b.stored_agents[j]), r.xi[j]);
  t.write(path);
}

/// Individual u1i, their average, the limiting average u1+ (follower side) and the
/// leader's desired u1* along the limit path.
void write_follower_controls(const PathBundle& pop, const PathBundle& lim, const LeaderGains& g, const FollowerGains* fg,
                             const std::string& path) {
  CsvTable t(pop.grid);
  const auto& r = pop.paths[0];
  for (std::size_t j = 0; j < pop.stored_agents.size(); ++j) t.add_series("u1_" + std::to_string(pop.stored_agents[j]), r.u1i[j]);
  t.add_series("u1N", r.u1);
  const auto& l = lim.paths[0];
  const auto nodes = static_cast<Eigen::Index>(pop.grid.nodes());
  Eigen::MatrixXd star(l.u1.rows(), nodes), plus(l.u1.rows(), nodes);
  for (Eigen::Index k = 0; k < nodes; ++k) {
    const auto kk = static_cast<std::size_t>(k);
    star.col(k) = g.Theta21[kk] * l.x0.col(k) + g.Theta22[kk] * l.m.col(k);
    plus.col(k) = fg != nullptr ? Eigen::VectorXd(fg->Gx0bar[kk] * l.x0.col(k) + fg->Gmbar[kk] * l.m.col(k)) : star.col(k);
  }
  t.add_series("u1bar_plus", plus);
  t.add_series("u1bar_star", star);
  t.write(path);
}

void write_costs(const SimStage& s, const std::string& path) {
  auto row = [](const std::string& sys, const std::string& cost, const MeanStderr& m) {
    return std::vector<std::string>{sys, cost, format_double(m.mean), format_double(m.stderr_), std::to_string(m.units)};
  };
  write_rows(path, {"system", "cost", "mean", "stderr", "units"},
             {row("limit", "J0", s.limit_cost.J0), row("population", "J0", s.pop_cost.J0),
              row("population", "J_follower", s.pop_cost.Jf),
              {"limit", "V0", format_double(s.limit_cost.V0), "0", "0"}});
}

// ---------------------------------------------------------------------------
// Stage: sweeps

struct SweepStage {
  std::optional<SweepReport> mf, opt;
  std::vector<Check> checks;
  json summary = json::object();
};

SweepStage run_sweeps(const ModelParams& p, const LeaderStage& leader, const std::vector<int>& Ns, int paths,
                      const std::string& kind, const Globals& g) {
  SweepStage s;
  SimConfig cfg;
  cfg.n_paths = paths;
  cfg.master_seed = g.seed;
  cfg.threads = g.threads;
  auto fit_json = [](const SweepReport& r) {
    json pts = json::array();
    for (const auto& q : r.points) pts.push_back({{"N", q.N}, {"gap", q.gap}, {"stderr", q.stderr_}});
    return json{{"label", r.label},
                {"points", pts},
                {"slope", r.fit.degenerate ? json(nullptr) : json(r.fit.slope)},
                {"slope_ci95_half_width", r.fit.degenerate ? json(nullptr) : json(r.fit.half_width)},
                {"degenerate", r.fit.degenerate},
                {"note", r.note}};
  };
  if (kind == "mean-field" || kind == "both") {
    s.mf = sweep_mean_field_gap(p, leader.gains, Ns, cfg);
    s.summary["mean_field_gap"] = fit_json(*s.mf);
    const bool ok = !s.mf->fit.degenerate && s.mf->fit.slope >= -1.25 && s.mf->fit.slope <= -0.75;
    s.checks.push_back({"mean_field_gap_slope", s.mf->fit.slope, -1.0, ok, "accepted range [-1.25, -0.75]"});
  }
  if (kind == "optimality" || kind == "both") {
    SimConfig oc = cfg;
    oc.antithetic = oc.n_paths % 2 == 0;
    s.opt = sweep_optimality_gap(p, leader.gains, Ns, oc);
    s.summary["optimality_gap_proxy"] = fit_json(*s.opt);
    const bool ok = !s.opt->fit.degenerate && s.opt->fit.slope >= -1.3 && s.opt->fit.slope <= -0.2;
    s.checks.push_back({"optimality_gap_proxy_slope", s.opt->fit.slope, -0.5, ok, "proxy; accepted range [-1.3, -0.2]"});
  }
  return s;
}

void write_sweep(const SweepStage& s, const std::string& path) {
  std::vector<std::vector<std::string>> rows;
  auto add = [&](const char* kind, const SweepReport& r) {
    for (const auto& q : r.points) rows.push_back({kind, std::to_string(q.N), format_double(q.gap), format_double(q.stderr_)});
  };
  if (s.mf) add("mean_field_gap", *s.mf);
  if (s.opt) add("optimality_gap_proxy", *s.opt);
  write_rows(path, {"kind", "N", "gap", "stderr"}, rows);
}

std::vector<int> parse_ns(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw ParseError("--ns: '" + item + "' is not an integer");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

RunManifest open_manifest(const Globals& g, const std::string& sub, const ModelParams& p, const json& flags) {
  RunManifest m(g.out, sub);
  m.set_flag("config", g.config);
  m.set_flag("out", g.out);
  m.set_flag("seed", g.seed);
  m.set_flag("threads", g.threads);
  m.set_flag("grid_steps", p.grid_steps);
  for (auto it = flags.begin(); it != flags.end(); ++it) m.set_flag(it.key(), it.value());
  m.store_config(params_to_json(p).dump(2) + "\n");
  return m;
}

int finish(RunManifest& m, const std::vector<Check>& checks, const std::string& stage) {
  for (const auto& c : checks)
    if (!c.passed) m.fail(stage, c.name + (c.detail.empty() ? "" : ": " + c.detail));
  m.write();
  return m.failed() ? kExitCheckFailed : kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Robust incentive Stackelberg mean-field game solver and simulator"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "model config (JSON)");
  app.add_option("--out", g.out, "output directory");
  app.add_option("--seed", g.seed, "master seed");
  app.add_option("--threads", g.threads, "worker threads (0: all cores)");
  app.add_option("--grid-steps", g.grid_steps, "override grid_steps")->check(CLI::PositiveNumber);

  std::optional<double> gamma;
  double tol = 1e-4;
  auto* c_gamma = app.add_subcommand("gamma-hat", "critical attenuation level by bisection");
  c_gamma->add_option("--tol", tol, "bracket tolerance")->check(CLI::PositiveNumber);

  auto* c_leader = app.add_subcommand("solve-leader", "concavity certificate, block Riccati, saddle gains, value");
  c_leader->add_option("--gamma", gamma, "attenuation level (default: config)");

  auto* c_inc = app.add_subcommand("solve-incentive", "incentive matrix and follower feedback");
  c_inc->add_option("--gamma", gamma, "attenuation level (default: config)");

  SimOptions so;
  std::string mode = "incentive", dist = "worst";
  auto* c_sim = app.add_subcommand("simulate", "limit system and N-follower population");
  c_sim->add_option("--gamma", gamma, "attenuation level (default: config)");
  c_sim->add_option("--n", so.N, "number of followers")->check(CLI::PositiveNumber);
  c_sim->add_option("--paths", so.paths, "Monte Carlo paths for cost statistics")->check(CLI::PositiveNumber);
  c_sim->add_option("--mode", mode, "population strategies")->check(CLI::IsMember({"incentive", "team"}));
  c_sim->add_option("--disturbance", dist, "disturbance law")->check(CLI::IsMember({"worst", "zero"}));
  c_sim->add_option("--em-substeps", so.em_substeps, "Euler-Maruyama substeps per grid step")->check(CLI::PositiveNumber);
  bool no_saddle = false;
  c_sim->add_flag("--no-saddle", no_saddle, "skip the saddle-point perturbation battery");

  std::string ns_text = "10,40,160,640", kind = "both";
  int sweep_paths = 200;
  auto* c_sweep = app.add_subcommand("sweep-n", "mean-field and optimality-gap rates in N");
  c_sweep->add_option("--gamma", gamma, "attenuation level (default: config)");
  c_sweep->add_option("--ns", ns_text, "comma-separated population sizes");
  c_sweep->add_option("--paths", sweep_paths, "paths per N")->check(CLI::PositiveNumber);
  c_sweep->add_option("--kind", kind, "which sweep")->check(CLI::IsMember({"mean-field", "optimality", "both"}));

  auto* c_repro = app.add_subcommand("reproduce-paper", "full numerical example with figure series");

  auto* c_validate = app.add_subcommand("validate", "check the standing assumptions of a config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUsage;
  }

  std::string stage = "load";
  try {
    apply_env(g);
    if (c_validate->parsed()) {
      const ModelParams p = load_config(g.config, {.enforce_assumptions = false});
      const auto rep = validate_assumptions(p);
      for (const auto& c : rep.checks)
        std::printf("[%s] %s %-36s margin=%g\n", c.passed ? "pass" : "FAIL", c.assumption.c_str(), c.check.c_str(), c.margin);
      std::printf("%s\n", rep.all_passed() ? "all assumptions hold" : "assumptions violated");
      return rep.all_passed() ? kExitOk : kExitCheckFailed;
    }

    ModelParams p = load_effective(g, gamma);

    if (c_gamma->parsed()) {
      stage = "gamma-hat";
      RunManifest m = open_manifest(g, "gamma-hat", p, {{"tol", tol}});
      const GammaStage s = run_gamma_hat(p, tol);
      write_gamma_trace(s.res, m.path("gamma_trace.csv"));
      m.add_output("gamma_trace.csv");
      write_json(m, "summary.json", {{"gamma_hat", gamma_json(s.res)}, {"checks", checks_json(s.checks)}});
      std::printf("gamma_hat=%.9g lo=%.9g hi=%.9g trials=%zu%s\n", s.res.gamma_hat, s.res.lo, s.res.hi, s.res.trace.size(),
                  s.res.no_escape_found ? " (no escape found: flagged 0)" : "");
      print_checks(s.checks);
      return finish(m, s.checks, stage);
    }

    if (c_leader->parsed()) {
      stage = "solve-leader";
      RunManifest m = open_manifest(g, "solve-leader", p, {{"gamma", p.gamma}});
      const LeaderStage s = run_leader(p);
      write_leader_outputs(s, m);
      write_json(m, "summary.json", {{"leader", s.summary}, {"checks", checks_json(s.checks)}});
      std::printf("V0=%.12g block_residual=%.3e transpose_gap=%.3e\n", s.V0, s.sol.residual, s.sol.max_transpose_gap);
      print_checks(s.checks);
      return finish(m, s.checks, stage);
    }

    if (c_inc->parsed()) {
      stage = "solve-incentive";
      RunManifest m = open_manifest(g, "solve-incentive", p, {{"gamma", p.gamma}});
      stage = "solve-leader";
      const LeaderStage leader = run_leader(p);
      stage = "solve-incentive";
      const IncentiveStage s = run_incentive(p, leader);
      write_incentive_outputs(s, m);
      write_json(m, "summary.json", {{"incentive", s.summary}, {"checks", checks_json(s.checks)}});
      const bool ok = std::all_of(s.checks.begin(), s.checks.end(), [](const Check& c) { return c.passed; });
      std::printf("max_residual=%.3e max_abs_L=%.3e %s\n", s.res->dt.max_matching_residual, s.max_abs_L, ok ? "pass" : "fail");
      print_checks(s.checks);
      return finish(m, s.checks, stage);
    }

    if (c_sim->parsed()) {
      stage = "simulate";
      so.mode = mode == "team" ? PopulationMode::team : PopulationMode::incentive;
      so.disturbance = dist == "zero" ? Disturbance::zero : Disturbance::worst;
      so.saddle = !no_saddle;
      RunManifest m = open_manifest(g, "simulate", p,
                                    {{"gamma", p.gamma}, {"n", so.N}, {"paths", so.paths}, {"mode", mode},
                                     {"disturbance", dist}, {"em_substeps", so.em_substeps}, {"saddle", so.saddle}});
      stage = "solve-leader";
      const LeaderStage leader = run_leader(p);
      std::optional<IncentiveStage> inc;
      if (so.mode == PopulationMode::incentive) {
        stage = "solve-incentive";
        inc = run_incentive(p, leader);
      }
      stage = "simulate";
      const SimStage s = run_simulation(p, leader, inc ? &*inc : nullptr, so, g);
      write_limit_states(s.limit_fig, m.path("limit_states.csv"));
      m.add_output("limit_states.csv");
      write_population_states(s.pop_fig, m.path("population_states.csv"));
      m.add_output("population_states.csv");
      {
        CsvTable t(s.limit_fig.grid);
        t.add_series("u0bar", s.limit_fig.paths[0].u0);
        t.add_series("u1bar", s.limit_fig.paths[0].u1);
        t.add_series("v", s.limit_fig.paths[0].v);
        t.add_series("u0N", s.pop_fig.paths[0].u0);
        t.add_series("u1N", s.pop_fig.paths[0].u1);
        t.add_series("vN", s.pop_fig.paths[0].v);
        t.write(m.path("controls.csv"));
        m.add_output("controls.csv");
      }
      write_costs(s, m.path("costs.csv"));
      m.add_output("costs.csv");
      write_json(m, "summary.json", {{"simulation", s.summary}, {"checks", checks_json(s.checks)}});
      std::printf("V0=%.10g limit J0=%.6g+-%.3g population J0=%.6g+-%.3g\n", leader.V0, s.limit_cost.J0.mean,
                  s.limit_cost.J0.stderr_, s.pop_cost.J0.mean, s.pop_cost.J0.stderr_);
      print_checks(s.checks);
      return finish(m, s.checks, stage);
    }

    if (c_sweep->parsed()) {
      stage = "sweep-n";
      const std::vector<int> Ns = parse_ns(ns_text);
      RunManifest m = open_manifest(g, "sweep-n", p, {{"gamma", p.gamma}, {"ns", ns_text}, {"paths", sweep_paths}, {"kind", kind}});
      stage = "solve-leader";
      const LeaderStage leader = run_leader(p);
      stage = "sweep-n";
      const SweepStage s = run_sweeps(p, leader, Ns, sweep_paths, kind, g);
      write_sweep(s, m.path("sweep.csv"));
      m.add_output("sweep.csv");
      write_json(m, "summary.json", {{"sweep", s.summary}, {"checks", checks_json(s.checks)}});
      if (s.mf) std::printf("mean-field gap slope=%.4f +- %.4f\n", s.mf->fit.slope, s.mf->fit.half_width);
      if (s.opt) std::printf("optimality gap (proxy) slope=%.4f +- %.4f\n", s.opt->fit.slope, s.opt->fit.half_width);
      print_checks(s.checks);
      return finish(m, s.checks, stage);
    }

    if (c_repro->parsed()) {
      RunManifest m = open_manifest(g, "reproduce-paper", p,
                                    {{"tol", 1e-4}, {"gamma", p.gamma}, {"n", 100}, {"paths", 500},
                                     {"ns", "10,40,160,640"}, {"sweep_paths", 200}});
      json summary;
      std::vector<Check> all;
      auto record = [&](const std::string& name, const std::vector<Check>& cs) {
        std::printf("%s\n", name.c_str());
        print_checks(cs);
        for (const auto& c : cs)
          if (!c.passed) m.fail(name, c.name + (c.detail.empty() ? "" : ": " + c.detail));
        all.insert(all.end(), cs.begin(), cs.end());
      };
      auto save = [&] {
        summary["checks"] = checks_json(all);
        write_json(m, "summary.json", summary);
        m.write();
      };
      try {
        stage = "gamma-hat";
        const GammaStage gs = run_gamma_hat(p, 1e-4);
        write_gamma_trace(gs.res, m.path("fig02_gamma_trace.csv"));
        m.add_output("fig02_gamma_trace.csv");
        summary["gamma_hat"] = gamma_json(gs.res);
        record(stage, gs.checks);

        stage = "solve-leader";
        const LeaderStage leader = run_leader(p);
        write_riccati(leader.sol, m.path("fig03_riccati_P.csv"));
        m.add_output("fig03_riccati_P.csv");
        summary["leader"] = leader.summary;
        record(stage, leader.checks);

        stage = "solve-incentive";
        const IncentiveStage inc = run_incentive(p, leader);
        write_delta_theta(*inc.res, m.path("fig07_delta_theta.csv"));
        m.add_output("fig07_delta_theta.csv");
        write_incentive_matrices(*inc.res, m.path("fig08_incentive_L_zeta_eta.csv"));
        m.add_output("fig08_incentive_L_zeta_eta.csv");
        summary["incentive"] = inc.summary;
        record(stage, inc.checks);

        stage = "simulate";
        SimOptions ro;
        ro.mode = inc.fg ? PopulationMode::incentive : PopulationMode::team;
        const SimStage sim = run_simulation(p, leader, &inc, ro, g);
        write_limit_states(sim.limit_fig, m.path("fig04_limit_states.csv"));
        m.add_output("fig04_limit_states.csv");
        {
          CsvTable t(sim.limit_fig.grid);
          t.add_series("u0bar", sim.limit_fig.paths[0].u0);
          t.add_series("u1bar", sim.limit_fig.paths[0].u1);
          t.write(m.path("fig05_saddle_controls.csv"));
          m.add_output("fig05_saddle_controls.csv");
          CsvTable v(sim.limit_fig.grid);
          v.add_series("v", sim.limit_fig.paths[0].v);
          v.write(m.path("fig06_worst_disturbance.csv"));
          m.add_output("fig06_worst_disturbance.csv");
        }
        write_population_states(sim.pop_fig, m.path("fig09_population_states.csv"));
        m.add_output("fig09_population_states.csv");
        write_follower_controls(sim.pop_fig, sim.limit_fig, leader.gains, inc.fg ? &*inc.fg : nullptr,
                                m.path("fig10_follower_controls.csv"));
        m.add_output("fig10_follower_controls.csv");
        write_costs(sim, m.path("costs.csv"));
        m.add_output("costs.csv");
        summary["simulation"] = sim.summary;
        record(stage, sim.checks);

        stage = "sweep-n";
        const SweepStage sw = run_sweeps(p, leader, {10, 40, 160, 640}, 200, "both", g);
        write_sweep(sw, m.path("sweep.csv"));
        m.add_output("sweep.csv");
        summary["sweep"] = sw.summary;
        record(stage, sw.checks);
      } catch (...) {
        m.fail(stage, "stage aborted");
        save();
        throw;
      }
      save();
      std::printf("%s\n", m.failed() ? "reproduce-paper: FAILED (see manifest.json)" : "reproduce-paper: all checks passed");
      return m.failed() ? kExitCheckFailed : kExitOk;
    }
  } catch (const EscapeError& e) {
    std::fprintf(stderr, "error in %s: Escape: %s (t_escape=%g, norm=%g)\n", stage.c_str(), e.what(), e.escape().t_escape,
                 e.escape().norm);
    return kExitModule;
  } catch (const Error& e) {
    std::fprintf(stderr, "error in %s: %s: %s\n", stage.c_str(), e.kind(), e.what());
    return stage == "load" ? kExitUsage : kExitModule;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error in %s: %s\n", stage.c_str(), e.what());
    return kExitModule;
  }
  return kExitOk;
}
