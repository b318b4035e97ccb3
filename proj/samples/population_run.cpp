// Incentive design and a small population Monte Carlo on a config file.
#include <cstdio>
#include <cstdlib>

#include "lqmfg/lqmfg.hpp"

int main(int argc, char** argv) {
  using namespace lqmfg;
  if (argc < 2) {
    std::fprintf(stderr, "usage: %s CONFIG.json [N] [paths]\n", argv[0]);
    return 2;
  }
  try {
    const ModelParams p = load_config(argv[1]);
    const BlockRiccatiSolution sol = solve_block_riccati(p, p.gamma);
    const LeaderGains g = leader_gains(sol, p);
    const IncentiveResult inc = solve_cc_incentive(p, sol);
    const SigmaPhiPsiSolution spp = solve_sigma_phi_psi(p, sol, inc.dt, inc.inc);
    const FollowerGains fg = follower_gains(p, inc.dt, spp, inc.inc);
    std::printf("matching residual %.3g, gain gap %.3g\n", inc.dt.max_matching_residual, incentive_match(g, fg));

    SimConfig cfg;
    cfg.N = argc > 2 ? std::atoi(argv[2]) : 50;
    cfg.n_paths = argc > 3 ? std::atoi(argv[3]) : 64;
    cfg.store_series = false;
    for (auto mode : {PopulationMode::team, PopulationMode::incentive}) {
      cfg.mode = mode;
      const CostReport c = eval_costs(simulate_population(p, g, &fg, &inc.inc, cfg), leader_value(sol, p));
      std::printf("%-9s J0 = %.6g +- %.3g, Jf = %.6g +- %.3g (V0 = %.6g)\n",
                  mode == PopulationMode::team ? "team" : "incentive", c.J0.mean, c.J0.stderr_, c.Jf.mean, c.Jf.stderr_, c.V0);
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "%s: %s\n", e.kind(), e.what());
    return 1;
  }
}
