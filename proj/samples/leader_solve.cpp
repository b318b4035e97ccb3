// Critical attenuation level, leader saddle gains and value for a config file.
#include <cstdio>
#include <sstream>

#include "lqmfg/lqmfg.hpp"

int main(int argc, char** argv) {
  using namespace lqmfg;
  if (argc < 2) {
    std::fprintf(stderr, "usage: %s CONFIG.json\n", argv[0]);
    return 2;
  }
  try {
    const ModelParams p = load_config(argv[1]);
    const GammaHatResult gh = estimate_gamma_hat(p, 1e-4);
    std::printf("gamma_hat = %.6f (bracket [%.6f, %.6f])\n", gh.gamma_hat, gh.lo, gh.hi);

    const double gamma = std::max(p.gamma, 1.01 * gh.hi);
    const BlockRiccatiSolution sol = solve_block_riccati(p, gamma);
    const LeaderGains g = leader_gains(sol, p);
    std::printf("gamma = %g, V0 = %.10g, residual = %.3g\n", gamma, leader_value(sol, p), sol.residual);
    std::printf("Theta11(0) =\n");
    const Eigen::IOFormat f(6, 0, " ", "\n", "  ");
    std::printf("%s\n", (std::ostringstream() << g.Theta11[0].format(f)).str().c_str());
  } catch (const Error& e) {
    std::fprintf(stderr, "%s: %s\n", e.kind(), e.what());
    return 1;
  }
}
