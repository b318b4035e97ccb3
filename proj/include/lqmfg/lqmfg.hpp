#pragma once

#include "lqmfg/config.hpp"
#include "lqmfg/csv.hpp"
#include "lqmfg/errors.hpp"
#include "lqmfg/incentive.hpp"
#include "lqmfg/leader.hpp"
#include "lqmfg/linalg.hpp"
#include "lqmfg/model.hpp"
#include "lqmfg/odeint.hpp"
#include "lqmfg/parallel.hpp"
#include "lqmfg/rng.hpp"
#include "lqmfg/sim.hpp"
#include "lqmfg/trajectory.hpp"
