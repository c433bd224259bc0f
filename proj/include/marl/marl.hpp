#pragma once

// Everything except the experiment runner, which also needs OpenSSL.

#include "marl/error.hpp"
#include "marl/game.hpp"
#include "marl/indexing.hpp"
#include "marl/mappo.hpp"
#include "marl/oracle.hpp"
#include "marl/pessimistic.hpp"
#include "marl/policy.hpp"
#include "marl/properties.hpp"
#include "marl/ratio_game.hpp"
#include "marl/rng.hpp"
#include "marl/stats.hpp"
