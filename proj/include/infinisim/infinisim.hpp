#pragma once

#include "infinisim/collectives.hpp"
#include "infinisim/efficiency_model.hpp"
#include "infinisim/error.hpp"
#include "infinisim/flat_config.hpp"
#include "infinisim/half.hpp"
#include "infinisim/memory_model.hpp"
#include "infinisim/overlap_engine.hpp"
#include "infinisim/placement_planner.hpp"
#include "infinisim/tensor.hpp"
#include "infinisim/tier_store.hpp"
#include "infinisim/tiling.hpp"
#include "infinisim/train_harness.hpp"
