#pragma once

#include "feddd/error.hpp"
#include "feddd/model.hpp"
#include "feddd/data.hpp"
#include "feddd/trainer.hpp"
#include "feddd/selection.hpp"
#include "feddd/lp.hpp"
#include "feddd/allocation.hpp"
#include "feddd/allocation_oracle.hpp"
#include "feddd/aggregation.hpp"
#include "feddd/metrics.hpp"
#include "feddd/orchestrator.hpp"
