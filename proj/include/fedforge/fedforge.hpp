#pragma once

#include "fedforge/aggregation.hpp"
#include "fedforge/analytics.hpp"
#include "fedforge/config.hpp"
#include "fedforge/data.hpp"
#include "fedforge/dopa.hpp"
#include "fedforge/fed_engine.hpp"
#include "fedforge/harness.hpp"
#include "fedforge/io.hpp"
#include "fedforge/model.hpp"
#include "fedforge/rng.hpp"
#include "fedforge/tensor.hpp"
#include "fedforge/training.hpp"
