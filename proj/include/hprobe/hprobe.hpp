#pragma once

// Umbrella header for the estimator library.

#include "hprobe/model_core.hpp"
#include "hprobe/variance_model.hpp"
#include "hprobe/empirical_bayes.hpp"
#include "hprobe/ecm_engine.hpp"
#include "hprobe/prediction.hpp"
#include "hprobe/sim_harness.hpp"
#include "hprobe/diagnostics.hpp"
#include "hprobe/cli_io.hpp"
