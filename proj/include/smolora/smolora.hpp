#pragma once

#include "smolora/benchmark.hpp"
#include "smolora/errors.hpp"
#include "smolora/harness.hpp"
#include "smolora/io.hpp"
#include "smolora/lora.hpp"
#include "smolora/matrix.hpp"
#include "smolora/metrics.hpp"
#include "smolora/model.hpp"
#include "smolora/optim.hpp"
#include "smolora/random.hpp"
#include "smolora/routing.hpp"
#include "smolora/tape.hpp"
