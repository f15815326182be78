#pragma once

#include "vlaconf/bench.hpp"
#include "vlaconf/calibration.hpp"
#include "vlaconf/checkpoint.hpp"
#include "vlaconf/error.hpp"
#include "vlaconf/gradcheck.hpp"
#include "vlaconf/head.hpp"
#include "vlaconf/metrics.hpp"
#include "vlaconf/pipeline.hpp"
#include "vlaconf/rng.hpp"
#include "vlaconf/rollout.hpp"
#include "vlaconf/synthetic.hpp"
#include "vlaconf/training.hpp"
