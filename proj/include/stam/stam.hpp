#pragma once

#include "stam/attention.hpp"
#include "stam/bench.hpp"
#include "stam/config.hpp"
#include "stam/data.hpp"
#include "stam/embedding.hpp"
#include "stam/errors.hpp"
#include "stam/gradcheck.hpp"
#include "stam/graph.hpp"
#include "stam/io.hpp"
#include "stam/model.hpp"
#include "stam/model_check.hpp"
#include "stam/ops.hpp"
#include "stam/rng.hpp"
#include "stam/tensor.hpp"
#include "stam/trainer.hpp"
