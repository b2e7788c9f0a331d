#pragma once

// Umbrella header.

#include "tsegcn/autodiff.hpp"
#include "tsegcn/dataio.hpp"
#include "tsegcn/dtc.hpp"
#include "tsegcn/grad_check.hpp"
#include "tsegcn/graph.hpp"
#include "tsegcn/model.hpp"
#include "tsegcn/ops.hpp"
#include "tsegcn/param_store.hpp"
#include "tsegcn/tensor.hpp"
#include "tsegcn/trainer.hpp"
#include "tsegcn/tsegc.hpp"
