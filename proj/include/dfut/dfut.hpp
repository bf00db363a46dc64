#pragma once

// Umbrella header: a desk-scale distributed-futures runtime (task DAG
// execution, per-node object stores with spilling, lineage reconstruction)
// and a shuffle algorithm library built on top of it.

#include "dfut/common.hpp"
#include "dfut/error.hpp"
#include "dfut/metrics.hpp"
#include "dfut/records.hpp"
#include "dfut/runtime.hpp"
#include "dfut/shuffle.hpp"
#include "dfut/store.hpp"
#include "dfut/task.hpp"
#include "dfut/trace.hpp"
