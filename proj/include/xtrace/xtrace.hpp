// Copyright 2026 The xtrace Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "xtrace/bench.hpp"
#include "xtrace/bytecode.hpp"
#include "xtrace/config.hpp"
#include "xtrace/demo.hpp"
#include "xtrace/engine.hpp"
#include "xtrace/error.hpp"
#include "xtrace/fleet.hpp"
#include "xtrace/instrumentation.hpp"
#include "xtrace/method_ref.hpp"
#include "xtrace/runtime.hpp"
#include "xtrace/trace_actions.hpp"
#include "xtrace/vm.hpp"
