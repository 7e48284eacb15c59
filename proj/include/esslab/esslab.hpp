// Copyright 2026 The esslab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "esslab/config.hpp"
#include "esslab/core.hpp"
#include "esslab/error.hpp"
#include "esslab/gradcheck.hpp"
#include "esslab/objectives.hpp"
#include "esslab/optimizer.hpp"
#include "esslab/policy.hpp"
#include "esslab/rng.hpp"
#include "esslab/suite.hpp"
#include "esslab/tasks.hpp"
#include "esslab/trainer.hpp"
