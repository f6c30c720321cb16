// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "navunc/mcmc/diagnostics.hpp"
#include "navunc/mcmc/io.hpp"
#include "navunc/mcmc/nuts.hpp"
#include "navunc/mcmc/samples.hpp"
#include "navunc/mcmc/sampler.hpp"
#include "navunc/mcmc/space.hpp"
