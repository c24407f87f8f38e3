// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "oodkit/actfun.hpp"
#include "oodkit/error.hpp"
#include "oodkit/metrics.hpp"
#include "oodkit/pipeline.hpp"
#include "oodkit/purify.hpp"
#include "oodkit/refnet.hpp"
#include "oodkit/scoring.hpp"
#include "oodkit/tensor.hpp"
#include "oodkit/tensor_store.hpp"
