#pragma once

// Umbrella header.

#include "audioslots/autodiff.hpp"
#include "audioslots/config.hpp"
#include "audioslots/data.hpp"
#include "audioslots/dsp.hpp"
#include "audioslots/errors.hpp"
#include "audioslots/matching.hpp"
#include "audioslots/metrics.hpp"
#include "audioslots/model.hpp"
#include "audioslots/pipeline.hpp"
#include "audioslots/separation.hpp"
#include "audioslots/tensor.hpp"
