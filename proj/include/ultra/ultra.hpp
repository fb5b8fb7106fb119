#pragma once

#include "ultra/error.hpp"
#include "ultra/export.hpp"
#include "ultra/format.hpp"
#include "ultra/grid.hpp"
#include "ultra/metrics.hpp"
#include "ultra/parallel.hpp"
#include "ultra/relevance.hpp"
#include "ultra/segmentation.hpp"
#include "ultra/tensor.hpp"
#include "ultra/textinterp.hpp"
#include "ultra/trace.hpp"
