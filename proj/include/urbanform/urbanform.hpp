#pragma once

#include "error.hpp"
#include "ingest.hpp"
#include "geometry.hpp"
#include "features.hpp"
#include "gmm.hpp"
#include "selection.hpp"
#include "compare.hpp"
#include "report.hpp"
#include "pipeline.hpp"
