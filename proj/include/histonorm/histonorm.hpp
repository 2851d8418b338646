#pragma once

#include "histonorm/augmentor.hpp"
#include "histonorm/dataio.hpp"
#include "histonorm/error.hpp"
#include "histonorm/metrics.hpp"
#include "histonorm/pipeline.hpp"
#include "histonorm/postprocess.hpp"
#include "histonorm/predictor.hpp"
#include "histonorm/raster.hpp"
#include "histonorm/reference_select.hpp"
#include "histonorm/rng.hpp"
#include "histonorm/serialization.hpp"
#include "histonorm/stain_math.hpp"
#include "histonorm/tta_ensemble.hpp"
