#pragma once

#include "cadpred/cohort.hpp"
#include "cadpred/cv.hpp"
#include "cadpred/error.hpp"
#include "cadpred/evalx.hpp"
#include "cadpred/forest.hpp"
#include "cadpred/glm.hpp"
#include "cadpred/impute.hpp"
#include "cadpred/lasso.hpp"
#include "cadpred/parallel.hpp"
#include "cadpred/pipeline.hpp"
#include "cadpred/rng.hpp"
#include "cadpred/synth.hpp"
#include "cadpred/textio.hpp"
#include "cadpred/transform.hpp"
