#pragma once

#include "mdkto/checkpoint.hpp"
#include "mdkto/config.hpp"
#include "mdkto/dataset.hpp"
#include "mdkto/elbo.hpp"
#include "mdkto/error.hpp"
#include "mdkto/imbalance.hpp"
#include "mdkto/judge.hpp"
#include "mdkto/manifest.hpp"
#include "mdkto/masking.hpp"
#include "mdkto/model.hpp"
#include "mdkto/objective.hpp"
#include "mdkto/predictor.hpp"
#include "mdkto/report.hpp"
#include "mdkto/rng.hpp"
#include "mdkto/sampler.hpp"
#include "mdkto/stats.hpp"
#include "mdkto/synth.hpp"
#include "mdkto/theory.hpp"
#include "mdkto/tokens.hpp"
#include "mdkto/train.hpp"
#include "mdkto/variance.hpp"
