#pragma once

#include "taxengine/core.hpp"
#include "taxengine/rng.hpp"
#include "taxengine/log.hpp"
#include "taxengine/taxonomy.hpp"
#include "taxengine/bundle.hpp"
#include "taxengine/pca.hpp"
#include "taxengine/split.hpp"
#include "taxengine/synthetic.hpp"
#include "taxengine/kernels.hpp"
#include "taxengine/checkpoint.hpp"
#include "taxengine/fusion.hpp"
#include "taxengine/metrics.hpp"
#include "taxengine/hiermodel.hpp"
#include "taxengine/evaluation.hpp"
#include "taxengine/recategorize.hpp"
#include "taxengine/cascade.hpp"
#include "taxengine/config.hpp"
#include "taxengine/commands.hpp"
