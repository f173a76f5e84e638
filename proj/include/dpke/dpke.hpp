#pragma once

#include "dpke/random.hpp"
#include "dpke/geometry.hpp"
#include "dpke/synthdata.hpp"
#include "dpke/dataset_io.hpp"
#include "dpke/detector.hpp"
#include "dpke/checkpoint.hpp"
#include "dpke/ssl.hpp"
#include "dpke/augment.hpp"
#include "dpke/eval.hpp"
#include "dpke/trainer.hpp"
#include "dpke/config.hpp"
#include "dpke/plot.hpp"
#include "dpke/ablation.hpp"
