#pragma once

// Umbrella header.

#include "dgn/tensor.hpp"
#include "dgn/ops.hpp"
#include "dgn/random.hpp"
#include "dgn/params.hpp"
#include "dgn/hfem.hpp"
#include "dgn/mgqm.hpp"
#include "dgn/mgfrm.hpp"
#include "dgn/smgm.hpp"
#include "dgn/model.hpp"
#include "dgn/loss.hpp"
#include "dgn/metrics.hpp"
#include "dgn/image.hpp"
#include "dgn/data.hpp"
#include "dgn/config.hpp"
#include "dgn/checkpoint.hpp"
#include "dgn/trainer.hpp"
#include "dgn/report.hpp"
#include "dgn/viz.hpp"
#include "dgn/cli.hpp"
