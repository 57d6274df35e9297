#pragma once

// Umbrella header: linear-time bidirectional selective state-space sequence
// modeling for multichannel time-series, with masked-reconstruction
// pre-training, fine-tuning heads and cost profiling.

#include "bissm/checkpoint.hpp"
#include "bissm/data.hpp"
#include "bissm/errors.hpp"
#include "bissm/model.hpp"
#include "bissm/ops.hpp"
#include "bissm/optim.hpp"
#include "bissm/profile.hpp"
#include "bissm/ssm.hpp"
#include "bissm/tensor.hpp"
#include "bissm/train.hpp"
#include "bissm/util.hpp"
