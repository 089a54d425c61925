#pragma once

#include "selfablate/tensor.hpp"
#include "selfablate/ops.hpp"
#include "selfablate/kwta.hpp"
#include "selfablate/config.hpp"
#include "selfablate/model.hpp"
#include "selfablate/optim.hpp"
#include "selfablate/container.hpp"
#include "selfablate/checkpoint.hpp"
#include "selfablate/data.hpp"
#include "selfablate/trainer.hpp"
#include "selfablate/stories.hpp"
#include "selfablate/parallel.hpp"
#include "selfablate/analysis/ioi.hpp"
#include "selfablate/analysis/record.hpp"
#include "selfablate/analysis/metrics.hpp"
#include "selfablate/analysis/sae.hpp"
#include "selfablate/analysis/circuit.hpp"
