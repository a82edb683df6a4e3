#pragma once

#include "treemtl/errors.hpp"
#include "treemtl/tensor.hpp"
#include "treemtl/autograd.hpp"
#include "treemtl/ops.hpp"
#include "treemtl/layers.hpp"
#include "treemtl/attention.hpp"
#include "treemtl/losses.hpp"
#include "treemtl/model.hpp"
#include "treemtl/cost.hpp"
#include "treemtl/optim.hpp"
#include "treemtl/checkpoint.hpp"
#include "treemtl/data.hpp"
#include "treemtl/metrics.hpp"
#include "treemtl/face_eval.hpp"
#include "treemtl/evaluate.hpp"
#include "treemtl/training.hpp"
#include "treemtl/toml.hpp"
#include "treemtl/config.hpp"
