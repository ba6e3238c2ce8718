#pragma once

#include "bixformer/error.hpp"
#include "bixformer/tensor.hpp"
#include "bixformer/rng.hpp"
#include "bixformer/autodiff.hpp"
#include "bixformer/mmd.hpp"
#include "bixformer/gradcheck.hpp"
#include "bixformer/assignment.hpp"
#include "bixformer/matching_costs.hpp"
#include "bixformer/umm.hpp"
#include "bixformer/params.hpp"
#include "bixformer/cma.hpp"
#include "bixformer/scene.hpp"
#include "bixformer/synth.hpp"
#include "bixformer/model.hpp"
#include "bixformer/eval.hpp"
#include "bixformer/train.hpp"
#include "bixformer/config.hpp"
#include "bixformer/verify.hpp"
#include "bixformer/cli.hpp"
