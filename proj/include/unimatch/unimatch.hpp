#pragma once

#include "unimatch/tensor.hpp"
#include "unimatch/rng.hpp"
#include "unimatch/datamodel.hpp"
#include "unimatch/data.hpp"
#include "unimatch/augment.hpp"
#include "unimatch/perturb.hpp"
#include "unimatch/params.hpp"
#include "unimatch/teacher.hpp"
#include "unimatch/loss.hpp"
#include "unimatch/nn.hpp"
#include "unimatch/model.hpp"
#include "unimatch/frameworks.hpp"
#include "unimatch/eval.hpp"
#include "unimatch/engine.hpp"
