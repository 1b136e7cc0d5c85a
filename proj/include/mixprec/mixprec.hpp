#pragma once

#include "mixprec/numerics.hpp"
#include "mixprec/tensor.hpp"
#include "mixprec/tape.hpp"
#include "mixprec/ops.hpp"
#include "mixprec/tree.hpp"
#include "mixprec/autodiff.hpp"
#include "mixprec/precision.hpp"
#include "mixprec/optim.hpp"
