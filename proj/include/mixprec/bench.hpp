#pragma once

#include "mixprec/bench/config.hpp"
#include "mixprec/bench/data.hpp"
#include "mixprec/bench/model.hpp"
#include "mixprec/bench/train.hpp"
