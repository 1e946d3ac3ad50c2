#pragma once

#include "common.hpp"
#include "model.hpp"
#include "truncnorm.hpp"
#include "rng.hpp"
#include "parallel.hpp"
#include "estep.hpp"
#include "mstep.hpp"
#include "probit.hpp"
#include "em.hpp"
#include "louis.hpp"
#include "mcem.hpp"
#include "bench.hpp"
#include "csv.hpp"
