#pragma once

#include "lrns/tt_core.hpp"
#include "lrns/kron_ops.hpp"
#include "lrns/stochastic_basis.hpp"
#include "lrns/fem.hpp"
#include "lrns/solver.hpp"
#include "lrns/oracle.hpp"
#include "lrns/experiment.hpp"
