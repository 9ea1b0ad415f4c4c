#pragma once

#include "cola/error.hpp"
#include "cola/util.hpp"
#include "cola/tensor.hpp"
#include "cola/optim.hpp"
#include "cola/parameters.hpp"
#include "cola/data.hpp"
#include "cola/model.hpp"
#include "cola/transfer.hpp"
#include "cola/simulator.hpp"
#include "cola/evaluation.hpp"
#include "cola/pipeline.hpp"
