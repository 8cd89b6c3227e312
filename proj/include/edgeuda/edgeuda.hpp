#pragma once

#include "edgeuda/checkpoint.hpp"
#include "edgeuda/config.hpp"
#include "edgeuda/edgelabel.hpp"
#include "edgeuda/grid.hpp"
#include "edgeuda/losses.hpp"
#include "edgeuda/metrics.hpp"
#include "edgeuda/nets.hpp"
#include "edgeuda/pgm.hpp"
#include "edgeuda/synthdata.hpp"
#include "edgeuda/tensor.hpp"
#include "edgeuda/trainer.hpp"
