#pragma once

#include "quamba/bound.hpp"
#include "quamba/calibration.hpp"
#include "quamba/error.hpp"
#include "quamba/hadamard.hpp"
#include "quamba/matrix.hpp"
#include "quamba/model.hpp"
#include "quamba/qblock.hpp"
#include "quamba/quant.hpp"
#include "quamba/scaleset.hpp"
#include "quamba/sensitivity.hpp"
#include "quamba/ssm.hpp"
#include "quamba/store.hpp"
#include "quamba/toy.hpp"
