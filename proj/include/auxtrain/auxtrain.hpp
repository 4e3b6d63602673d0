// Umbrella header.
#pragma once

#include "auxtrain/adversarial.hpp"
#include "auxtrain/aux_targets.hpp"
#include "auxtrain/common.hpp"
#include "auxtrain/data.hpp"
#include "auxtrain/experiment.hpp"
#include "auxtrain/fourier.hpp"
#include "auxtrain/models.hpp"
#include "auxtrain/ops.hpp"
#include "auxtrain/optim.hpp"
#include "auxtrain/tensor.hpp"
#include "auxtrain/training.hpp"
