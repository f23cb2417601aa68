#pragma once

// Umbrella header.

#include "arlab/autodiff.hpp"
#include "arlab/checkpoint.hpp"
#include "arlab/conditioner.hpp"
#include "arlab/config.hpp"
#include "arlab/costmodel.hpp"
#include "arlab/cvae_head.hpp"
#include "arlab/engine.hpp"
#include "arlab/optim.hpp"
#include "arlab/rng.hpp"
#include "arlab/runio.hpp"
#include "arlab/schedule.hpp"
#include "arlab/shortcut_head.hpp"
#include "arlab/tensor.hpp"
#include "arlab/toylab.hpp"
#include "arlab/trainer.hpp"
