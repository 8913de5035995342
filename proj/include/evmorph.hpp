#pragma once

#include "evmorph/error.hpp"
#include "evmorph/binary_io.hpp"
#include "evmorph/events.hpp"
#include "evmorph/face3d.hpp"
#include "evmorph/fitting.hpp"
#include "evmorph/autodiff.hpp"
#include "evmorph/stvit.hpp"
#include "evmorph/training.hpp"
#include "evmorph/synth.hpp"
#include "evmorph/pipeline.hpp"
