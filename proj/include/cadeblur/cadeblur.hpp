#pragma once

#include "cadeblur/attention.hpp"
#include "cadeblur/content_aware.hpp"
#include "cadeblur/core/grad_check.hpp"
#include "cadeblur/data/image_io.hpp"
#include "cadeblur/data/manifest.hpp"
#include "cadeblur/data/metrics.hpp"
#include "cadeblur/data/psf.hpp"
#include "cadeblur/data/synth.hpp"
#include "cadeblur/experiments.hpp"
#include "cadeblur/network.hpp"
#include "cadeblur/pdf.hpp"
#include "cadeblur/train/adam.hpp"
#include "cadeblur/train/checkpoint.hpp"
#include "cadeblur/train/config.hpp"
#include "cadeblur/train/trainer.hpp"
