#pragma once

#include "panokit/checkpoint.hpp"
#include "panokit/config.hpp"
#include "panokit/decoder.hpp"
#include "panokit/geometry.hpp"
#include "panokit/gradcheck.hpp"
#include "panokit/loss.hpp"
#include "panokit/mask_io.hpp"
#include "panokit/memory.hpp"
#include "panokit/metrics.hpp"
#include "panokit/model.hpp"
#include "panokit/optim.hpp"
#include "panokit/pipeline.hpp"
#include "panokit/scene.hpp"
