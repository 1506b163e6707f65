#pragma once

#include "dgm/core.hpp"
#include "dgm/linalg.hpp"
#include "dgm/tensor_io.hpp"
#include "dgm/superpixel.hpp"
#include "dgm/autodiff.hpp"
#include "dgm/config.hpp"
#include "dgm/params.hpp"
#include "dgm/gconv.hpp"
#include "dgm/hierarchy.hpp"
#include "dgm/message_passing.hpp"
#include "dgm/heads.hpp"
#include "dgm/training.hpp"
#include "dgm/applications.hpp"
#include "dgm/costing.hpp"
#include "dgm/serialize.hpp"
#include "dgm/gradcheck.hpp"
