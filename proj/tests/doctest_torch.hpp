#pragma once

// c10 defines glog-style CHECK macros; drop them before doctest claims the names.
#include <torch/torch.h>

#undef CHECK
#undef CHECK_EQ
#undef CHECK_NE
#undef CHECK_LT
#undef CHECK_LE
#undef CHECK_GT
#undef CHECK_GE

#include "doctest.h"
