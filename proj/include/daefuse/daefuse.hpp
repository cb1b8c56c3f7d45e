#pragma once

#include "daefuse/attention.hpp"
#include "daefuse/checkpoint.hpp"
#include "daefuse/config.hpp"
#include "daefuse/data.hpp"
#include "daefuse/error.hpp"
#include "daefuse/fusion.hpp"
#include "daefuse/image.hpp"
#include "daefuse/losses.hpp"
#include "daefuse/metrics.hpp"
#include "daefuse/networks.hpp"
#include "daefuse/nn.hpp"
#include "daefuse/optim.hpp"
#include "daefuse/synthetic.hpp"
#include "daefuse/tensor.hpp"
#include "daefuse/training.hpp"
