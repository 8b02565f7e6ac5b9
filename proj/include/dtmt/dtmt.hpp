#pragma once

#include "dtmt/tensor.hpp"
#include "dtmt/autograd.hpp"
#include "dtmt/random.hpp"
#include "dtmt/parameters.hpp"
#include "dtmt/cells.hpp"
#include "dtmt/attention.hpp"
#include "dtmt/transition.hpp"
#include "dtmt/vocab.hpp"
#include "dtmt/model.hpp"
#include "dtmt/optim.hpp"
#include "dtmt/checkpoint.hpp"
#include "dtmt/decode.hpp"
#include "dtmt/metrics.hpp"
#include "dtmt/data.hpp"
#include "dtmt/train.hpp"
#include "dtmt/gradcheck.hpp"
#include "dtmt/config.hpp"
#include "dtmt/experiment.hpp"
#include "dtmt/sweep.hpp"
