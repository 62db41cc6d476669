#pragma once

#include "sparsecoder/checkpoint.hpp"
#include "sparsecoder/coder.hpp"
#include "sparsecoder/error.hpp"
#include "sparsecoder/evalsuite.hpp"
#include "sparsecoder/rng.hpp"
#include "sparsecoder/shardio.hpp"
#include "sparsecoder/synth.hpp"
#include "sparsecoder/tensor.hpp"
#include "sparsecoder/train.hpp"
#include "sparsecoder/version.hpp"
