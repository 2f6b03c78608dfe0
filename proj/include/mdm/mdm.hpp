#pragma once

// Everything in one include.

#include "mdm/bench/complexity.hpp"
#include "mdm/codec/codec.hpp"
#include "mdm/diffusion/schedule.hpp"
#include "mdm/diffusion/score.hpp"
#include "mdm/diffusion/solver.hpp"
#include "mdm/errors.hpp"
#include "mdm/latent.hpp"
#include "mdm/mamba/block.hpp"
#include "mdm/mamba/scan.hpp"
#include "mdm/mamba/selection.hpp"
#include "mdm/numerics/container.hpp"
#include "mdm/numerics/gradcheck.hpp"
#include "mdm/numerics/graph.hpp"
#include "mdm/numerics/ops.hpp"
#include "mdm/numerics/rng.hpp"
#include "mdm/numerics/tensor.hpp"
#include "mdm/pipeline/checkpoint.hpp"
#include "mdm/pipeline/config.hpp"
#include "mdm/pipeline/dataset.hpp"
#include "mdm/pipeline/generate.hpp"
#include "mdm/pipeline/gradsuite.hpp"
#include "mdm/pipeline/model.hpp"
#include "mdm/pipeline/train.hpp"
#include "mdm/tokenizer/unigram.hpp"
