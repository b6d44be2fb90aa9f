#pragma once

#include "irstd/model.hpp"

namespace irstd::testing {

// d = 16 network small enough for exhaustive gradient checks.
inline ModelConfig toy_model_config(int stem = 1, uint64_t seed = 0) {
  ModelConfig c;
  c.encoder.stem_downsample = stem;
  c.encoder.stage_channels = {8, 8, 16, 16};
  c.encoder.stage_depths = {1, 1, 1, 1};
  c.dim = 16;
  c.heads = 2;
  c.deform.heads = 2;
  c.deform.points = 2;
  c.decoder.dim = 16;
  c.decoder.heads = 2;
  c.decoder.mlp_dim = 32;
  c.decoder.depth = 1;
  c.seed = seed;
  return c;
}

}  // namespace irstd::testing
