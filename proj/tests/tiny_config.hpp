#pragma once

#include "vtp/config.hpp"

namespace vtp::test {

/// A pipeline small enough to run end to end in a couple of seconds.
inline PipelineConfig tiny_pipeline() {
  PipelineConfig c;
  c.model = ModelConfig{16, 4, 3, 16, 1, 2, 2.0, 10};
  c.data.train_per_class = 6;
  c.data.eval_per_class = 3;
  for (TrainConfig* t : {&c.train_baseline, &c.train_sparsity, &c.finetune}) {
    t->epochs = 2;
    t->batch_size = 16;
  }
  c.train_sparsity.lambda = 1e-2;
  c.rate = 0.4;
  return c;
}

}  // namespace vtp::test
