#pragma once

#include "test_util.hpp"
#include "vtp/model.hpp"

namespace vtp::test {

/// Gives every gate, bias and norm parameter a random value so that no part
/// of the forward pass is trivially neutral.
inline void perturb(VitModel& m, Rng& rng) {
  auto fill = [&](Tensor& t, double lo, double hi) {
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
  };
  auto linear = [&](Linear& l) { fill(l.bias, -0.1, 0.1); };
  auto norm = [&](Norm& n) {
    fill(n.gain, 0.5, 1.5);
    fill(n.bias, -0.1, 0.1);
  };
  linear(m.patch_embed);
  for (auto& b : m.blocks) {
    norm(b.norm1);
    norm(b.norm2);
    for (Linear* l : {&b.q, &b.k, &b.v, &b.out, &b.fc1, &b.fc2}) {
      linear(*l);
      // Larger weights than the init scale so attention is far from uniform.
      for (auto& v : l->weight.data()) v *= 10.0;
    }
    if (!m.pruned) {
      for (auto& g : b.gates) {
        for (auto& v : g.data()) v = (rng.uniform() < 0.2 ? -1.0 : 1.0) * rng.uniform(0.05, 1.5);
      }
    }
  }
  norm(m.final_norm);
  linear(m.head);
}

inline Tensor random_images(std::size_t batch, const ModelConfig& c, Rng& rng) {
  return random_tensor({batch, c.in_channels, c.image_size, c.image_size}, rng);
}

inline Tensor logits(const VitModel& m, const Tensor& images) {
  Graph g(GradMode::no_grad);
  return m.forward(g, images, m.pruned ? ForwardMode::hard : ForwardMode::soft);
}

}  // namespace vtp::test
