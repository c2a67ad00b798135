#include "vtp/optim.hpp"

#include <cmath>
#include <numbers>

#include "vtp/error.hpp"

namespace vtp {

void optimizer_step(std::span<ParamRef> params, OptimizerState& state, double lr_now) {
  if (lr_now < 0.0) throw UsageError("optimizer_step: negative learning rate");
  for (auto& p : params) {
    auto it = state.first_moment.find(p.name);
    if (it != state.first_moment.end() && it->second.size() != p.tensor.size()) {
      throw UsageError("optimizer_step: moment for '" + p.name + "' has " +
                       std::to_string(it->second.size()) + " entries, parameter has " +
                       std::to_string(p.tensor.size()));
    }
  }
  state.step += 1;
  const auto& h = state.hyper;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(h.beta1, t);
  const double bc2 = 1.0 - std::pow(h.beta2, t);
  for (auto& p : params) {
    auto& m = state.first_moment[p.name];
    auto& v = state.second_moment[p.name];
    if (m.empty()) m.assign(p.tensor.size(), 0.0);
    if (v.empty()) v.assign(p.tensor.size(), 0.0);
    auto w = p.tensor.data();
    const bool has_grad = p.tensor.has_grad();
    std::span<const double> g = has_grad ? std::span<const double>(p.tensor.grad())
                                         : std::span<const double>{};
    const double decay = p.decay ? 1.0 - lr_now * h.weight_decay : 1.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = has_grad ? g[i] : 0.0;
      m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * gi;
      v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      if (p.decay) w[i] *= decay;
      w[i] -= lr_now * mhat / (std::sqrt(vhat) + h.eps);
    }
  }
}

double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr, double min_lr) {
  if (total_steps < 1) throw ConfigError("cosine_lr: total_steps must be >= 1");
  if (step >= total_steps) return min_lr;
  if (step <= 0) return base_lr;
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace vtp
