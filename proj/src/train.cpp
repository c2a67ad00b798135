#include "vtp/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "vtp/error.hpp"
#include "vtp/graph.hpp"
#include "vtp/random.hpp"

namespace vtp {

std::string_view stage_name(Stage stage) {
  switch (stage) {
    case Stage::baseline: return "baseline";
    case Stage::sparsity: return "sparsity";
    case Stage::finetune: return "finetune";
  }
  return "?";
}

Stage parse_stage(std::string_view name) {
  if (name == "baseline") return Stage::baseline;
  if (name == "sparsity") return Stage::sparsity;
  if (name == "finetune") return Stage::finetune;
  throw ConfigError("unknown stage '" + std::string(name) + "' (expected baseline|sparsity|finetune)");
}

void TrainConfig::validate() const {
  const std::string s(stage_name(stage));
  auto fail = [&](const std::string& what) { throw ConfigError(s + " training: " + what); };
  if (epochs == 0) fail("epochs must be >= 1");
  if (batch_size == 0) fail("batch_size must be >= 1");
  if (!(base_lr >= 0.0) || !std::isfinite(base_lr)) fail("base_lr must be finite and >= 0");
  if (!(min_lr >= 0.0) || !(min_lr <= base_lr)) fail("min_lr must lie in [0, base_lr]");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) fail("lambda must be finite and >= 0");
  if (stage == Stage::sparsity && lambda == 0.0) fail("lambda must be > 0 in the sparsity stage");
  if (stage != Stage::sparsity && lambda != 0.0) fail("lambda must be 0 outside the sparsity stage");
}

std::string MetricRecord::to_json_line() const {
  auto num = [](double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  std::ostringstream os;
  os << "{\"stage\":\"" << stage << "\",\"step\":" << step << ",\"lr\":" << num(lr)
     << ",\"loss\":" << num(loss) << ",\"eval_acc\":" << num(eval_acc) << ",\"gate_median_abs\":"
     << (gate_median_abs ? num(*gate_median_abs) : std::string("null")) << '}';
  return os.str();
}

double gate_median_abs(const VitModel& model) {
  std::vector<double> mags;
  for (const auto& g : model.gates())
    for (double v : g.data()) mags.push_back(std::abs(v));
  if (mags.empty()) throw StateError("gate_median_abs: model has no gates");
  std::sort(mags.begin(), mags.end());
  const std::size_t n = mags.size();
  return n % 2 ? mags[n / 2] : 0.5 * (mags[n / 2 - 1] + mags[n / 2]);
}

std::vector<int> predict(const VitModel& model, const Dataset& split, std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("evaluate: batch_size must be >= 1");
  const ForwardMode mode = model.pruned ? ForwardMode::hard : ForwardMode::soft;
  std::vector<int> out;
  out.reserve(split.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < split.size(); start += batch_size) {
    const std::size_t end = std::min(split.size(), start + batch_size);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    Graph g(GradMode::no_grad);
    const Tensor logits = model.forward(g, split.images(idx), mode);
    const std::size_t c = logits.cols();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      auto row = logits.data().subspan(i * c, c);
      out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  }
  return out;
}

double evaluate(const VitModel& model, const Dataset& split, std::size_t batch_size) {
  if (split.size() == 0) return 0.0;
  const auto pred = predict(model, split, batch_size);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == split.labels[i];
  return static_cast<double>(correct) / static_cast<double>(split.size());
}

namespace {

constexpr std::uint64_t kShuffleStream = 0x73687566;

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

}  // namespace

TrainResult train(VitModel& model, const DatasetSplits& data, const TrainConfig& cfg,
                  const MetricsSink& sink) {
  cfg.validate();
  if (cfg.stage == Stage::finetune && !model.pruned) {
    throw StateError("finetune stage expects a pruned (hard) model");
  }
  if (cfg.stage != Stage::finetune && model.pruned) {
    throw StateError(std::string(stage_name(cfg.stage)) + " stage expects a gated (soft) model");
  }
  if (data.train.size() == 0) throw ConfigError("training split is empty");
  const ForwardMode mode = model.pruned ? ForwardMode::hard : ForwardMode::soft;
  const std::string stage(stage_name(cfg.stage));

  TrainResult result;
  result.optimizer.hyper.weight_decay = cfg.weight_decay;
  Rng rng(mix_seed(cfg.seed, kShuffleStream));
  auto params = model.parameters();
  const std::size_t n = data.train.size();
  const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const auto total_steps = static_cast<std::int64_t>(steps_per_epoch * cfg.epochs);
  const std::size_t every = cfg.eval_every ? cfg.eval_every : steps_per_epoch;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::int64_t step = 0;
  double loss_sum = 0.0;
  std::size_t loss_count = 0;
  double lr = cfg.base_lr;

  auto emit = [&]() {
    MetricRecord r;
    r.stage = stage;
    r.step = step;
    r.lr = lr;
    r.loss = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
    r.eval_acc = evaluate(model, data.eval);
    if (!model.pruned) r.gate_median_abs = gate_median_abs(model);
    result.history.push_back(r);
    if (sink) sink(r);
    loss_sum = 0.0;
    loss_count = 0;
  };

  std::vector<std::size_t> idx;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle(order, rng);
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      idx.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                 order.begin() + static_cast<std::ptrdiff_t>(end));
      lr = cosine_lr(step, total_steps, cfg.base_lr, cfg.min_lr);

      Graph g;
      const Tensor logits = model.forward(g, data.train.images(idx), mode);
      const auto labels = data.train.labels_of(idx);
      Tensor loss = g.cross_entropy(logits, labels);
      if (cfg.lambda > 0.0) {
        const auto gates = model.gates();
        loss = g.add(loss, g.l1_penalty(gates, cfg.lambda));
      }
      const double value = loss.item();
      if (!std::isfinite(value)) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "non-finite loss: stage=%s step=%lld lr=%.6g loss=%g",
                      stage.c_str(), static_cast<long long>(step), lr, value);
        throw NumericalError(buf);
      }
      g.backward(loss);
      optimizer_step(params, result.optimizer, lr);
      for (auto& p : params) p.tensor.zero_grad();
      loss_sum += value;
      ++loss_count;
      ++step;
      if (static_cast<std::size_t>(step) % every == 0 || step == total_steps) emit();
    }
  }
  result.rng_state = rng.state();
  return result;
}

}  // namespace vtp
