#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "vtp/data.hpp"
#include "vtp/model.hpp"
#include "vtp/optim.hpp"

namespace vtp {

enum class Stage { baseline, sparsity, finetune };

std::string_view stage_name(Stage stage);
Stage parse_stage(std::string_view name);

struct TrainConfig {
  Stage stage = Stage::baseline;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double base_lr = 1e-3;
  double min_lr = 1e-5;
  double weight_decay = 0.05;
  /// l1 weight on the importance scores; nonzero only for the sparsity stage.
  double lambda = 0.0;
  std::uint64_t seed = 1;
  /// Steps between metric records; 0 records once per epoch.
  std::size_t eval_every = 0;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct MetricRecord {
  std::string stage;
  std::int64_t step = 0;
  double lr = 0.0;
  /// Mean training objective since the previous record.
  double loss = 0.0;
  double eval_acc = 0.0;
  /// Median |score| over all gates; absent for pruned models.
  std::optional<double> gate_median_abs;

  /// Single-line JSON object with keys stage, step, lr, loss, eval_acc, gate_median_abs.
  std::string to_json_line() const;
};

using MetricsSink = std::function<void(const MetricRecord&)>;

struct TrainResult {
  std::vector<MetricRecord> history;
  OptimizerState optimizer;
  std::string rng_state;
};

/// Trains in place. Soft forward for baseline/sparsity, hard forward for
/// finetune; the objective is cross-entropy plus lambda*||scores||_1 in the
/// sparsity stage. Throws NumericalError on a non-finite loss.
TrainResult train(VitModel& model, const DatasetSplits& data, const TrainConfig& cfg,
                  const MetricsSink& sink = {});

/// Top-1 accuracy; ties in the logits resolve to the lowest class index.
double evaluate(const VitModel& model, const Dataset& split, std::size_t batch_size = 64);

std::vector<int> predict(const VitModel& model, const Dataset& split, std::size_t batch_size = 64);

double gate_median_abs(const VitModel& model);

}  // namespace vtp
