#pragma once

#include <exception>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "vtp/checkpoint.hpp"
#include "vtp/config.hpp"
#include "vtp/cost.hpp"
#include "vtp/error.hpp"
#include "vtp/prune.hpp"
#include "vtp/train.hpp"

namespace vtp {

/// Process exit codes shared by the CLI and pipeline stage errors.
enum ExitCode : int {
  kExitOk = 0,
  kExitConfig = 1,
  kExitCheckpoint = 2,
  kExitNumerical = 3,
};

/// 1 for configuration/usage problems, 2 for checkpoint/state problems,
/// 3 for numerical aborts.
int exit_code_for(const std::exception& e);

/// A failure inside one pipeline stage, tagged with that stage.
class StageError : public Error {
 public:
  StageError(std::string stage, int exit_code, const std::string& what)
      : Error("stage " + stage + ": " + what), stage_(std::move(stage)), exit_code_(exit_code) {}
  const std::string& stage() const { return stage_; }
  int exit_code() const { return exit_code_; }

 private:
  std::string stage_;
  int exit_code_;
};

/// Fixed artifact names written by run_pipeline into its output directory.
namespace artifact {
inline constexpr const char* baseline = "baseline.ckpt";
inline constexpr const char* sparse = "sparse.ckpt";
inline constexpr const char* pruned = "pruned.ckpt";
inline constexpr const char* final_model = "final.ckpt";
inline constexpr const char* report_table = "report.txt";
inline constexpr const char* report_kv = "report.kv";
inline constexpr const char* metrics = "metrics.log";
}  // namespace artifact

/// Fresh gated model for the baseline stage, seeded from the baseline config.
VitModel initial_model(const PipelineConfig& cfg);

/// Runs one training stage on a copy of `input` and packages the result.
Checkpoint run_train_stage(const VitModel& input, const DatasetSplits& data, const TrainConfig& cfg,
                           const MetricsSink& sink = {});

struct PruneOutcome {
  Checkpoint pruned;
  PrunePlan plan;
  CostReport report;
};

/// Global-threshold prune of a gated checkpoint at `rate`.
PruneOutcome prune_model(const VitModel& sparse, double rate, const std::string& model_name = "");

struct PipelineOptions {
  /// When set, stage checkpoints, reports and metrics are written here.
  std::optional<std::filesystem::path> out_dir;
  /// Reuse baseline.ckpt / sparse.ckpt already present in out_dir.
  bool resume = false;
  /// Human-readable progress lines.
  std::ostream* log = nullptr;
};

struct PipelineResult {
  VitModel sparse_model;
  VitModel final_model;
  PrunePlan plan;
  CostReport report;
  double baseline_train_acc = 0.0;
  double baseline_eval_acc = 0.0;
  double sparse_eval_acc = 0.0;
  double pruned_eval_acc = 0.0;
  double final_eval_acc = 0.0;
  std::vector<MetricRecord> history;
};

/// Baseline training, sparsity training, pruning at cfg.rate, fine-tuning.
/// Errors are rethrown as StageError carrying the stage tag.
PipelineResult run_pipeline(const PipelineConfig& cfg, const PipelineOptions& options = {});

}  // namespace vtp
