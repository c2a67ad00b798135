#include "vtp/pipeline.hpp"

#include <fstream>
#include <ostream>

#include "vtp/random.hpp"

namespace vtp {

int exit_code_for(const std::exception& e) {
  if (const auto* s = dynamic_cast<const StageError*>(&e)) return s->exit_code();
  if (dynamic_cast<const NumericalError*>(&e)) return kExitNumerical;
  if (dynamic_cast<const FormatError*>(&e) || dynamic_cast<const StateError*>(&e))
    return kExitCheckpoint;
  return kExitConfig;
}

namespace {

constexpr std::uint64_t kInitStream = 0x696e6974;

template <typename F>
auto in_stage(const std::string& stage, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, exit_code_for(e), e.what());
  }
}

class MetricsFile {
 public:
  MetricsFile(const std::optional<std::filesystem::path>& dir, bool append) {
    if (dir) {
      os_.open(*dir / artifact::metrics, append ? std::ios::app : std::ios::trunc);
      if (!os_) throw FormatError("cannot open metrics log in '" + dir->string() + "'");
    }
  }
  void write(const MetricRecord& r) {
    if (os_.is_open()) {
      os_ << r.to_json_line() << '\n';
      os_.flush();
    }
  }

 private:
  std::ofstream os_;
};

}  // namespace

VitModel initial_model(const PipelineConfig& cfg) {
  return init_model(cfg.model, mix_seed(cfg.train_baseline.seed, kInitStream));
}

Checkpoint run_train_stage(const VitModel& input, const DatasetSplits& data, const TrainConfig& cfg,
                           const MetricsSink& sink) {
  Checkpoint out;
  out.model = input.clone();
  auto result = train(out.model, data, cfg, sink);
  out.stage = std::string(stage_name(cfg.stage));
  out.optimizer = std::move(result.optimizer);
  out.rng_state = std::move(result.rng_state);
  return out;
}

PruneOutcome prune_model(const VitModel& sparse, double rate, const std::string& model_name) {
  PruneOutcome out;
  out.plan = make_plan(sparse, rate);
  out.pruned.model = apply_plan(sparse, out.plan);
  out.pruned.stage = stage_tag::pruned;
  out.report = make_report(sparse.config, widths_of(out.pruned.model), model_name);
  return out;
}

PipelineResult run_pipeline(const PipelineConfig& cfg, const PipelineOptions& options) {
  in_stage("config", [&] {
    cfg.validate();
    return 0;
  });
  const auto& dir = options.out_dir;
  if (dir) std::filesystem::create_directories(*dir);
  auto log = [&](const std::string& line) {
    if (options.log) *options.log << line << '\n' << std::flush;
  };
  auto exists = [&](const char* name) {
    return dir && options.resume && std::filesystem::exists(*dir / name);
  };

  PipelineResult result;
  MetricsFile metrics(dir, options.resume);
  const MetricsSink sink = [&](const MetricRecord& r) {
    result.history.push_back(r);
    metrics.write(r);
  };
  const DatasetSplits data = in_stage("data", [&] { return make_dataset(cfg.data); });

  // 1) baseline
  VitModel baseline = in_stage("baseline", [&] {
    if (exists(artifact::baseline)) {
      log("baseline: resuming from " + (*dir / artifact::baseline).string());
      return load_checkpoint(*dir / artifact::baseline).model;
    }
    log("baseline: training");
    auto ckpt = run_train_stage(initial_model(cfg), data, cfg.train_baseline, sink);
    if (dir) save_checkpoint(ckpt, *dir / artifact::baseline);
    return std::move(ckpt.model);
  });
  result.baseline_train_acc = evaluate(baseline, data.train);
  result.baseline_eval_acc = evaluate(baseline, data.eval);
  log("baseline: train_acc=" + std::to_string(result.baseline_train_acc) +
      " eval_acc=" + std::to_string(result.baseline_eval_acc));

  // 2) sparsity training
  result.sparse_model = in_stage("sparsity", [&] {
    if (exists(artifact::sparse)) {
      log("sparsity: resuming from " + (*dir / artifact::sparse).string());
      return load_checkpoint(*dir / artifact::sparse).model;
    }
    log("sparsity: training with lambda=" + std::to_string(cfg.train_sparsity.lambda));
    auto ckpt = run_train_stage(baseline, data, cfg.train_sparsity, sink);
    if (dir) save_checkpoint(ckpt, *dir / artifact::sparse);
    return std::move(ckpt.model);
  });
  result.sparse_eval_acc = evaluate(result.sparse_model, data.eval);
  log("sparsity: eval_acc=" + std::to_string(result.sparse_eval_acc) +
      " gate_median_abs=" + std::to_string(gate_median_abs(result.sparse_model)));

  // 3) prune
  auto pruned = in_stage("prune", [&] {
    auto out = prune_model(result.sparse_model, cfg.rate, "toy-task");
    if (dir) save_checkpoint(out.pruned, *dir / artifact::pruned);
    return out;
  });
  result.plan = pruned.plan;
  result.pruned_eval_acc = evaluate(pruned.pruned.model, data.eval);
  {
    MetricRecord r;
    r.stage = stage_tag::pruned;
    r.eval_acc = result.pruned_eval_acc;
    sink(r);
  }
  log("prune: rate=" + std::to_string(cfg.rate) + " achieved=" +
      std::to_string(pruned.plan.achieved_rate) + " eval_acc=" +
      std::to_string(result.pruned_eval_acc));

  // 4) finetune
  auto final_ckpt = in_stage("finetune", [&] {
    log("finetune: training");
    auto ckpt = run_train_stage(pruned.pruned.model, data, cfg.finetune, sink);
    if (dir) save_checkpoint(ckpt, *dir / artifact::final_model);
    return ckpt;
  });
  result.final_model = std::move(final_ckpt.model);
  result.final_eval_acc = evaluate(result.final_model, data.eval);
  log("finetune: eval_acc=" + std::to_string(result.final_eval_acc));

  result.report = make_report(cfg.model, widths_of(result.final_model), "toy-task");
  if (dir) {
    in_stage("report", [&] {
      write_file_atomic(*dir / artifact::report_table, format_table(result.report));
      write_file_atomic(*dir / artifact::report_kv, format_kv(result.report));
      return 0;
    });
  }
  return result;
}

}  // namespace vtp
