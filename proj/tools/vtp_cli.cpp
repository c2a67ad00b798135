// vtp: command-line front end for the train / prune / finetune pipeline and
// the model cost analyzer.
//
// Exit codes: 0 success, 1 configuration error, 2 checkpoint error,
// 3 numerical abort. Failures print one line to stderr:
//   error: code=<n> kind=<config|checkpoint|numerical> message=<text>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "vtp/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

const char* kind_name(int code) {
  switch (code) {
    case vtp::kExitConfig: return "config";
    case vtp::kExitCheckpoint: return "checkpoint";
    case vtp::kExitNumerical: return "numerical";
  }
  return "internal";
}

int fail(int code, const std::string& message) {
  std::string flat = message;
  for (auto& ch : flat)
    if (ch == '\n') ch = ' ';
  std::cerr << "error: code=" << code << " kind=" << kind_name(code) << " message=" << flat << '\n';
  return code;
}

void echo_defaults(const std::vector<std::string>& defaulted) {
  for (const auto& d : defaulted) std::cout << "default: " << d << '\n';
}

vtp::PipelineConfig read_config(const std::string& path) {
  if (path.empty()) return vtp::PipelineConfig{};
  std::vector<std::string> defaulted;
  auto cfg = vtp::load_config_file(path, &defaulted);
  echo_defaults(defaulted);
  return cfg;
}

/// Table goes to `path`; the key-value form goes next to it with a .kv extension.
std::pair<fs::path, fs::path> report_paths(const fs::path& path) {
  fs::path kv = path;
  kv.replace_extension(".kv");
  fs::path table = path;
  if (table == kv) table.replace_extension(".txt");
  return {table, kv};
}

vtp::Checkpoint load_or_throw(const std::string& path) {
  try {
    return vtp::load_checkpoint(path);
  } catch (const vtp::FormatError& e) {
    throw vtp::FormatError("checkpoint '" + path + "': " + e.what());
  }
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string config;
  std::string stage;
  std::string in;
  std::string out;
  std::string metrics;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& a) {
  const auto cfg = read_config(a.config);
  const vtp::Stage stage = vtp::parse_stage(a.stage);
  vtp::TrainConfig tc = stage == vtp::Stage::baseline   ? cfg.train_baseline
                        : stage == vtp::Stage::sparsity ? cfg.train_sparsity
                                                        : cfg.finetune;
  if (a.seed) tc.seed = *a.seed;
  if (stage != vtp::Stage::baseline && a.in.empty()) {
    throw vtp::ConfigError("--in is required for stage " + a.stage);
  }

  vtp::VitModel start;
  if (a.in.empty()) {
    vtp::PipelineConfig seeded = cfg;
    seeded.train_baseline.seed = tc.seed;
    start = vtp::initial_model(seeded);
  } else {
    auto ckpt = load_or_throw(a.in);
    if (!(ckpt.model.config == cfg.model)) {
      throw vtp::StateError("checkpoint '" + a.in + "' architecture differs from the config's model section");
    }
    if (stage == vtp::Stage::finetune && !ckpt.model.pruned) {
      throw vtp::StateError("stage finetune needs a pruned checkpoint, '" + a.in + "' is stage " + ckpt.stage);
    }
    if (stage != vtp::Stage::finetune && ckpt.model.pruned) {
      throw vtp::StateError("stage " + a.stage + " needs a gated checkpoint, '" + a.in + "' is pruned");
    }
    start = std::move(ckpt.model);
  }

  const auto data = vtp::make_dataset(cfg.data);
  const fs::path metrics_path = a.metrics.empty() ? fs::path(a.out + ".metrics.log") : fs::path(a.metrics);
  std::ofstream metrics(metrics_path, std::ios::app);
  if (!metrics) throw vtp::ConfigError("cannot open metrics log '" + metrics_path.string() + "'");
  auto ckpt = vtp::run_train_stage(start, data, tc, [&](const vtp::MetricRecord& r) {
    metrics << r.to_json_line() << '\n';
    metrics.flush();
    std::cout << r.to_json_line() << '\n';
  });
  vtp::save_checkpoint(ckpt, a.out);
  std::cout << "stage=" << a.stage << " train_acc=" << vtp::evaluate(ckpt.model, data.train)
            << " eval_acc=" << vtp::evaluate(ckpt.model, data.eval) << " out=" << a.out << '\n';
  return vtp::kExitOk;
}

// ---------------------------------------------------------------- prune

struct PruneArgs {
  std::string config;
  std::string in;
  double rate = 0.0;
  std::string out;
  std::string report;
};

int cmd_prune(const PruneArgs& a) {
  if (!(a.rate >= 0.0 && a.rate < 1.0)) {
    throw vtp::ConfigError("--rate " + std::to_string(a.rate) + " outside [0, 1)");
  }
  std::optional<vtp::PipelineConfig> cfg;
  if (!a.config.empty()) cfg = read_config(a.config);
  auto ckpt = load_or_throw(a.in);
  if (ckpt.model.pruned) throw vtp::StateError("checkpoint '" + a.in + "' is already pruned");
  if (cfg && !(cfg->model == ckpt.model.config)) {
    throw vtp::StateError("checkpoint '" + a.in + "' architecture differs from the config's model section");
  }
  if (ckpt.stage == vtp::stage_tag::baseline) {
    std::cerr << "warning: pruning a baseline-stage checkpoint; importance scores were never "
                 "trained with sparsity\n";
  } else if (ckpt.stage != vtp::stage_tag::sparsity) {
    std::cerr << "warning: pruning a checkpoint of stage '" << ckpt.stage << "'\n";
  }
  const auto outcome = vtp::prune_model(ckpt.model, a.rate, fs::path(a.in).stem().string());
  vtp::save_checkpoint(outcome.pruned, a.out);
  const auto [table_path, kv_path] = report_paths(a.report);
  vtp::write_file_atomic(table_path, vtp::format_table(outcome.report));
  vtp::write_file_atomic(kv_path, vtp::format_kv(outcome.report));
  std::cout << "tau=" << outcome.plan.tau << " requested_rate=" << outcome.plan.requested_rate
            << " achieved_rate=" << outcome.plan.achieved_rate
            << " protected_sites=" << outcome.plan.protected_sites << '\n'
            << vtp::format_table(outcome.report);
  return vtp::kExitOk;
}

// ---------------------------------------------------------------- analyze

struct AnalyzeArgs {
  std::string model;
  std::size_t image_size = 0;
  std::string in;
  std::string format = "table";
};

vtp::ModelConfig preset(const std::string& name) {
  if (name == "deit-b") return vtp::ModelConfig::deit_b();
  if (name == "vit-b16") return vtp::ModelConfig::vit_b16();
  if (name == "toy") return vtp::ModelConfig::toy();
  if (name == "task") return vtp::PipelineConfig{}.model;
  if (name.rfind("custom:", 0) == 0) {
    const std::string path = name.substr(7);
    std::ifstream is(path);
    if (!is) throw vtp::ConfigError("cannot read custom model file '" + path + "'");
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
      throw vtp::ConfigError("custom model file '" + path + "' is not valid JSON: " + e.what());
    }
    if (j.contains("model")) return vtp::pipeline_config_from_json(j).model;
    return vtp::model_config_from_json(j);
  }
  throw vtp::ConfigError("unknown model preset '" + name +
                         "' (presets: deit-b, vit-b16, toy, task, custom:PATH)");
}

int cmd_analyze(const AnalyzeArgs& a) {
  if (a.model.empty() && a.in.empty()) throw vtp::ConfigError("--model or --in is required");
  std::optional<vtp::ModelConfig> config;
  if (!a.model.empty()) config = preset(a.model);
  vtp::ArchitectureWidths widths;
  if (!a.in.empty()) {
    const auto ckpt = load_or_throw(a.in);
    if (config && !(ckpt.model.config == *config)) {
      throw vtp::ConfigError("checkpoint '" + a.in + "' architecture differs from --model " + a.model);
    }
    config = ckpt.model.config;
    widths = vtp::widths_of(ckpt.model);
  } else {
    widths = vtp::full_widths(*config);
  }
  if (a.image_size) config->image_size = a.image_size;
  config->validate();
  const auto report = vtp::make_report(*config, widths, a.model.empty() ? a.in : a.model);
  if (a.format == "table" || a.format == "both") std::cout << vtp::format_table(report);
  if (a.format == "both") std::cout << '\n';
  if (a.format == "kv" || a.format == "both") std::cout << vtp::format_kv(report);
  return vtp::kExitOk;
}

// ---------------------------------------------------------------- pipeline

struct PipelineArgs {
  std::string config;
  std::optional<double> rate;
  std::string out_dir;
  bool resume = false;
};

int cmd_pipeline(const PipelineArgs& a) {
  auto cfg = read_config(a.config);
  if (a.rate) cfg.rate = *a.rate;
  vtp::PipelineOptions opts;
  opts.out_dir = a.out_dir;
  opts.resume = a.resume;
  opts.log = &std::cout;
  const auto result = vtp::run_pipeline(cfg, opts);
  std::cout << "baseline_train_acc=" << result.baseline_train_acc
            << " baseline_eval_acc=" << result.baseline_eval_acc
            << " final_eval_acc=" << result.final_eval_acc << '\n'
            << vtp::format_table(result.report);
  return vtp::kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Vision transformer dimension pruning: train, prune, finetune and cost analysis"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "run one training stage and write a checkpoint");
  train_cmd->add_option("--config", train.config, "pipeline config file (JSON); built-in toy task when omitted");
  train_cmd->add_option("--stage", train.stage, "stage to run")
      ->required()
      ->check(CLI::IsMember({"baseline", "sparsity", "finetune"}));
  train_cmd->add_option("--in", train.in, "input checkpoint (required for sparsity and finetune)");
  train_cmd->add_option("--out", train.out, "output checkpoint")->required();
  train_cmd->add_option("--metrics", train.metrics, "metrics log (default: <out>.metrics.log)");
  train_cmd->add_option("--seed", train.seed, "override the stage seed from the config");

  PruneArgs prune;
  auto* prune_cmd = app.add_subcommand("prune", "global-threshold prune of a sparsity-stage checkpoint");
  prune_cmd->add_option("--config", prune.config, "pipeline config file used to cross-check the architecture");
  prune_cmd->add_option("--in", prune.in, "gated input checkpoint")->required();
  prune_cmd->add_option("--rate", prune.rate, "fraction of all importance scores to remove, in [0, 1)")
      ->required();
  prune_cmd->add_option("--out", prune.out, "pruned output checkpoint")->required();
  prune_cmd->add_option("--report", prune.report,
                        "cost report path; the table is written there and the key-value form "
                        "next to it with a .kv extension")
      ->required();

  AnalyzeArgs analyze;
  auto* analyze_cmd = app.add_subcommand("analyze", "parameter and FLOP accounting");
  analyze_cmd->add_option("--model", analyze.model, "deit-b | vit-b16 | toy | task | custom:PATH");
  analyze_cmd->add_option("--image-size", analyze.image_size, "input resolution (default: the preset's)");
  analyze_cmd->add_option("--in", analyze.in, "pruned checkpoint to account for");
  analyze_cmd->add_option("--format", analyze.format, "output format")
      ->check(CLI::IsMember({"table", "kv", "both"}))
      ->capture_default_str();

  PipelineArgs pipe;
  auto* pipe_cmd = app.add_subcommand("pipeline", "baseline -> sparsity -> prune -> finetune");
  pipe_cmd->add_option("--config", pipe.config, "pipeline config file (JSON); built-in toy task when omitted");
  pipe_cmd->add_option("--rate", pipe.rate, "pruning rate (overrides prune.rate)");
  pipe_cmd->add_option("--out-dir", pipe.out_dir, "directory for checkpoints, reports and metrics")
      ->required();
  pipe_cmd->add_flag("--resume", pipe.resume,
                     "reuse baseline.ckpt / sparse.ckpt already present in --out-dir");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return fail(vtp::kExitConfig, e.what());
  }

  try {
    if (*train_cmd) return cmd_train(train);
    if (*prune_cmd) return cmd_prune(prune);
    if (*analyze_cmd) return cmd_analyze(analyze);
    if (*pipe_cmd) return cmd_pipeline(pipe);
  } catch (const vtp::StageError& e) {
    return fail(e.exit_code(), e.what());
  } catch (const std::exception& e) {
    return fail(vtp::exit_code_for(e), e.what());
  }
  return vtp::kExitConfig;
}
