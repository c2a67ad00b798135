#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "vtp/data.hpp"
#include "vtp/model.hpp"
#include "vtp/train.hpp"

namespace vtp {

/// Everything a full train -> prune -> finetune run needs.
///
/// The defaults are the calibrated toy task: 16x16 gratings, 10 classes,
/// a 4-layer d=64 transformer.
struct PipelineConfig {
  ModelConfig model;
  SyntheticDatasetSpec data;
  TrainConfig train_baseline;
  TrainConfig train_sparsity;
  TrainConfig finetune;
  double rate = 0.4;

  PipelineConfig();
  /// Checks every section and their mutual consistency (classes, image size, channels).
  void validate() const;
};

nlohmann::json model_config_to_json(const ModelConfig& c);
/// Strict: unknown keys and wrong types raise ConfigError. Missing keys keep
/// the value already in `base` and are appended to `defaulted` when given.
ModelConfig model_config_from_json(const nlohmann::json& j, const ModelConfig& base = {},
                                   std::vector<std::string>* defaulted = nullptr);

nlohmann::json pipeline_config_to_json(const PipelineConfig& c);
/// Sections: model, data, train_baseline, train_sparsity, prune, finetune.
PipelineConfig pipeline_config_from_json(const nlohmann::json& j,
                                         std::vector<std::string>* defaulted = nullptr);
PipelineConfig load_config_file(const std::filesystem::path& path,
                                std::vector<std::string>* defaulted = nullptr);

}  // namespace vtp
