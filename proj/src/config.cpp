#include "vtp/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "vtp/error.hpp"

namespace vtp {

using nlohmann::json;

PipelineConfig::PipelineConfig() {
  model = ModelConfig{16, 4, 3, 64, 4, 4, 4.0, 10};
  data = SyntheticDatasetSpec{};
  data.num_classes = model.num_classes;
  data.image_size = model.image_size;
  data.channels = model.in_channels;

  train_baseline.stage = Stage::baseline;
  train_baseline.epochs = 5;
  train_baseline.batch_size = 32;
  train_baseline.base_lr = 1e-3;
  train_baseline.min_lr = 1e-5;
  train_baseline.weight_decay = 0.05;
  train_baseline.seed = 1;

  train_sparsity = train_baseline;
  train_sparsity.stage = Stage::sparsity;
  train_sparsity.epochs = 16;
  train_sparsity.base_lr = 2e-3;
  train_sparsity.lambda = 1e-3;
  train_sparsity.seed = 2;

  finetune = train_sparsity;
  finetune.stage = Stage::finetune;
  finetune.lambda = 0.0;
  finetune.epochs = 5;
  finetune.seed = 3;
}

void PipelineConfig::validate() const {
  model.validate();
  data.validate();
  train_baseline.validate();
  train_sparsity.validate();
  finetune.validate();
  if (train_baseline.stage != Stage::baseline) throw ConfigError("train_baseline: wrong stage");
  if (train_sparsity.stage != Stage::sparsity) throw ConfigError("train_sparsity: wrong stage");
  if (finetune.stage != Stage::finetune) throw ConfigError("finetune: wrong stage");
  if (data.num_classes != model.num_classes)
    throw ConfigError("data.num_classes must equal model.num_classes");
  if (data.image_size != model.image_size)
    throw ConfigError("data.image_size must equal model.image_size");
  if (data.channels != model.in_channels)
    throw ConfigError("data.channels must equal model.in_channels");
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("prune.rate must lie in [0, 1)");
}

namespace {

class Section {
 public:
  Section(const json& j, std::string name, std::vector<std::string>* defaulted)
      : j_(j), name_(std::move(name)), defaulted_(defaulted) {
    if (!j_.is_object()) throw ConfigError("section '" + name_ + "' must be an object");
  }

  void count(const char* key, std::size_t& out) {
    known_.insert(key);
    if (!j_.contains(key)) return note_default(key, std::to_string(out));
    const auto& v = j_.at(key);
    if (!v.is_number_integer() || (v.is_number_integer() && v.get<long long>() < 0))
      throw ConfigError(where(key) + " must be a non-negative integer");
    out = v.get<std::size_t>();
  }

  void seed(const char* key, std::uint64_t& out) {
    known_.insert(key);
    if (!j_.contains(key)) return note_default(key, std::to_string(out));
    const auto& v = j_.at(key);
    if (!v.is_number_unsigned()) throw ConfigError(where(key) + " must be a non-negative integer");
    out = v.get<std::uint64_t>();
  }

  void real(const char* key, double& out) {
    known_.insert(key);
    if (!j_.contains(key)) {
      std::ostringstream os;
      os << out;
      return note_default(key, os.str());
    }
    const auto& v = j_.at(key);
    if (!v.is_number()) throw ConfigError(where(key) + " must be a number");
    out = v.get<double>();
  }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!known_.count(key)) throw ConfigError("unknown key '" + key + "' in section '" + name_ + "'");
  }

 private:
  std::string where(const char* key) const { return name_ + "." + key; }
  void note_default(const char* key, const std::string& value) {
    if (defaulted_) defaulted_->push_back(where(key) + "=" + value);
  }

  const json& j_;
  std::string name_;
  std::vector<std::string>* defaulted_;
  std::set<std::string> known_;
};

void read_model(Section& s, ModelConfig& c) {
  s.count("image_size", c.image_size);
  s.count("patch_size", c.patch_size);
  s.count("in_channels", c.in_channels);
  s.count("embed_dim", c.embed_dim);
  s.count("num_layers", c.num_layers);
  s.count("num_heads", c.num_heads);
  s.real("mlp_ratio", c.mlp_ratio);
  s.count("num_classes", c.num_classes);
  s.finish();
}

void read_train(Section& s, TrainConfig& c) {
  s.count("epochs", c.epochs);
  s.count("batch_size", c.batch_size);
  s.real("base_lr", c.base_lr);
  s.real("min_lr", c.min_lr);
  s.real("weight_decay", c.weight_decay);
  s.real("lambda", c.lambda);
  s.seed("seed", c.seed);
  s.count("eval_every", c.eval_every);
  s.finish();
}

json train_to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},         {"batch_size", c.batch_size}, {"base_lr", c.base_lr},
          {"min_lr", c.min_lr},         {"weight_decay", c.weight_decay},
          {"lambda", c.lambda},         {"seed", c.seed},             {"eval_every", c.eval_every}};
}

const json& section_or_empty(const json& j, const char* name) {
  static const json empty = json::object();
  return j.contains(name) ? j.at(name) : empty;
}

}  // namespace

json model_config_to_json(const ModelConfig& c) {
  return {{"image_size", c.image_size}, {"patch_size", c.patch_size},
          {"in_channels", c.in_channels}, {"embed_dim", c.embed_dim},
          {"num_layers", c.num_layers},   {"num_heads", c.num_heads},
          {"mlp_ratio", c.mlp_ratio},     {"num_classes", c.num_classes}};
}

ModelConfig model_config_from_json(const json& j, const ModelConfig& base,
                                   std::vector<std::string>* defaulted) {
  ModelConfig c = base;
  Section s(j, "model", defaulted);
  read_model(s, c);
  c.validate();
  return c;
}

json pipeline_config_to_json(const PipelineConfig& c) {
  return {{"model", model_config_to_json(c.model)},
          {"data",
           {{"num_classes", c.data.num_classes},
            {"train_per_class", c.data.train_per_class},
            {"eval_per_class", c.data.eval_per_class},
            {"image_size", c.data.image_size},
            {"channels", c.data.channels},
            {"noise_std", c.data.noise_std},
            {"seed", c.data.seed}}},
          {"train_baseline", train_to_json(c.train_baseline)},
          {"train_sparsity", train_to_json(c.train_sparsity)},
          {"prune", {{"rate", c.rate}}},
          {"finetune", train_to_json(c.finetune)}};
}

PipelineConfig pipeline_config_from_json(const json& j, std::vector<std::string>* defaulted) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const std::set<std::string> sections = {"model",          "data",  "train_baseline",
                                                 "train_sparsity", "prune", "finetune"};
  for (const auto& [key, value] : j.items())
    if (!sections.count(key)) throw ConfigError("unknown section '" + key + "'");

  PipelineConfig c;
  {
    Section s(section_or_empty(j, "model"), "model", defaulted);
    read_model(s, c.model);
  }
  // Data geometry follows the model unless stated explicitly.
  c.data.num_classes = c.model.num_classes;
  c.data.image_size = c.model.image_size;
  c.data.channels = c.model.in_channels;
  {
    Section s(section_or_empty(j, "data"), "data", defaulted);
    s.count("num_classes", c.data.num_classes);
    s.count("train_per_class", c.data.train_per_class);
    s.count("eval_per_class", c.data.eval_per_class);
    s.count("image_size", c.data.image_size);
    s.count("channels", c.data.channels);
    s.real("noise_std", c.data.noise_std);
    s.seed("seed", c.data.seed);
    s.finish();
  }
  {
    Section s(section_or_empty(j, "train_baseline"), "train_baseline", defaulted);
    read_train(s, c.train_baseline);
  }
  {
    Section s(section_or_empty(j, "train_sparsity"), "train_sparsity", defaulted);
    read_train(s, c.train_sparsity);
  }
  {
    Section s(section_or_empty(j, "prune"), "prune", defaulted);
    s.real("rate", c.rate);
    s.finish();
  }
  {
    Section s(section_or_empty(j, "finetune"), "finetune", defaulted);
    read_train(s, c.finetune);
  }
  c.validate();
  return c;
}

PipelineConfig load_config_file(const std::filesystem::path& path,
                                std::vector<std::string>* defaulted) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file '" + path.string() + "'");
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError("config file '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return pipeline_config_from_json(j, defaulted);
}

}  // namespace vtp
