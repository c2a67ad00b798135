#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "vtp/model.hpp"
#include "vtp/optim.hpp"

namespace vtp {

inline constexpr char kCheckpointMagic[4] = {'V', 'T', 'P', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Stage tags written by the pipeline.
namespace stage_tag {
inline constexpr const char* baseline = "baseline";
inline constexpr const char* sparsity = "sparsity";
inline constexpr const char* pruned = "pruned";
inline constexpr const char* finetune = "finetune";
}  // namespace stage_tag

struct Checkpoint {
  VitModel model;
  std::string stage;
  std::optional<OptimizerState> optimizer;
  std::string rng_state;
};

/// Layout: "VTPC", u32 version, u64 header length, JSON header (config,
/// stage, tensor directory with name/shape/offset, keep indices for pruned
/// models, optimizer hyperparameters, rng state), then raw little-endian
/// float64 payloads. All integers are little-endian.
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
/// Throws FormatError naming the offending field; never returns a partial model.
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

/// Writes to a temporary sibling file, then renames over `path`.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Writes text to a temporary sibling file, then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace vtp
