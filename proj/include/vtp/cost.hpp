#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "vtp/model.hpp"
#include "vtp/prune.hpp"

namespace vtp {

/// Surviving feature count at each gate site of one block.
struct BlockWidths {
  std::size_t qkv_in = 0;
  std::size_t attn_out = 0;
  std::size_t mlp_in = 0;
  std::size_t mlp_hidden = 0;

  bool operator==(const BlockWidths&) const = default;
};

using ArchitectureWidths = std::vector<BlockWidths>;

ArchitectureWidths full_widths(const ModelConfig& config);
ArchitectureWidths widths_of(const VitModel& model);
ArchitectureWidths widths_of(const PrunePlan& plan, const ModelConfig& config);

/// Per-image cost of one block. FLOPs count multiply-accumulates.
struct BlockCost {
  std::uint64_t params = 0;
  std::uint64_t qkv_flops = 0;
  std::uint64_t attention_flops = 0;
  std::uint64_t proj_flops = 0;
  std::uint64_t mlp_flops = 0;

  std::uint64_t flops() const { return qkv_flops + attention_flops + proj_flops + mlp_flops; }
};

std::vector<BlockCost> block_costs(const ModelConfig& config, const ArchitectureWidths& widths);

/// Learnable scalars of the architecture (gate vectors excluded). A missing
/// widths argument means the unpruned model.
std::uint64_t count_params(const ModelConfig& config, const ArchitectureWidths* widths = nullptr);
/// Parameters actually held by a model, gates included for soft models.
std::uint64_t count_params(const VitModel& model);
std::uint64_t gate_param_count(const ModelConfig& config);

/// Forward multiply-accumulates for one image at config.image_size. Norms,
/// softmax, GELU and residual additions are not counted.
std::uint64_t count_flops(const ModelConfig& config, const ArchitectureWidths* widths = nullptr);
std::uint64_t count_flops(const ModelConfig& config, const ArchitectureWidths* widths,
                          std::size_t image_size);

struct BlockCostRow {
  BlockCost before;
  BlockCost after;
};

struct CostReport {
  std::string model_name;
  std::size_t image_size = 0;
  std::uint64_t params_before = 0;
  std::uint64_t params_after = 0;
  std::uint64_t flops_before = 0;
  std::uint64_t flops_after = 0;
  double params_reduced_pct = 0.0;
  double flops_reduced_pct = 0.0;
  /// Importance-score entries that pruning removes; reported apart from params.
  std::uint64_t gate_params = 0;
  std::vector<BlockCostRow> per_block;
};

CostReport make_report(const ModelConfig& config, const ArchitectureWidths& after,
                       std::string model_name = "");

/// Aligned human-readable table.
std::string format_table(const CostReport& report);
/// One `key=value` line per field; per-block rows use `per_block[i].field`.
std::string format_kv(const CostReport& report);
/// Parses format_kv output into a flat key -> value-text map.
std::map<std::string, std::string> parse_kv(const std::string& text);

}  // namespace vtp
