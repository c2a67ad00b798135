#pragma once

#include <array>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "vtp/graph.hpp"
#include "vtp/optim.hpp"
#include "vtp/tensor.hpp"

namespace vtp {

struct ModelConfig {
  std::size_t image_size = 16;
  std::size_t patch_size = 4;
  std::size_t in_channels = 3;
  std::size_t embed_dim = 64;
  std::size_t num_layers = 4;
  std::size_t num_heads = 4;
  double mlp_ratio = 4.0;
  std::size_t num_classes = 10;

  /// Throws ConfigError naming the first offending field.
  void validate() const;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  /// Patch tokens plus the class token.
  std::size_t tokens() const { return num_patches() + 1; }
  std::size_t head_dim() const { return embed_dim / num_heads; }
  std::size_t hidden_dim() const;
  std::size_t patch_dim() const { return patch_size * patch_size * in_channels; }

  static ModelConfig deit_b();
  /// ViT-B/16 analyzed at 384x384.
  static ModelConfig vit_b16();
  /// Small model used by unit tests and `analyze --model toy`.
  static ModelConfig toy();

  bool operator==(const ModelConfig&) const = default;
};

enum class SitePosition : std::uint8_t { qkv_in = 0, attn_out = 1, mlp_in = 2, mlp_hidden = 3 };

inline constexpr std::array<SitePosition, 4> kSitePositions = {
    SitePosition::qkv_in, SitePosition::attn_out, SitePosition::mlp_in, SitePosition::mlp_hidden};

std::string_view site_name(SitePosition position);

/// One gate location: a block and one of its four positions.
struct GateSite {
  std::size_t block = 0;
  SitePosition position = SitePosition::qkv_in;

  auto operator<=>(const GateSite&) const = default;
  std::string name() const;
};

/// Feature width seen by the gate at `position` in an unpruned model.
std::size_t site_width(const ModelConfig& config, SitePosition position);

/// Weight is stored [in x out]: row j multiplies input feature j.
struct Linear {
  Tensor weight;
  Tensor bias;
};

struct Norm {
  Tensor gain;
  Tensor bias;
};

struct Block {
  Norm norm1;
  Linear q, k, v, out;
  Norm norm2;
  Linear fc1, fc2;
  /// Importance scores per site, indexed by SitePosition. Empty once pruned.
  std::array<Tensor, 4> gates;
  /// Surviving feature indices per site (all indices before pruning).
  std::array<std::vector<std::size_t>, 4> keep;

  Tensor& gate(SitePosition p) { return gates[static_cast<std::size_t>(p)]; }
  const Tensor& gate(SitePosition p) const { return gates[static_cast<std::size_t>(p)]; }
  std::vector<std::size_t>& kept(SitePosition p) { return keep[static_cast<std::size_t>(p)]; }
  const std::vector<std::size_t>& kept(SitePosition p) const {
    return keep[static_cast<std::size_t>(p)];
  }
};

enum class ForwardMode {
  /// Gates multiply their features (X * diag(a)).
  soft,
  /// Physically sliced projections, no gates.
  hard,
};

inline constexpr double kLayerNormEps = 1e-6;

/// Gated vision transformer with pre-norm blocks.
struct VitModel {
  ModelConfig config;
  Linear patch_embed;
  Tensor cls_token;
  Tensor pos_embed;
  std::vector<Block> blocks;
  Norm final_norm;
  Linear head;
  bool pruned = false;

  /// images: [batch x channels x H x W]; returns [batch x num_classes].
  Tensor forward(Graph& g, const Tensor& images, ForwardMode mode) const;
  /// x: packed token rows [(batch*tokens) x d] for one block.
  Tensor block_forward(Graph& g, const Tensor& x, std::size_t block_index, std::size_t batch,
                       ForwardMode mode) const;
  /// Value width owned by each head of a block (equal until attn_out is pruned).
  std::vector<std::size_t> value_head_widths(std::size_t block_index) const;

  /// Every trainable tensor in a fixed order; gates are included for soft models.
  std::vector<ParamRef> parameters() const;
  /// All 4*L gates in (block, position) order. Empty for pruned models.
  std::vector<Tensor> gates() const;
  Tensor& gate(const GateSite& site) { return blocks.at(site.block).gate(site.position); }
  const Tensor& gate(const GateSite& site) const {
    return blocks.at(site.block).gate(site.position);
  }

  VitModel clone() const;
  void zero_grad();
};

VitModel init_model(const ModelConfig& config, std::uint64_t seed);

/// [batch x C x H x W] -> [(batch*patches) x patch_dim]. Patches run row-major
/// over the grid; within a patch the channel index is fastest.
Tensor patchify(const Tensor& images, const ModelConfig& config);

}  // namespace vtp
