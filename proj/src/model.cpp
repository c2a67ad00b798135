#include "vtp/model.hpp"

#include <cmath>
#include <numeric>

#include "vtp/error.hpp"
#include "vtp/random.hpp"

namespace vtp {

std::size_t ModelConfig::hidden_dim() const {
  return static_cast<std::size_t>(std::llround(mlp_ratio * static_cast<double>(embed_dim)));
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("model config: " + what); };
  if (image_size == 0) fail("image_size must be positive");
  if (patch_size == 0) fail("patch_size must be positive");
  if (image_size % patch_size != 0) fail("image_size must be divisible by patch_size");
  if (in_channels == 0) fail("in_channels must be positive");
  if (embed_dim == 0) fail("embed_dim must be positive");
  if (num_layers == 0) fail("num_layers must be positive");
  if (num_heads == 0) fail("num_heads must be positive");
  if (embed_dim % num_heads != 0) fail("embed_dim must be divisible by num_heads");
  if (!(mlp_ratio > 0.0) || !std::isfinite(mlp_ratio)) fail("mlp_ratio must be positive");
  const double hidden = mlp_ratio * static_cast<double>(embed_dim);
  if (std::abs(hidden - std::round(hidden)) > 1e-9) fail("mlp_ratio * embed_dim must be an integer");
  if (num_classes == 0) fail("num_classes must be positive");
}

ModelConfig ModelConfig::deit_b() { return {224, 16, 3, 768, 12, 12, 4.0, 1000}; }
ModelConfig ModelConfig::vit_b16() { return {384, 16, 3, 768, 12, 12, 4.0, 1000}; }
ModelConfig ModelConfig::toy() { return {16, 4, 3, 32, 2, 4, 4.0, 10}; }

std::string_view site_name(SitePosition position) {
  switch (position) {
    case SitePosition::qkv_in: return "qkv_in";
    case SitePosition::attn_out: return "attn_out";
    case SitePosition::mlp_in: return "mlp_in";
    case SitePosition::mlp_hidden: return "mlp_hidden";
  }
  return "?";
}

std::string GateSite::name() const {
  return "blocks." + std::to_string(block) + "." + std::string(site_name(position));
}

std::size_t site_width(const ModelConfig& config, SitePosition position) {
  return position == SitePosition::mlp_hidden ? config.hidden_dim() : config.embed_dim;
}

namespace {

Tensor param(Shape shape, double fill = 0.0) { return Tensor(std::move(shape), fill, true); }

Tensor trunc_normal(Shape shape, Rng& rng) {
  Tensor t(std::move(shape), 0.0, true);
  for (auto& v : t.data()) v = rng.truncated_normal(0.02);
  return t;
}

Linear make_linear(std::size_t in, std::size_t out, Rng& rng) {
  return {trunc_normal({in, out}, rng), param({out})};
}

Norm make_norm(std::size_t d) { return {param({d}, 1.0), param({d})}; }

Linear clone_linear(const Linear& l) { return {l.weight.clone(), l.bias.clone()}; }
Norm clone_norm(const Norm& n) { return {n.gain.clone(), n.bias.clone()}; }

bool is_full(const std::vector<std::size_t>& keep, std::size_t width) {
  return keep.size() == width;
}

}  // namespace

VitModel init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const std::size_t d = config.embed_dim;
  VitModel m;
  m.config = config;
  m.patch_embed = make_linear(config.patch_dim(), d, rng);
  m.cls_token = trunc_normal({d}, rng);
  m.pos_embed = trunc_normal({config.tokens(), d}, rng);
  m.blocks.resize(config.num_layers);
  for (auto& b : m.blocks) {
    b.norm1 = make_norm(d);
    b.q = make_linear(d, d, rng);
    b.k = make_linear(d, d, rng);
    b.v = make_linear(d, d, rng);
    b.out = make_linear(d, d, rng);
    b.norm2 = make_norm(d);
    b.fc1 = make_linear(d, config.hidden_dim(), rng);
    b.fc2 = make_linear(config.hidden_dim(), d, rng);
    for (auto pos : kSitePositions) {
      const std::size_t w = site_width(config, pos);
      b.gate(pos) = param({w}, 1.0);
      b.kept(pos).resize(w);
      std::iota(b.kept(pos).begin(), b.kept(pos).end(), std::size_t{0});
    }
  }
  m.final_norm = make_norm(d);
  m.head = make_linear(d, config.num_classes, rng);
  return m;
}

Tensor patchify(const Tensor& images, const ModelConfig& config) {
  const auto& s = images.shape();
  const std::size_t c = config.in_channels, hw = config.image_size, ps = config.patch_size;
  if (s.size() != 4 || s[1] != c || s[2] != hw || s[3] != hw || s[0] == 0) {
    throw DimensionError("images " + shape_string(s) + " do not match model input [b x " +
                         std::to_string(c) + " x " + std::to_string(hw) + " x " +
                         std::to_string(hw) + "]");
  }
  const std::size_t batch = s[0], grid = config.grid(), pd = config.patch_dim();
  Tensor out(Shape{batch * grid * grid, pd});
  auto src = images.data();
  auto dst = out.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t gy = 0; gy < grid; ++gy)
      for (std::size_t gx = 0; gx < grid; ++gx) {
        double* row = dst.data() + ((b * grid + gy) * grid + gx) * pd;
        for (std::size_t iy = 0; iy < ps; ++iy)
          for (std::size_t ix = 0; ix < ps; ++ix)
            for (std::size_t ch = 0; ch < c; ++ch)
              row[(iy * ps + ix) * c + ch] =
                  src[((b * c + ch) * hw + gy * ps + iy) * hw + gx * ps + ix];
      }
  return out;
}

std::vector<std::size_t> VitModel::value_head_widths(std::size_t block_index) const {
  const std::size_t heads = config.num_heads, dh = config.head_dim();
  std::vector<std::size_t> widths(heads, 0);
  for (auto j : blocks.at(block_index).kept(SitePosition::attn_out)) widths.at(j / dh) += 1;
  return widths;
}

Tensor VitModel::block_forward(Graph& g, const Tensor& x, std::size_t block_index,
                               std::size_t batch, ForwardMode mode) const {
  const Block& b = blocks.at(block_index);
  const std::size_t d = config.embed_dim;
  if (x.rank() != 2 || x.cols() != d || x.rows() != batch * config.tokens()) {
    throw DimensionError("block input " + shape_string(x.shape()) + " is not [" +
                         std::to_string(batch * config.tokens()) + " x " + std::to_string(d) + "]");
  }
  if (mode == ForwardMode::hard && !pruned) {
    throw StateError("hard forward requested before a prune plan was applied");
  }
  if (mode == ForwardMode::soft && pruned) {
    throw StateError("soft forward requested on a pruned model (gates were folded away)");
  }
  const bool soft = mode == ForwardMode::soft;
  auto gate_or_gather = [&](const Tensor& t, SitePosition pos) {
    if (soft) return g.scale_columns(t, b.gate(pos));
    const auto& keep = b.kept(pos);
    if (is_full(keep, t.cols())) return t;
    return g.gather_columns(t, keep);
  };

  Tensor xn = g.layer_norm(x, b.norm1.gain, b.norm1.bias, kLayerNormEps);
  Tensor xin = gate_or_gather(xn, SitePosition::qkv_in);
  Tensor q = g.linear(xin, b.q.weight, b.q.bias);
  Tensor k = g.linear(xin, b.k.weight, b.k.bias);
  Tensor v = g.linear(xin, b.v.weight, b.v.bias);
  AttentionLayout layout{batch, config.tokens(), config.num_heads, value_head_widths(block_index)};
  Tensor att = g.attention(q, k, v, layout);
  if (soft) att = g.scale_columns(att, b.gate(SitePosition::attn_out));
  Tensor y = g.add(x, g.linear(att, b.out.weight, b.out.bias));

  Tensor yn = g.layer_norm(y, b.norm2.gain, b.norm2.bias, kLayerNormEps);
  Tensor yin = gate_or_gather(yn, SitePosition::mlp_in);
  Tensor hidden = g.gelu(g.linear(yin, b.fc1.weight, b.fc1.bias));
  if (soft) hidden = g.scale_columns(hidden, b.gate(SitePosition::mlp_hidden));
  return g.add(y, g.linear(hidden, b.fc2.weight, b.fc2.bias));
}

Tensor VitModel::forward(Graph& g, const Tensor& images, ForwardMode mode) const {
  if (mode == ForwardMode::hard && !pruned) {
    throw StateError("hard forward requested before a prune plan was applied");
  }
  if (mode == ForwardMode::soft && pruned) {
    throw StateError("soft forward requested on a pruned model (gates were folded away)");
  }
  const std::size_t batch = images.shape().at(0);
  Tensor patches = patchify(images, config);
  Tensor emb = g.linear(patches, patch_embed.weight, patch_embed.bias);
  Tensor x = g.embed_tokens(emb, cls_token, pos_embed, batch);
  for (std::size_t i = 0; i < blocks.size(); ++i) x = block_forward(g, x, i, batch, mode);
  std::vector<std::size_t> cls_rows(batch);
  for (std::size_t b = 0; b < batch; ++b) cls_rows[b] = b * config.tokens();
  Tensor cls = g.gather_rows(x, cls_rows);
  Tensor normed = g.layer_norm(cls, final_norm.gain, final_norm.bias, kLayerNormEps);
  return g.linear(normed, head.weight, head.bias);
}

std::vector<ParamRef> VitModel::parameters() const {
  std::vector<ParamRef> out;
  auto add_linear = [&](const std::string& name, const Linear& l) {
    out.push_back({name + ".weight", l.weight, true});
    out.push_back({name + ".bias", l.bias, false});
  };
  auto add_norm = [&](const std::string& name, const Norm& n) {
    out.push_back({name + ".gain", n.gain, false});
    out.push_back({name + ".bias", n.bias, false});
  };
  add_linear("patch_embed", patch_embed);
  out.push_back({"cls_token", cls_token, false});
  out.push_back({"pos_embed", pos_embed, false});
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const Block& b = blocks[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    add_norm(p + "norm1", b.norm1);
    add_linear(p + "q", b.q);
    add_linear(p + "k", b.k);
    add_linear(p + "v", b.v);
    add_linear(p + "out", b.out);
    add_norm(p + "norm2", b.norm2);
    add_linear(p + "fc1", b.fc1);
    add_linear(p + "fc2", b.fc2);
    if (!pruned) {
      for (auto pos : kSitePositions)
        out.push_back({p + "gate." + std::string(site_name(pos)), b.gate(pos), false});
    }
  }
  add_norm("final_norm", final_norm);
  add_linear("head", head);
  return out;
}

std::vector<Tensor> VitModel::gates() const {
  std::vector<Tensor> out;
  if (pruned) return out;
  for (const auto& b : blocks)
    for (auto pos : kSitePositions) out.push_back(b.gate(pos));
  return out;
}

VitModel VitModel::clone() const {
  VitModel m;
  m.config = config;
  m.patch_embed = clone_linear(patch_embed);
  m.cls_token = cls_token.clone();
  m.pos_embed = pos_embed.clone();
  m.blocks.reserve(blocks.size());
  for (const auto& b : blocks) {
    Block c;
    c.norm1 = clone_norm(b.norm1);
    c.q = clone_linear(b.q);
    c.k = clone_linear(b.k);
    c.v = clone_linear(b.v);
    c.out = clone_linear(b.out);
    c.norm2 = clone_norm(b.norm2);
    c.fc1 = clone_linear(b.fc1);
    c.fc2 = clone_linear(b.fc2);
    for (std::size_t s = 0; s < 4; ++s) c.gates[s] = b.gates[s].clone();
    c.keep = b.keep;
    m.blocks.push_back(std::move(c));
  }
  m.final_norm = clone_norm(final_norm);
  m.head = clone_linear(head);
  m.pruned = pruned;
  return m;
}

void VitModel::zero_grad() {
  for (auto& p : parameters()) p.tensor.clear_grad();
}

}  // namespace vtp
