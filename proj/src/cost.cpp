#include "vtp/cost.hpp"

#include <cstdio>
#include <iomanip>
#include <sstream>

#include "vtp/error.hpp"

namespace vtp {

ArchitectureWidths full_widths(const ModelConfig& config) {
  const std::size_t d = config.embed_dim;
  return ArchitectureWidths(config.num_layers, BlockWidths{d, d, d, config.hidden_dim()});
}

ArchitectureWidths widths_of(const VitModel& model) {
  ArchitectureWidths out;
  for (const auto& b : model.blocks) {
    out.push_back({b.kept(SitePosition::qkv_in).size(), b.kept(SitePosition::attn_out).size(),
                   b.kept(SitePosition::mlp_in).size(), b.kept(SitePosition::mlp_hidden).size()});
  }
  return out;
}

ArchitectureWidths widths_of(const PrunePlan& plan, const ModelConfig& config) {
  ArchitectureWidths out(config.num_layers);
  for (std::size_t b = 0; b < config.num_layers; ++b) {
    out[b].qkv_in = plan.mask({b, SitePosition::qkv_in}).keep_indices.size();
    out[b].attn_out = plan.mask({b, SitePosition::attn_out}).keep_indices.size();
    out[b].mlp_in = plan.mask({b, SitePosition::mlp_in}).keep_indices.size();
    out[b].mlp_hidden = plan.mask({b, SitePosition::mlp_hidden}).keep_indices.size();
  }
  return out;
}

std::vector<BlockCost> block_costs(const ModelConfig& config, const ArchitectureWidths& widths) {
  config.validate();
  if (widths.size() != config.num_layers) {
    throw DimensionError("widths describe " + std::to_string(widths.size()) + " blocks, model has " +
                         std::to_string(config.num_layers));
  }
  const std::uint64_t d = config.embed_dim;
  const std::uint64_t n = config.tokens();
  std::vector<BlockCost> out;
  for (const auto& w : widths) {
    const std::uint64_t qi = w.qkv_in, ao = w.attn_out, mi = w.mlp_in, hk = w.mlp_hidden;
    BlockCost c;
    c.params = 2 * d                  // norm1
               + 2 * (qi * d + d)     // q, k
               + (qi * ao + ao)       // v
               + (ao * d + d)         // out
               + 2 * d                // norm2
               + (mi * hk + hk)       // fc1
               + (hk * d + d);        // fc2
    c.qkv_flops = n * qi * (2 * d + ao);
    c.attention_flops = n * n * (d + ao);
    c.proj_flops = n * ao * d;
    c.mlp_flops = n * mi * hk + n * hk * d;
    out.push_back(c);
  }
  return out;
}

namespace {

std::uint64_t stem_params(const ModelConfig& c) {
  const std::uint64_t d = c.embed_dim;
  return c.patch_dim() * d + d       // patch embedding
         + d                         // class token
         + c.tokens() * d            // positions
         + 2 * d                     // final norm
         + d * c.num_classes + c.num_classes;  // head
}

std::uint64_t stem_flops(const ModelConfig& c) {
  return static_cast<std::uint64_t>(c.num_patches()) * c.patch_dim() * c.embed_dim +
         static_cast<std::uint64_t>(c.embed_dim) * c.num_classes;
}

double reduced_pct(std::uint64_t before, std::uint64_t after) {
  if (before == 0) return 0.0;
  return 100.0 * (1.0 - static_cast<double>(after) / static_cast<double>(before));
}

}  // namespace

std::uint64_t count_params(const ModelConfig& config, const ArchitectureWidths* widths) {
  const auto w = widths ? *widths : full_widths(config);
  std::uint64_t total = stem_params(config);
  for (const auto& b : block_costs(config, w)) total += b.params;
  return total;
}

std::uint64_t gate_param_count(const ModelConfig& config) {
  return config.num_layers * (3 * config.embed_dim + config.hidden_dim());
}

std::uint64_t count_params(const VitModel& model) {
  const auto w = widths_of(model);
  return count_params(model.config, &w) + (model.pruned ? 0 : gate_param_count(model.config));
}

std::uint64_t count_flops(const ModelConfig& config, const ArchitectureWidths* widths) {
  const auto w = widths ? *widths : full_widths(config);
  std::uint64_t total = stem_flops(config);
  for (const auto& b : block_costs(config, w)) total += b.flops();
  return total;
}

std::uint64_t count_flops(const ModelConfig& config, const ArchitectureWidths* widths,
                          std::size_t image_size) {
  ModelConfig c = config;
  c.image_size = image_size;
  return count_flops(c, widths);
}

CostReport make_report(const ModelConfig& config, const ArchitectureWidths& after,
                       std::string model_name) {
  const auto before = full_widths(config);
  CostReport r;
  r.model_name = std::move(model_name);
  r.image_size = config.image_size;
  r.params_before = count_params(config, &before);
  r.params_after = count_params(config, &after);
  r.flops_before = count_flops(config, &before);
  r.flops_after = count_flops(config, &after);
  r.params_reduced_pct = reduced_pct(r.params_before, r.params_after);
  r.flops_reduced_pct = reduced_pct(r.flops_before, r.flops_after);
  r.gate_params = gate_param_count(config);
  const auto cb = block_costs(config, before);
  const auto ca = block_costs(config, after);
  for (std::size_t i = 0; i < cb.size(); ++i) r.per_block.push_back({cb[i], ca[i]});
  return r;
}

namespace {

std::string pct(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string millions(std::uint64_t v, double unit) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f", static_cast<double>(v) / unit);
  return buf;
}

}  // namespace

std::string format_table(const CostReport& r) {
  std::ostringstream os;
  os << "model: " << (r.model_name.empty() ? "-" : r.model_name) << "  image_size: " << r.image_size
     << "\n\n";
  os << std::left << std::setw(10) << "" << std::right << std::setw(16) << "before"
     << std::setw(16) << "after" << std::setw(12) << "reduced" << '\n';
  os << std::left << std::setw(10) << "params" << std::right << std::setw(16) << r.params_before
     << std::setw(16) << r.params_after << std::setw(11) << pct(r.params_reduced_pct) << "%\n";
  os << std::left << std::setw(10) << "flops" << std::right << std::setw(16) << r.flops_before
     << std::setw(16) << r.flops_after << std::setw(11) << pct(r.flops_reduced_pct) << "%\n";
  os << std::left << std::setw(10) << "params(M)" << std::right << std::setw(16)
     << millions(r.params_before, 1e6) << std::setw(16) << millions(r.params_after, 1e6) << '\n';
  os << std::left << std::setw(10) << "flops(B)" << std::right << std::setw(16)
     << millions(r.flops_before, 1e9) << std::setw(16) << millions(r.flops_after, 1e9) << '\n';
  os << "note: " << r.gate_params
     << " importance-score entries exist only in the gated model and are not counted above\n\n";
  os << std::setw(6) << "block" << std::setw(14) << "params" << std::setw(14) << "params'"
     << std::setw(14) << "qkv" << std::setw(14) << "attention" << std::setw(14) << "proj"
     << std::setw(14) << "mlp" << std::setw(14) << "flops'" << '\n';
  for (std::size_t i = 0; i < r.per_block.size(); ++i) {
    const auto& b = r.per_block[i];
    os << std::setw(6) << i << std::setw(14) << b.before.params << std::setw(14) << b.after.params
       << std::setw(14) << b.after.qkv_flops << std::setw(14) << b.after.attention_flops
       << std::setw(14) << b.after.proj_flops << std::setw(14) << b.after.mlp_flops
       << std::setw(14) << b.after.flops() << '\n';
  }
  return os.str();
}

std::string format_kv(const CostReport& r) {
  std::ostringstream os;
  os << "params_before=" << r.params_before << '\n'
     << "params_after=" << r.params_after << '\n'
     << "params_reduced_pct=" << pct(r.params_reduced_pct) << '\n'
     << "flops_before=" << r.flops_before << '\n'
     << "flops_after=" << r.flops_after << '\n'
     << "flops_reduced_pct=" << pct(r.flops_reduced_pct) << '\n';
  for (std::size_t i = 0; i < r.per_block.size(); ++i) {
    const auto& b = r.per_block[i];
    const std::string p = "per_block[" + std::to_string(i) + "].";
    os << p << "params_before=" << b.before.params << '\n'
       << p << "params_after=" << b.after.params << '\n'
       << p << "flops_before=" << b.before.flops() << '\n'
       << p << "flops_after=" << b.after.flops() << '\n'
       << p << "qkv_flops=" << b.after.qkv_flops << '\n'
       << p << "attention_flops=" << b.after.attention_flops << '\n'
       << p << "proj_flops=" << b.after.proj_flops << '\n'
       << p << "mlp_flops=" << b.after.mlp_flops << '\n';
  }
  return os.str();
}

std::map<std::string, std::string> parse_kv(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    out[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return out;
}

}  // namespace vtp
