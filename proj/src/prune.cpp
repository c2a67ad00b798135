#include "vtp/prune.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "vtp/error.hpp"

namespace vtp {

std::vector<ScoreEntry> collect_scores(const VitModel& model) {
  if (model.pruned) throw StateError("collect_scores: model is already pruned");
  std::vector<ScoreEntry> out;
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    for (auto pos : kSitePositions) {
      const auto values = model.blocks[b].gate(pos).data();
      for (std::size_t i = 0; i < values.size(); ++i)
        out.push_back({GateSite{b, pos}, i, std::abs(values[i])});
    }
  }
  return out;
}

Threshold compute_threshold(std::span<const double> magnitudes, double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("pruning rate " + std::to_string(rate) + " outside [0, 1)");
  }
  if (magnitudes.empty()) throw ConfigError("compute_threshold: no scores");
  const std::size_t n = magnitudes.size();
  std::size_t k = static_cast<std::size_t>(std::floor(rate * static_cast<double>(n)));
  k = std::min(k, n - 1);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  // Stable on the input order, which is already (block, position, index).
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return magnitudes[a] < magnitudes[b]; });
  Threshold t;
  t.rate = rate;
  t.prune_count = k;
  t.tau = magnitudes[order[k]];
  for (std::size_t i = 0; i < k; ++i)
    if (magnitudes[order[i]] == t.tau) ++t.ties_pruned;
  return t;
}

Threshold compute_threshold(std::span<const ScoreEntry> scores, double rate) {
  std::vector<double> mags(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) mags[i] = scores[i].magnitude;
  return compute_threshold(mags, rate);
}

std::vector<bool> select_pruned(std::span<const double> magnitudes, const Threshold& threshold) {
  std::vector<bool> pruned(magnitudes.size(), false);
  std::size_t ties = 0;
  for (std::size_t i = 0; i < magnitudes.size(); ++i) {
    if (magnitudes[i] < threshold.tau) {
      pruned[i] = true;
    } else if (magnitudes[i] == threshold.tau && ties < threshold.ties_pruned) {
      pruned[i] = true;
      ++ties;
    }
  }
  return pruned;
}

const PruneMask& PrunePlan::mask(const GateSite& site) const {
  for (const auto& m : masks)
    if (m.site == site) return m;
  throw StateError("prune plan has no mask for " + site.name());
}

PrunePlan binarize_scores(std::span<const ScoreEntry> scores, const Threshold& threshold) {
  std::vector<double> mags(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) mags[i] = scores[i].magnitude;
  const auto pruned = select_pruned(mags, threshold);

  PrunePlan plan;
  plan.tau = threshold.tau;
  plan.requested_rate = threshold.rate;
  plan.total_scores = scores.size();
  std::size_t i = 0;
  while (i < scores.size()) {
    PruneMask mask;
    mask.site = scores[i].site;
    const std::size_t begin = i;
    while (i < scores.size() && scores[i].site == mask.site) ++i;
    const std::size_t width = i - begin;
    mask.keep.assign(width, 0);
    for (std::size_t j = 0; j < width; ++j) {
      if (scores[begin + j].index != j) {
        throw StateError("binarize: scores for " + mask.site.name() + " are not in index order");
      }
      mask.keep[j] = pruned[begin + j] ? 0 : 1;
    }
    if (std::find(mask.keep.begin(), mask.keep.end(), 1) == mask.keep.end()) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < width; ++j)
        if (mags[begin + j] > mags[begin + best]) best = j;
      mask.keep[best] = 1;
      mask.protected_floor = true;
      ++plan.protected_sites;
    }
    for (std::size_t j = 0; j < width; ++j)
      if (mask.keep[j]) mask.keep_indices.push_back(j);
    plan.pruned_scores += width - mask.keep_indices.size();
    plan.masks.push_back(std::move(mask));
  }
  plan.achieved_rate = plan.total_scores == 0 ? 0.0
                                              : static_cast<double>(plan.pruned_scores) /
                                                    static_cast<double>(plan.total_scores);
  return plan;
}

PrunePlan binarize(const VitModel& model, const Threshold& threshold) {
  return binarize_scores(collect_scores(model), threshold);
}

PrunePlan make_plan(const VitModel& model, double rate) {
  const auto scores = collect_scores(model);
  return binarize_scores(scores, compute_threshold(scores, rate));
}

namespace {

/// Rows `rows` of w[in x out], each multiplied by the matching entry of `fold`
/// (when given), restricted to columns `cols` (all when empty-flagged).
Tensor slice_weight(const Tensor& w, const std::vector<std::size_t>& rows,
                    const std::vector<std::size_t>& cols, const Tensor* fold) {
  const std::size_t in_cols = w.cols();
  Tensor out(Shape{rows.size(), cols.size()}, 0.0, true);
  auto src = w.data();
  auto dst = out.data();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const double s = fold ? fold->data()[rows[r]] : 1.0;
    for (std::size_t c = 0; c < cols.size(); ++c)
      dst[r * cols.size() + c] = src[rows[r] * in_cols + cols[c]] * s;
  }
  return out;
}

Tensor slice_vector(const Tensor& v, const std::vector<std::size_t>& idx) {
  Tensor out(Shape{idx.size()}, 0.0, true);
  for (std::size_t i = 0; i < idx.size(); ++i) out.data()[i] = v.data()[idx[i]];
  return out;
}

std::vector<std::size_t> iota_vec(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

}  // namespace

VitModel apply_plan(const VitModel& model, const PrunePlan& plan) {
  if (model.pruned) throw StateError("apply_plan: model is already pruned");
  const std::size_t expected = model.blocks.size() * kSitePositions.size();
  if (plan.masks.size() != expected) {
    throw StateError("apply_plan: plan has " + std::to_string(plan.masks.size()) +
                     " masks, model has " + std::to_string(expected) + " gate sites");
  }
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    for (auto pos : kSitePositions) {
      const GateSite site{b, pos};
      const auto& m = plan.mask(site);
      if (m.keep.size() != model.gate(site).size()) {
        throw StateError("apply_plan: mask for " + site.name() + " has width " +
                         std::to_string(m.keep.size()) + ", gate has " +
                         std::to_string(model.gate(site).size()));
      }
      if (m.keep_indices.empty()) throw StateError("apply_plan: " + site.name() + " keeps nothing");
    }
  }

  VitModel out = model.clone();
  const std::size_t d = model.config.embed_dim;
  const auto all_d = iota_vec(d);
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    const Block& src = model.blocks[b];
    Block& dst = out.blocks[b];
    const auto& qkv_in = plan.mask({b, SitePosition::qkv_in}).keep_indices;
    const auto& attn_out = plan.mask({b, SitePosition::attn_out}).keep_indices;
    const auto& mlp_in = plan.mask({b, SitePosition::mlp_in}).keep_indices;
    const auto& hidden = plan.mask({b, SitePosition::mlp_hidden}).keep_indices;
    const Tensor& g_qkv = src.gate(SitePosition::qkv_in);
    const Tensor& g_att = src.gate(SitePosition::attn_out);
    const Tensor& g_mlp = src.gate(SitePosition::mlp_in);
    const Tensor& g_hid = src.gate(SitePosition::mlp_hidden);

    // qkv_in: input rows of q/k/v, gate folded into those rows.
    dst.q.weight = slice_weight(src.q.weight, qkv_in, all_d, &g_qkv);
    dst.k.weight = slice_weight(src.k.weight, qkv_in, all_d, &g_qkv);
    // attn_out: v output columns and out-projection input rows.
    dst.v.weight = slice_weight(src.v.weight, qkv_in, attn_out, &g_qkv);
    dst.v.bias = slice_vector(src.v.bias, attn_out);
    dst.out.weight = slice_weight(src.out.weight, attn_out, all_d, &g_att);
    // mlp_in: fc1 input rows; mlp_hidden: fc1 output columns and fc2 input rows.
    dst.fc1.weight = slice_weight(src.fc1.weight, mlp_in, hidden, &g_mlp);
    dst.fc1.bias = slice_vector(src.fc1.bias, hidden);
    dst.fc2.weight = slice_weight(src.fc2.weight, hidden, all_d, &g_hid);

    dst.kept(SitePosition::qkv_in) = qkv_in;
    dst.kept(SitePosition::attn_out) = attn_out;
    dst.kept(SitePosition::mlp_in) = mlp_in;
    dst.kept(SitePosition::mlp_hidden) = hidden;
    for (auto& g : dst.gates) g = Tensor();
  }
  out.pruned = true;
  return out;
}

}  // namespace vtp
