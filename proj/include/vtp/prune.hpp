#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "vtp/model.hpp"

namespace vtp {

struct ScoreEntry {
  GateSite site;
  std::size_t index = 0;
  double magnitude = 0.0;
};

/// Every gate entry as (site, index, |score|), ordered by (block, position, index).
std::vector<ScoreEntry> collect_scores(const VitModel& model);

/// Cut-off derived from a pruning rate.
///
/// Sorting ascending by (magnitude, block, position, index), the first
/// prune_count = floor(rate * N) entries are pruned. tau is the magnitude at
/// position prune_count. Entries below tau are pruned; of the entries equal
/// to tau, the first ties_pruned in (block, position, index) order are pruned
/// and the rest kept.
struct Threshold {
  double tau = 0.0;
  std::size_t prune_count = 0;
  std::size_t ties_pruned = 0;
  double rate = 0.0;
};

/// Magnitudes must already be in tie-break order (the order collect_scores emits).
Threshold compute_threshold(std::span<const double> magnitudes, double rate);
Threshold compute_threshold(std::span<const ScoreEntry> scores, double rate);

/// Applies a threshold to magnitudes in tie-break order; true = pruned.
std::vector<bool> select_pruned(std::span<const double> magnitudes, const Threshold& threshold);

struct PruneMask {
  GateSite site;
  std::vector<std::uint8_t> keep;
  std::vector<std::size_t> keep_indices;
  /// Set when every entry fell below the threshold and the largest was retained.
  bool protected_floor = false;
};

struct PrunePlan {
  std::vector<PruneMask> masks;
  double tau = 0.0;
  double requested_rate = 0.0;
  double achieved_rate = 0.0;
  std::size_t total_scores = 0;
  std::size_t pruned_scores = 0;
  std::size_t protected_sites = 0;

  const PruneMask& mask(const GateSite& site) const;
};

/// Builds per-site masks from scores in collect_scores layout (one
/// consecutive run per site, in index order). A site that would lose every
/// entry keeps its largest-magnitude one (lowest index on ties).
PrunePlan binarize_scores(std::span<const ScoreEntry> scores, const Threshold& threshold);
PrunePlan binarize(const VitModel& model, const Threshold& threshold);

/// Convenience: collect, threshold, binarize.
PrunePlan make_plan(const VitModel& model, double rate);

/// Slices every projection according to the plan and folds kept gate values
/// into the following projection's rows. Returns a gate-free hard model.
VitModel apply_plan(const VitModel& model, const PrunePlan& plan);

}  // namespace vtp
