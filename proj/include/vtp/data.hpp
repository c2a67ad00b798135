#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "vtp/tensor.hpp"

namespace vtp {

/// Oriented sinusoidal gratings: each class has its own orientation and
/// spatial frequency plus a small per-channel color offset; phase and
/// amplitude are random per sample and Gaussian pixel noise is added.
struct SyntheticDatasetSpec {
  std::size_t num_classes = 10;
  std::size_t train_per_class = 200;
  std::size_t eval_per_class = 50;
  std::size_t image_size = 16;
  std::size_t channels = 3;
  double noise_std = 0.5;
  std::uint64_t seed = 7;

  void validate() const;
  bool operator==(const SyntheticDatasetSpec&) const = default;
};

struct Dataset {
  std::size_t channels = 0;
  std::size_t image_size = 0;
  /// size() images, each [channels x image_size x image_size], row-major.
  std::vector<double> pixels;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_values() const { return channels * image_size * image_size; }
  /// Stacks the selected images into [n x C x H x W].
  Tensor images(std::span<const std::size_t> indices) const;
  std::vector<int> labels_of(std::span<const std::size_t> indices) const;
};

struct DatasetSplits {
  Dataset train;
  Dataset eval;
};

/// Deterministic per seed. Eval samples use a separate seed stream from
/// train samples. Both splits are normalized per channel with the train
/// split's mean and standard deviation.
DatasetSplits make_dataset(const SyntheticDatasetSpec& spec);

}  // namespace vtp
