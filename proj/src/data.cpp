#include "vtp/data.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "vtp/error.hpp"
#include "vtp/random.hpp"

namespace vtp {

void SyntheticDatasetSpec::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("data config: " + what); };
  if (num_classes < 2) fail("num_classes must be at least 2");
  if (train_per_class == 0) fail("train_per_class must be positive");
  if (eval_per_class == 0) fail("eval_per_class must be positive");
  if (image_size < 2) fail("image_size must be at least 2");
  if (channels == 0) fail("channels must be positive");
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) fail("noise_std must be >= 0");
}

Tensor Dataset::images(std::span<const std::size_t> indices) const {
  const std::size_t per = image_values();
  Tensor out(Shape{indices.size(), channels, image_size, image_size});
  auto dst = out.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= size()) throw InputError("dataset index out of range");
    std::copy_n(pixels.begin() + indices[i] * per, per, dst.begin() + i * per);
  }
  return out;
}

std::vector<int> Dataset::labels_of(std::span<const std::size_t> indices) const {
  std::vector<int> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) out[i] = labels.at(indices[i]);
  return out;
}

namespace {

constexpr std::uint64_t kTrainStream = 0x7472;
constexpr std::uint64_t kEvalStream = 0x6576;

void render(const SyntheticDatasetSpec& spec, int label, std::uint64_t sample_seed,
            double* out) {
  Rng rng(sample_seed);
  const double k = static_cast<double>(label);
  const double classes = static_cast<double>(spec.num_classes);
  const double theta = std::numbers::pi * k / classes;
  const double freq = 0.15 + 0.05 * static_cast<double>(label % 3);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double amplitude = rng.uniform(0.8, 1.2);
  const double cx = std::cos(theta), sy = std::sin(theta);
  const std::size_t hw = spec.image_size;
  for (std::size_t c = 0; c < spec.channels; ++c) {
    const double tint = 0.15 * std::cos(2.0 * std::numbers::pi * (k / classes) +
                                        2.0 * std::numbers::pi * static_cast<double>(c) /
                                            static_cast<double>(spec.channels));
    for (std::size_t y = 0; y < hw; ++y) {
      for (std::size_t x = 0; x < hw; ++x) {
        const double t = static_cast<double>(x) * cx + static_cast<double>(y) * sy;
        const double v = amplitude * std::cos(2.0 * std::numbers::pi * freq * t + phase) + tint;
        out[(c * hw + y) * hw + x] = v + spec.noise_std * rng.normal();
      }
    }
  }
}

Dataset generate(const SyntheticDatasetSpec& spec, std::size_t per_class, std::uint64_t stream) {
  Dataset d;
  d.channels = spec.channels;
  d.image_size = spec.image_size;
  const std::size_t n = per_class * spec.num_classes;
  d.pixels.resize(n * d.image_values());
  d.labels.resize(n);
  // Interleaved labels: sample i has class i % num_classes.
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % spec.num_classes);
    d.labels[i] = label;
    render(spec, label, mix_seed(spec.seed, stream, i), d.pixels.data() + i * d.image_values());
  }
  return d;
}

}  // namespace

DatasetSplits make_dataset(const SyntheticDatasetSpec& spec) {
  spec.validate();
  DatasetSplits s{generate(spec, spec.train_per_class, kTrainStream),
                  generate(spec, spec.eval_per_class, kEvalStream)};
  const std::size_t plane = spec.image_size * spec.image_size;
  for (std::size_t c = 0; c < spec.channels; ++c) {
    double mean = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < s.train.size(); ++i) {
      const double* p = s.train.pixels.data() + i * s.train.image_values() + c * plane;
      for (std::size_t j = 0; j < plane; ++j) mean += p[j];
      count += plane;
    }
    mean /= static_cast<double>(count);
    double var = 0.0;
    for (std::size_t i = 0; i < s.train.size(); ++i) {
      const double* p = s.train.pixels.data() + i * s.train.image_values() + c * plane;
      for (std::size_t j = 0; j < plane; ++j) var += (p[j] - mean) * (p[j] - mean);
    }
    const double stdev = std::sqrt(var / static_cast<double>(count));
    const double inv = stdev > 0.0 ? 1.0 / stdev : 1.0;
    for (Dataset* d : {&s.train, &s.eval}) {
      for (std::size_t i = 0; i < d->size(); ++i) {
        double* p = d->pixels.data() + i * d->image_values() + c * plane;
        for (std::size_t j = 0; j < plane; ++j) p[j] = (p[j] - mean) * inv;
      }
    }
  }
  return s;
}

}  // namespace vtp
