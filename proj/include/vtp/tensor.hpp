#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace vtp {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array of doubles with an optional gradient slot.
///
/// A Tensor is a handle: copies share storage, the way autograd frameworks
/// share parameters between the model and the graph that reads them. Use
/// clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;
  /// Extent of dimension 0 of a rank-2 tensor.
  std::size_t rows() const;
  /// Extent of dimension 1 of a rank-2 tensor (or the length of a rank-1 tensor).
  std::size_t cols() const;

  std::span<double> data();
  std::span<const double> data() const;
  double item() const;
  double& at(std::size_t r, std::size_t c);
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);

  bool has_grad() const;
  /// Allocates a zero gradient if none is present. The grad slot belongs to
  /// the shared storage, so any handle may accumulate into it.
  std::span<double> ensure_grad() const;
  std::span<double> grad();
  std::span<const double> grad() const;
  void zero_grad();
  void clear_grad();

  /// Deep copy of shape and values; the copy has no gradient.
  Tensor clone() const;
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Storage {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> impl_;
};

/// Maximum |a - b| over all entries; throws DimensionError on shape mismatch.
double max_abs_diff(const Tensor& a, const Tensor& b);

/// Running total of forward multiply-accumulates performed by the kernels on
/// this thread. Only forward products are tallied, never backward ones.
std::uint64_t& mac_counter();

}  // namespace vtp
