#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "vtp/tensor.hpp"

namespace vtp {

/// Head partition for batched multi-head attention over packed token rows.
///
/// q and k are [(batch*tokens) x heads*key_width]; v is
/// [(batch*tokens) x sum(value_widths)] with head h owning a contiguous run of
/// value_widths[h] columns. Value widths may differ per head (and may be
/// zero) once value columns have been pruned.
struct AttentionLayout {
  std::size_t batch = 1;
  std::size_t tokens = 0;
  std::size_t heads = 1;
  std::vector<std::size_t> value_widths;

  static AttentionLayout uniform(std::size_t batch, std::size_t tokens, std::size_t heads,
                                 std::size_t value_cols);
};

enum class GradMode { record, no_grad };

/// Tape of executed ops for one forward pass.
///
/// Every op returns a fresh tensor. When recording and at least one input
/// requires a gradient, the op appends a node holding the saved activations
/// its backward rule needs. backward() walks the tape once in reverse and
/// accumulates into the grad slot of every tensor that requires one.
class Graph {
 public:
  explicit Graph(GradMode mode = GradMode::record) : mode_(mode) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Tensor matmul(const Tensor& a, const Tensor& b);
  /// x[m x k] * w[k x p] + bias[p] (bias may be undefined).
  Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor scale(const Tensor& a, double s);
  Tensor sum(const Tensor& a);
  Tensor softmax_rows(const Tensor& a);
  Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);
  Tensor gelu(const Tensor& x);
  /// out[i][j] = x[i][j] * a[j].
  Tensor scale_columns(const Tensor& x, const Tensor& a);
  Tensor gather_columns(const Tensor& x, std::span<const std::size_t> columns);
  Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
  /// Builds [(batch*(P+1)) x d] token rows: class token then P patch rows, plus positions.
  Tensor embed_tokens(const Tensor& patches, const Tensor& cls, const Tensor& pos,
                      std::size_t batch);
  Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                   const AttentionLayout& layout);
  /// Single-sequence attention with equal head widths.
  Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t num_heads);
  Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
  /// lambda * sum_i |gate_i| over every entry; subgradient sign(0) = 0.
  Tensor l1_penalty(std::span<const Tensor> gates, double lambda);

  void backward(const Tensor& loss);

  std::size_t node_count() const { return nodes_.size(); }
  bool recording() const { return mode_ == GradMode::record; }

 private:
  struct Node {
    std::string_view op;
    Tensor output;
    std::function<void()> backward;
  };

  bool wants_grad(std::initializer_list<const Tensor*> inputs) const;
  void record(std::string_view op, const Tensor& output, std::function<void()> fn);

  GradMode mode_;
  bool consumed_ = false;
  std::vector<Node> nodes_;
};

namespace kernels {

/// c[m x p] (+)= a[m x k] * b[k x p]
void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t p, bool accumulate);
/// c[k x p] += a[m x k]^T * b[m x p]
void gemm_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                 std::size_t m, std::size_t k, std::size_t p);
/// c[m x k] += a[m x p] * b[k x p]^T
void gemm_nt_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                 std::size_t m, std::size_t p, std::size_t k);
void softmax_row(std::span<const double> in, std::span<double> out);
double gelu(double x);
double gelu_derivative(double x);

}  // namespace kernels

}  // namespace vtp
