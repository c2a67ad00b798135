#include "vtp/graph.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "vtp/error.hpp"

namespace vtp {

namespace kernels {

namespace {

constexpr std::size_t kMr = 4;
constexpr std::size_t kNr = 8;

// Register tile of kMr x kNr outputs. Every output still accumulates its
// k terms in ascending order, so tiling does not change the rounding.
void tile_nn(const double* a, const double* b, double* c, std::size_t k, std::size_t p,
             std::size_t lda) {
  double acc[kMr][kNr];
  for (std::size_t r = 0; r < kMr; ++r)
    for (std::size_t j = 0; j < kNr; ++j) acc[r][j] = c[r * p + j];
  for (std::size_t kk = 0; kk < k; ++kk) {
    const double* bk = b + kk * p;
    for (std::size_t r = 0; r < kMr; ++r) {
      const double s = a[r * lda + kk];
      for (std::size_t j = 0; j < kNr; ++j) acc[r][j] += s * bk[j];
    }
  }
  for (std::size_t r = 0; r < kMr; ++r)
    for (std::size_t j = 0; j < kNr; ++j) c[r * p + j] = acc[r][j];
}

void tile_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t p) {
  double acc[kMr][kNr];
  for (std::size_t r = 0; r < kMr; ++r)
    for (std::size_t j = 0; j < kNr; ++j) acc[r][j] = c[r * p + j];
  for (std::size_t i = 0; i < m; ++i) {
    const double* bi = b + i * p;
    for (std::size_t r = 0; r < kMr; ++r) {
      const double s = a[i * k + r];
      for (std::size_t j = 0; j < kNr; ++j) acc[r][j] += s * bi[j];
    }
  }
  for (std::size_t r = 0; r < kMr; ++r)
    for (std::size_t j = 0; j < kNr; ++j) c[r * p + j] = acc[r][j];
}

}  // namespace

void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             std::size_t m, std::size_t k, std::size_t p, bool accumulate) {
  if (!accumulate) std::fill(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(m * p), 0.0);
  const std::size_t m_main = m - m % kMr;
  const std::size_t p_main = p - p % kNr;
  for (std::size_t i = 0; i < m_main; i += kMr)
    for (std::size_t j = 0; j < p_main; j += kNr)
      tile_nn(a.data() + i * k, b.data() + j, c.data() + i * p + j, k, p, k);
  // Ragged edges: rows past m_main (all columns) and columns past p_main.
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j0 = i < m_main ? p_main : 0;
    if (j0 == p) continue;
    double* ci = c.data() + i * p;
    const double* ai = a.data() + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double s = ai[kk];
      const double* bk = b.data() + kk * p;
      for (std::size_t j = j0; j < p; ++j) ci[j] += s * bk[j];
    }
  }
}

void gemm_tn_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                 std::size_t m, std::size_t k, std::size_t p) {
  const std::size_t k_main = k - k % kMr;
  const std::size_t p_main = p - p % kNr;
  for (std::size_t kk = 0; kk < k_main; kk += kMr)
    for (std::size_t j = 0; j < p_main; j += kNr)
      tile_tn(a.data() + kk, b.data() + j, c.data() + kk * p + j, m, k, p);
  for (std::size_t kk = 0; kk < k; ++kk) {
    const std::size_t j0 = kk < k_main ? p_main : 0;
    if (j0 == p) continue;
    double* ck = c.data() + kk * p;
    for (std::size_t i = 0; i < m; ++i) {
      const double s = a[i * k + kk];
      const double* bi = b.data() + i * p;
      for (std::size_t j = j0; j < p; ++j) ck[j] += s * bi[j];
    }
  }
}

void gemm_nt_acc(std::span<const double> a, std::span<const double> b, std::span<double> c,
                 std::size_t m, std::size_t p, std::size_t k) {
  // Transposing b first keeps the inner loop a contiguous axpy.
  std::vector<double> bt(p * k);
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t j = 0; j < p; ++j) bt[j * k + r] = b[r * p + j];
  gemm_nn(a, bt, c, m, p, k, true);
}

void softmax_row(std::span<const double> in, std::span<double> out) {
  const double mx = *std::max_element(in.begin(), in.end());
  double total = 0.0;
  for (std::size_t j = 0; j < in.size(); ++j) {
    out[j] = std::exp(in[j] - mx);
    total += out[j];
  }
  const double inv = 1.0 / total;
  for (auto& v : out) v *= inv;
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

double gelu_derivative(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

}  // namespace kernels

AttentionLayout AttentionLayout::uniform(std::size_t batch, std::size_t tokens,
                                         std::size_t heads, std::size_t value_cols) {
  if (heads == 0 || value_cols % heads != 0) {
    throw DimensionError("value width " + std::to_string(value_cols) +
                         " does not split into " + std::to_string(heads) + " heads");
  }
  return {batch, tokens, heads, std::vector<std::size_t>(heads, value_cols / heads)};
}

namespace {

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         " tensor, got " + shape_string(t.shape()));
  }
}

void add_into(std::span<double> dst, std::span<const double> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace

bool Graph::wants_grad(std::initializer_list<const Tensor*> inputs) const {
  if (mode_ != GradMode::record) return false;
  for (const Tensor* t : inputs)
    if (t && t->defined() && t->requires_grad()) return true;
  return false;
}

void Graph::record(std::string_view op, const Tensor& output, std::function<void()> fn) {
  if (consumed_) throw UsageError("graph already consumed by backward()");
  nodes_.push_back(Node{op, output, std::move(fn)});
}

Tensor Graph::matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), p = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner extents disagree for " + shape_string(a.shape()) +
                         " x " + shape_string(b.shape()));
  }
  Tensor out(Shape{m, p});
  kernels::gemm_nn(a.data(), b.data(), out.data(), m, k, p, false);
  mac_counter() += m * k * p;
  if (wants_grad({&a, &b})) {
    out.set_requires_grad(true);
    record("matmul", out, [a, b, out, m, k, p]() mutable {
      auto dc = out.grad();
      if (a.requires_grad()) kernels::gemm_nt_acc(dc, b.data(), a.ensure_grad(), m, p, k);
      if (b.requires_grad()) kernels::gemm_tn_acc(a.data(), dc, b.ensure_grad(), m, k, p);
    });
  }
  return out;
}

Tensor Graph::linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear");
  const std::size_t m = x.rows(), k = x.cols(), p = w.cols();
  if (w.rows() != k) {
    throw DimensionError("linear: input " + shape_string(x.shape()) + " does not match weight " +
                         shape_string(w.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.size() != p) {
    throw DimensionError("linear: bias " + shape_string(bias.shape()) + " for weight " +
                         shape_string(w.shape()));
  }
  Tensor out(Shape{m, p});
  auto o = out.data();
  if (has_bias) {
    auto bv = bias.data();
    for (std::size_t i = 0; i < m; ++i) std::copy(bv.begin(), bv.end(), o.begin() + i * p);
  }
  kernels::gemm_nn(x.data(), w.data(), o, m, k, p, has_bias);
  mac_counter() += m * k * p;
  if (wants_grad({&x, &w, &bias})) {
    out.set_requires_grad(true);
    record("linear", out, [x, w, bias, out, m, k, p, has_bias]() mutable {
      auto dy = out.grad();
      if (x.requires_grad()) kernels::gemm_nt_acc(dy, w.data(), x.ensure_grad(), m, p, k);
      if (w.requires_grad()) kernels::gemm_tn_acc(x.data(), dy, w.ensure_grad(), m, k, p);
      if (has_bias && bias.requires_grad()) {
        auto db = bias.ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < p; ++j) db[j] += dy[i * p + j];
      }
    });
  }
  return out;
}

Tensor Graph::add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Tensor out(a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  if (wants_grad({&a, &b})) {
    out.set_requires_grad(true);
    record("add", out, [a, b, out]() mutable {
      auto dy = out.grad();
      if (a.requires_grad()) add_into(a.ensure_grad(), dy);
      if (b.requires_grad()) add_into(b.ensure_grad(), dy);
    });
  }
  return out;
}

Tensor Graph::mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Tensor out(a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  if (wants_grad({&a, &b})) {
    out.set_requires_grad(true);
    record("mul", out, [a, b, out]() mutable {
      auto dy = out.grad();
      auto x = a.data();
      auto y = b.data();
      if (a.requires_grad()) {
        auto da = a.ensure_grad();
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * y[i];
      }
      if (b.requires_grad()) {
        auto db = b.ensure_grad();
        for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * x[i];
      }
    });
  }
  return out;
}

Tensor Graph::scale(const Tensor& a, double s) {
  Tensor out(a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * s;
  if (wants_grad({&a})) {
    out.set_requires_grad(true);
    record("scale", out, [a, out, s]() mutable {
      auto dy = out.grad();
      auto da = a.ensure_grad();
      for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * s;
    });
  }
  return out;
}

Tensor Graph::sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  Tensor out = Tensor::scalar(total);
  if (wants_grad({&a})) {
    out.set_requires_grad(true);
    record("sum", out, [a, out]() mutable {
      const double g = out.grad()[0];
      for (auto& d : a.ensure_grad()) d += g;
    });
  }
  return out;
}

Tensor Graph::softmax_rows(const Tensor& a) {
  require_rank(a, 2, "softmax_rows");
  const std::size_t m = a.rows(), k = a.cols();
  Tensor out(a.shape());
  for (std::size_t i = 0; i < m; ++i)
    kernels::softmax_row(a.data().subspan(i * k, k), out.data().subspan(i * k, k));
  if (wants_grad({&a})) {
    out.set_requires_grad(true);
    record("softmax_rows", out, [a, out, m, k]() mutable {
      auto dy = out.grad();
      auto y = out.data();
      auto da = a.ensure_grad();
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < k; ++j) dot += dy[i * k + j] * y[i * k + j];
        for (std::size_t j = 0; j < k; ++j) da[i * k + j] += y[i * k + j] * (dy[i * k + j] - dot);
      }
    });
  }
  return out;
}

Tensor Graph::layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_rank(x, 2, "layer_norm");
  const std::size_t m = x.rows(), d = x.cols();
  if (gain.size() != d || bias.size() != d) {
    throw DimensionError("layer_norm: width " + std::to_string(d) + " with gain " +
                         shape_string(gain.shape()) + " and bias " + shape_string(bias.shape()));
  }
  Tensor out(x.shape());
  std::vector<double> xhat(m * d);
  std::vector<double> rstd(m);
  auto xv = x.data();
  auto g = gain.data();
  auto b = bias.data();
  auto o = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.data() + i * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (row[j] - mean) * rstd[i];
      o[i * d + j] = xhat[i * d + j] * g[j] + b[j];
    }
  }
  if (wants_grad({&x, &gain, &bias})) {
    out.set_requires_grad(true);
    record("layer_norm", out,
           [x, gain, bias, out, xhat = std::move(xhat), rstd = std::move(rstd), m, d]() mutable {
             auto dy = out.grad();
             auto g = gain.data();
             if (gain.requires_grad()) {
               auto dg = gain.ensure_grad();
               for (std::size_t i = 0; i < m; ++i)
                 for (std::size_t j = 0; j < d; ++j) dg[j] += dy[i * d + j] * xhat[i * d + j];
             }
             if (bias.requires_grad()) {
               auto db = bias.ensure_grad();
               for (std::size_t i = 0; i < m; ++i)
                 for (std::size_t j = 0; j < d; ++j) db[j] += dy[i * d + j];
             }
             if (x.requires_grad()) {
               auto dx = x.ensure_grad();
               const double inv_d = 1.0 / static_cast<double>(d);
               for (std::size_t i = 0; i < m; ++i) {
                 double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                 for (std::size_t j = 0; j < d; ++j) {
                   const double dxh = dy[i * d + j] * g[j];
                   mean_dxhat += dxh;
                   mean_dxhat_xhat += dxh * xhat[i * d + j];
                 }
                 mean_dxhat *= inv_d;
                 mean_dxhat_xhat *= inv_d;
                 for (std::size_t j = 0; j < d; ++j) {
                   const double dxh = dy[i * d + j] * g[j];
                   dx[i * d + j] +=
                       rstd[i] * (dxh - mean_dxhat - xhat[i * d + j] * mean_dxhat_xhat);
                 }
               }
             }
           });
  }
  return out;
}

Tensor Graph::gelu(const Tensor& x) {
  Tensor out(x.shape());
  auto o = out.data();
  auto xv = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = kernels::gelu(xv[i]);
  if (wants_grad({&x})) {
    out.set_requires_grad(true);
    record("gelu", out, [x, out]() mutable {
      auto dy = out.grad();
      auto xv = x.data();
      auto dx = x.ensure_grad();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * kernels::gelu_derivative(xv[i]);
    });
  }
  return out;
}

Tensor Graph::scale_columns(const Tensor& x, const Tensor& a) {
  require_rank(x, 2, "scale_columns");
  const std::size_t m = x.rows(), d = x.cols();
  if (a.size() != d) {
    throw DimensionError("scale_columns: " + shape_string(x.shape()) + " with scores " +
                         shape_string(a.shape()));
  }
  Tensor out(x.shape());
  auto o = out.data();
  auto xv = x.data();
  auto av = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j) o[i * d + j] = xv[i * d + j] * av[j];
  if (wants_grad({&x, &a})) {
    out.set_requires_grad(true);
    record("scale_columns", out, [x, a, out, m, d]() mutable {
      auto dy = out.grad();
      auto xv = x.data();
      auto av = a.data();
      if (x.requires_grad()) {
        auto dx = x.ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < d; ++j) dx[i * d + j] += dy[i * d + j] * av[j];
      }
      if (a.requires_grad()) {
        auto da = a.ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < d; ++j) da[j] += dy[i * d + j] * xv[i * d + j];
      }
    });
  }
  return out;
}

Tensor Graph::gather_columns(const Tensor& x, std::span<const std::size_t> columns) {
  require_rank(x, 2, "gather_columns");
  const std::size_t m = x.rows(), d = x.cols(), w = columns.size();
  for (auto c : columns)
    if (c >= d) throw DimensionError("gather_columns: column " + std::to_string(c) +
                                     " out of range for " + shape_string(x.shape()));
  Tensor out(Shape{m, w});
  auto o = out.data();
  auto xv = x.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) o[i * w + j] = xv[i * d + columns[j]];
  if (wants_grad({&x})) {
    out.set_requires_grad(true);
    std::vector<std::size_t> cols(columns.begin(), columns.end());
    record("gather_columns", out, [x, out, cols = std::move(cols), m, d, w]() mutable {
      auto dy = out.grad();
      auto dx = x.ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) dx[i * d + cols[j]] += dy[i * w + j];
    });
  }
  return out;
}

Tensor Graph::gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require_rank(x, 2, "gather_rows");
  const std::size_t m = x.rows(), d = x.cols();
  for (auto r : rows)
    if (r >= m) throw DimensionError("gather_rows: row " + std::to_string(r) +
                                     " out of range for " + shape_string(x.shape()));
  Tensor out(Shape{rows.size(), d});
  auto o = out.data();
  auto xv = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(xv.begin() + rows[i] * d, d, o.begin() + i * d);
  if (wants_grad({&x})) {
    out.set_requires_grad(true);
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    record("gather_rows", out, [x, out, idx = std::move(idx), d]() mutable {
      auto dy = out.grad();
      auto dx = x.ensure_grad();
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) dx[idx[i] * d + j] += dy[i * d + j];
    });
  }
  return out;
}

Tensor Graph::embed_tokens(const Tensor& patches, const Tensor& cls, const Tensor& pos,
                           std::size_t batch) {
  require_rank(patches, 2, "embed_tokens");
  require_rank(pos, 2, "embed_tokens");
  const std::size_t d = patches.cols();
  const std::size_t n = pos.rows();
  if (batch == 0 || n < 1 || patches.rows() != batch * (n - 1) || pos.cols() != d ||
      cls.size() != d) {
    throw DimensionError("embed_tokens: patches " + shape_string(patches.shape()) + ", class " +
                         shape_string(cls.shape()) + ", positions " + shape_string(pos.shape()) +
                         ", batch " + std::to_string(batch));
  }
  const std::size_t num_patches = n - 1;
  Tensor out(Shape{batch * n, d});
  auto o = out.data();
  auto pv = patches.data();
  auto cv = cls.data();
  auto posv = pos.data();
  for (std::size_t b = 0; b < batch; ++b) {
    double* row0 = o.data() + b * n * d;
    for (std::size_t j = 0; j < d; ++j) row0[j] = cv[j] + posv[j];
    for (std::size_t t = 1; t < n; ++t) {
      double* row = o.data() + (b * n + t) * d;
      const double* src = pv.data() + (b * num_patches + t - 1) * d;
      for (std::size_t j = 0; j < d; ++j) row[j] = src[j] + posv[t * d + j];
    }
  }
  if (wants_grad({&patches, &cls, &pos})) {
    out.set_requires_grad(true);
    record("embed_tokens", out, [patches, cls, pos, out, batch, n, d, num_patches]() mutable {
      auto dy = out.grad();
      for (std::size_t b = 0; b < batch; ++b) {
        const double* g0 = dy.data() + b * n * d;
        if (cls.requires_grad()) {
          auto dc = cls.ensure_grad();
          for (std::size_t j = 0; j < d; ++j) dc[j] += g0[j];
        }
        if (pos.requires_grad()) {
          auto dp = pos.ensure_grad();
          for (std::size_t t = 0; t < n; ++t)
            for (std::size_t j = 0; j < d; ++j) dp[t * d + j] += dy[(b * n + t) * d + j];
        }
        if (patches.requires_grad()) {
          auto dpatch = patches.ensure_grad();
          for (std::size_t t = 1; t < n; ++t)
            for (std::size_t j = 0; j < d; ++j)
              dpatch[(b * num_patches + t - 1) * d + j] += dy[(b * n + t) * d + j];
        }
      }
    });
  }
  return out;
}

Tensor Graph::attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const AttentionLayout& layout) {
  require_rank(q, 2, "attention");
  require_rank(k, 2, "attention");
  require_rank(v, 2, "attention");
  const std::size_t batch = layout.batch, n = layout.tokens, heads = layout.heads;
  const std::size_t rows = batch * n;
  std::size_t dv_total = 0;
  for (auto w : layout.value_widths) dv_total += w;
  if (heads == 0 || layout.value_widths.size() != heads || q.shape() != k.shape() ||
      q.rows() != rows || v.rows() != rows || q.cols() % heads != 0 || q.cols() == 0 ||
      v.cols() != dv_total) {
    throw DimensionError("attention: head partition inconsistent with q " +
                         shape_string(q.shape()) + ", k " + shape_string(k.shape()) + ", v " +
                         shape_string(v.shape()) + " for " + std::to_string(heads) +
                         " heads over " + std::to_string(batch) + "x" + std::to_string(n) +
                         " tokens");
  }
  const std::size_t dqk = q.cols();
  const std::size_t dk = dqk / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<std::size_t> voff(heads, 0);
  for (std::size_t h = 1; h < heads; ++h) voff[h] = voff[h - 1] + layout.value_widths[h - 1];

  Tensor out(Shape{rows, dv_total});
  std::vector<double> probs(batch * heads * n * n);
  auto qv = q.data();
  auto kv = k.data();
  auto vv = v.data();
  auto o = out.data();
  std::vector<double> scores(n);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      double* p = probs.data() + (b * heads + h) * n * n;
      const std::size_t dvh = layout.value_widths[h];
      for (std::size_t t = 0; t < n; ++t) {
        const double* qt = qv.data() + (b * n + t) * dqk + h * dk;
        for (std::size_t s = 0; s < n; ++s) {
          const double* ks = kv.data() + (b * n + s) * dqk + h * dk;
          double acc = 0.0;
          for (std::size_t c = 0; c < dk; ++c) acc += qt[c] * ks[c];
          scores[s] = acc * scale;
        }
        kernels::softmax_row(scores, std::span<double>(p + t * n, n));
        double* ot = o.data() + (b * n + t) * dv_total + voff[h];
        for (std::size_t s = 0; s < n; ++s) {
          const double w = p[t * n + s];
          const double* vs = vv.data() + (b * n + s) * dv_total + voff[h];
          for (std::size_t c = 0; c < dvh; ++c) ot[c] += w * vs[c];
        }
      }
    }
  }
  mac_counter() += batch * n * n * (dqk + dv_total);

  if (wants_grad({&q, &k, &v})) {
    out.set_requires_grad(true);
    record("attention", out,
           [q, k, v, out, probs = std::move(probs), widths = layout.value_widths,
            voff = std::move(voff), batch, n, heads, dqk, dk, dv_total, scale]() mutable {
             auto dy = out.grad();
             auto qv = q.data();
             auto kv = k.data();
             auto vv = v.data();
             std::span<double> dq = q.requires_grad() ? q.ensure_grad() : std::span<double>{};
             std::span<double> dk_ = k.requires_grad() ? k.ensure_grad() : std::span<double>{};
             std::span<double> dv = v.requires_grad() ? v.ensure_grad() : std::span<double>{};
             std::vector<double> dp(n * n);
             for (std::size_t b = 0; b < batch; ++b) {
               for (std::size_t h = 0; h < heads; ++h) {
                 const double* p = probs.data() + (b * heads + h) * n * n;
                 const std::size_t dvh = widths[h];
                 for (std::size_t t = 0; t < n; ++t) {
                   const double* gt = dy.data() + (b * n + t) * dv_total + voff[h];
                   for (std::size_t s = 0; s < n; ++s) {
                     const double* vs = vv.data() + (b * n + s) * dv_total + voff[h];
                     double acc = 0.0;
                     for (std::size_t c = 0; c < dvh; ++c) acc += gt[c] * vs[c];
                     dp[t * n + s] = acc;
                     if (!dv.empty()) {
                       double* dvs = dv.data() + (b * n + s) * dv_total + voff[h];
                       const double w = p[t * n + s];
                       for (std::size_t c = 0; c < dvh; ++c) dvs[c] += w * gt[c];
                     }
                   }
                 }
                 if (dq.empty() && dk_.empty()) continue;
                 for (std::size_t t = 0; t < n; ++t) {
                   double dot = 0.0;
                   for (std::size_t s = 0; s < n; ++s) dot += dp[t * n + s] * p[t * n + s];
                   for (std::size_t s = 0; s < n; ++s)
                     dp[t * n + s] = p[t * n + s] * (dp[t * n + s] - dot) * scale;
                 }
                 for (std::size_t t = 0; t < n; ++t) {
                   const double* qt = qv.data() + (b * n + t) * dqk + h * dk;
                   for (std::size_t s = 0; s < n; ++s) {
                     const double ds = dp[t * n + s];
                     const double* ks = kv.data() + (b * n + s) * dqk + h * dk;
                     if (!dq.empty()) {
                       double* dqt = dq.data() + (b * n + t) * dqk + h * dk;
                       for (std::size_t c = 0; c < dk; ++c) dqt[c] += ds * ks[c];
                     }
                     if (!dk_.empty()) {
                       double* dks = dk_.data() + (b * n + s) * dqk + h * dk;
                       for (std::size_t c = 0; c < dk; ++c) dks[c] += ds * qt[c];
                     }
                   }
                 }
               }
             }
           });
  }
  return out;
}

Tensor Graph::attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::size_t num_heads) {
  require_rank(v, 2, "attention");
  return attention(q, k, v, AttentionLayout::uniform(1, q.rows(), num_heads, v.cols()));
}

Tensor Graph::cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t b = logits.rows(), c = logits.cols();
  if (b == 0 || labels.size() != b) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_string(logits.shape()));
  }
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= c)
      throw InputError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                       std::to_string(c) + ")");
  std::vector<double> probs(b * c);
  auto x = logits.data();
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    auto row = x.subspan(i * c, c);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    total += lse - row[labels[i]];
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(row[j] - lse);
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(b));
  if (wants_grad({&logits})) {
    out.set_requires_grad(true);
    std::vector<int> ys(labels.begin(), labels.end());
    record("cross_entropy", out,
           [logits, out, probs = std::move(probs), ys = std::move(ys), b, c]() mutable {
             const double g = out.grad()[0] / static_cast<double>(b);
             auto dx = logits.ensure_grad();
             for (std::size_t i = 0; i < b; ++i) {
               for (std::size_t j = 0; j < c; ++j) {
                 const double onehot = static_cast<std::size_t>(ys[i]) == j ? 1.0 : 0.0;
                 dx[i * c + j] += g * (probs[i * c + j] - onehot);
               }
             }
           });
  }
  return out;
}

Tensor Graph::l1_penalty(std::span<const Tensor> gates, double lambda) {
  if (lambda < 0.0) throw ConfigError("l1_penalty: lambda must be >= 0");
  double total = 0.0;
  for (const auto& g : gates)
    for (double v : g.data()) total += std::abs(v);
  Tensor out = Tensor::scalar(lambda * total);
  bool any = false;
  for (const auto& g : gates) any = any || g.requires_grad();
  if (mode_ == GradMode::record && any) {
    out.set_requires_grad(true);
    std::vector<Tensor> held(gates.begin(), gates.end());
    record("l1_penalty", out, [held = std::move(held), out, lambda]() mutable {
      const double g = out.grad()[0] * lambda;
      for (auto& t : held) {
        if (!t.requires_grad()) continue;
        auto dt = t.ensure_grad();
        auto v = t.data();
        for (std::size_t i = 0; i < v.size(); ++i) dt[i] += g * sign(v[i]);
      }
    });
  }
  return out;
}

void Graph::backward(const Tensor& loss) {
  if (consumed_) throw UsageError("backward(): graph already consumed");
  if (!loss.defined() || loss.size() != 1) {
    throw UsageError("backward(): loss must be a scalar, got " +
                     (loss.defined() ? shape_string(loss.shape()) : std::string("undefined")));
  }
  Tensor root = loss;
  if (!root.requires_grad()) throw UsageError("backward(): loss does not depend on any parameter");
  root.ensure_grad()[0] += 1.0;
  consumed_ = true;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    it->backward();
  }
  nodes_.clear();
}

}  // namespace vtp
