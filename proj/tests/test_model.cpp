#include <gtest/gtest.h>

#include <cmath>

#include "model_util.hpp"
#include "vtp/cost.hpp"
#include "vtp/error.hpp"
#include "vtp/model.hpp"
#include "vtp/prune.hpp"

using namespace vtp;
using vtp::test::logits;
using vtp::test::perturb;
using vtp::test::random_images;

namespace {

// ---- straight-line reference forward, written against plain vectors -------

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

Mat affine(const Mat& x, const Tensor& w, const Tensor& b) {
  const std::size_t in = w.rows(), out = w.cols();
  Mat y(x.size(), Vec(out));
  for (std::size_t r = 0; r < x.size(); ++r)
    for (std::size_t o = 0; o < out; ++o) {
      double s = b.data()[o];
      for (std::size_t i = 0; i < in; ++i) s += x[r][i] * w.at(i, o);
      y[r][o] = s;
    }
  return y;
}

Mat norm(const Mat& x, const Norm& n) {
  Mat y = x;
  for (auto& row : y) {
    const double d = static_cast<double>(row.size());
    double mean = 0, var = 0;
    for (double v : row) mean += v;
    mean /= d;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= d;
    for (std::size_t j = 0; j < row.size(); ++j)
      row[j] = (row[j] - mean) / std::sqrt(var + 1e-6) * n.gain.data()[j] + n.bias.data()[j];
  }
  return y;
}

void gate(Mat& x, const Tensor& a) {
  for (auto& row : x)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] *= a.data()[j];
}

double gelu(double x) { return 0.5 * x * (1 + std::tanh(std::sqrt(2 / M_PI) * (x + 0.044715 * x * x * x))); }

Vec reference_logits(const VitModel& m, const Tensor& images, std::size_t img) {
  const auto& c = m.config;
  const std::size_t C = c.in_channels, H = c.image_size, P = c.patch_size, G = H / P, d = c.embed_dim;
  auto pixel = [&](std::size_t ch, std::size_t y, std::size_t x) {
    return images.data()[((img * C + ch) * H + y) * H + x];
  };
  Mat patches;
  for (std::size_t gy = 0; gy < G; ++gy)
    for (std::size_t gx = 0; gx < G; ++gx) {
      Vec p;
      for (std::size_t iy = 0; iy < P; ++iy)
        for (std::size_t ix = 0; ix < P; ++ix)
          for (std::size_t ch = 0; ch < C; ++ch) p.push_back(pixel(ch, gy * P + iy, gx * P + ix));
      patches.push_back(p);
    }
  Mat emb = affine(patches, m.patch_embed.weight, m.patch_embed.bias);
  Mat x(1 + emb.size(), Vec(d));
  for (std::size_t j = 0; j < d; ++j) x[0][j] = m.cls_token.data()[j] + m.pos_embed.at(0, j);
  for (std::size_t t = 0; t < emb.size(); ++t)
    for (std::size_t j = 0; j < d; ++j) x[t + 1][j] = emb[t][j] + m.pos_embed.at(t + 1, j);

  const std::size_t n = x.size(), heads = c.num_heads, dh = d / heads;
  for (const Block& b : m.blocks) {
    Mat h = norm(x, b.norm1);
    gate(h, b.gate(SitePosition::qkv_in));
    const Mat q = affine(h, b.q.weight, b.q.bias), k = affine(h, b.k.weight, b.k.bias),
              v = affine(h, b.v.weight, b.v.bias);
    Mat att(n, Vec(d, 0.0));
    for (std::size_t hd = 0; hd < heads; ++hd)
      for (std::size_t i = 0; i < n; ++i) {
        Vec s(n);
        for (std::size_t j = 0; j < n; ++j) {
          double dot = 0;
          for (std::size_t e = 0; e < dh; ++e) dot += q[i][hd * dh + e] * k[j][hd * dh + e];
          s[j] = dot / std::sqrt(static_cast<double>(dh));
        }
        double mx = s[0], z = 0;
        for (double e : s) mx = std::max(mx, e);
        for (auto& e : s) z += (e = std::exp(e - mx));
        for (std::size_t j = 0; j < n; ++j)
          for (std::size_t e = 0; e < dh; ++e) att[i][hd * dh + e] += s[j] / z * v[j][hd * dh + e];
      }
    gate(att, b.gate(SitePosition::attn_out));
    const Mat proj = affine(att, b.out.weight, b.out.bias);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) x[i][j] += proj[i][j];

    Mat y = norm(x, b.norm2);
    gate(y, b.gate(SitePosition::mlp_in));
    Mat hidden = affine(y, b.fc1.weight, b.fc1.bias);
    for (auto& row : hidden)
      for (auto& e : row) e = gelu(e);
    gate(hidden, b.gate(SitePosition::mlp_hidden));
    const Mat mlp = affine(hidden, b.fc2.weight, b.fc2.bias);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) x[i][j] += mlp[i][j];
  }
  return affine(norm(Mat{x[0]}, m.final_norm), m.head.weight, m.head.bias)[0];
}

}  // namespace

TEST(ModelConfig, ValidationAndDerivedSizes) {
  const auto toy = ModelConfig::toy();
  EXPECT_EQ(toy.tokens(), 17u);
  EXPECT_EQ(toy.hidden_dim(), 128u);
  EXPECT_EQ(toy.patch_dim(), 48u);
  ModelConfig bad = toy;
  bad.patch_size = 5;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = toy;
  bad.num_heads = 5;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = toy;
  bad.mlp_ratio = 1.01;
  EXPECT_THROW(bad.validate(), ConfigError);
  EXPECT_THROW(init_model(bad, 1), ConfigError);
}

TEST(InitModel, DeterministicPerSeed) {
  const auto a = init_model(ModelConfig::toy(), 9);
  const auto b = init_model(ModelConfig::toy(), 9);
  const auto c = init_model(ModelConfig::toy(), 10);
  const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    EXPECT_EQ(max_abs_diff(pa[i].tensor, pb[i].tensor), 0.0) << pa[i].name;
    any_diff |= max_abs_diff(pa[i].tensor, pc[i].tensor) > 0.0;
  }
  EXPECT_TRUE(any_diff);
}

TEST(InitModel, GatesStartAtOneAndWeightsAreTruncated) {
  const auto m = init_model(ModelConfig::toy(), 3);
  EXPECT_EQ(m.gates().size(), 8u);
  for (const auto& g : m.gates())
    for (double v : g.data()) EXPECT_EQ(v, 1.0);
  for (double v : m.blocks[0].fc1.weight.data()) EXPECT_LE(std::abs(v), 0.04);
  for (double v : m.blocks[0].fc1.bias.data()) EXPECT_EQ(v, 0.0);
}

TEST(InitModel, DeitBaseParameterCount) {
  // DeiT-B is published at 86.4M parameters.
  const double params = static_cast<double>(count_params(ModelConfig::deit_b()));
  EXPECT_NEAR(params / 86.4e6, 1.0, 0.01);
}

TEST(Forward, ShapeAndBatchIndependence) {
  auto m = init_model(ModelConfig::toy(), 4);
  Rng rng(5);
  perturb(m, rng);
  Tensor one = random_images(1, m.config, rng);
  Tensor two(Shape{2, 3, 16, 16});
  std::copy(one.data().begin(), one.data().end(), two.data().begin());
  std::copy(one.data().begin(), one.data().end(), two.data().begin() + one.size());
  const Tensor out = logits(m, two);
  ASSERT_EQ(out.shape(), (Shape{2, 10}));
  for (std::size_t c = 0; c < 10; ++c) EXPECT_EQ(out.at(0, c), out.at(1, c));
  EXPECT_THROW(logits(m, Tensor(Shape{1, 3, 8, 8})), DimensionError);
}

TEST(Forward, MatchesStraightLineReference) {
  auto m = init_model(ModelConfig::toy(), 6);
  Rng rng(7);
  perturb(m, rng);
  const Tensor images = random_images(3, m.config, rng);
  const Tensor out = logits(m, images);
  for (std::size_t i = 0; i < 3; ++i) {
    const Vec want = reference_logits(m, images, i);
    for (std::size_t c = 0; c < 10; ++c) EXPECT_NEAR(out.at(i, c), want[c], 1e-12);
  }
}

TEST(Forward, ResidualWidthIsPreserved) {
  auto m = init_model(ModelConfig::toy(), 8);
  Rng rng(9);
  const std::size_t batch = 2, n = m.config.tokens();
  Tensor x = test::random_tensor({batch * n, m.config.embed_dim}, rng);
  Graph g(GradMode::no_grad);
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    x = m.block_forward(g, x, b, batch, ForwardMode::soft);
    EXPECT_EQ(x.shape(), (Shape{batch * n, m.config.embed_dim}));
  }
  auto hard = apply_plan(m, make_plan(m, 0.5));
  x = test::random_tensor({batch * n, m.config.embed_dim}, rng);
  for (std::size_t b = 0; b < hard.blocks.size(); ++b) {
    x = hard.block_forward(g, x, b, batch, ForwardMode::hard);
    EXPECT_EQ(x.shape(), (Shape{batch * n, m.config.embed_dim}));
  }
}

TEST(Forward, ModeMisuseIsAStateError) {
  auto m = init_model(ModelConfig::toy(), 8);
  Rng rng(1);
  const Tensor images = random_images(1, m.config, rng);
  Graph g(GradMode::no_grad);
  EXPECT_THROW(m.forward(g, images, ForwardMode::hard), StateError);
  auto hard = apply_plan(m, make_plan(m, 0.0));
  EXPECT_THROW(hard.forward(g, images, ForwardMode::soft), StateError);
}

TEST(Gates, UnitGatesAreNeutral) {
  // all-ones soft model vs the same model folded through a keep-everything plan
  auto m = init_model(ModelConfig::toy(), 10);
  Rng rng(11);
  perturb(m, rng);
  for (auto& g : m.gates())
    for (auto& v : g.data()) v = 1.0;
  const Tensor images = random_images(4, m.config, rng);
  const auto hard = apply_plan(m, make_plan(m, 0.0));
  const Tensor a = logits(m, images), b = logits(hard, images);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.data()[i], b.data()[i]);
}

TEST(Gates, ZeroGatesWithZeroBiasesReduceBlockToIdentity) {
  auto m = init_model(ModelConfig::toy(), 12);
  for (auto& g : m.gates())
    for (auto& v : g.data()) v = 0.0;
  Rng rng(13);
  const std::size_t n = m.config.tokens();
  const Tensor x = test::random_tensor({n, m.config.embed_dim}, rng);
  Graph g(GradMode::no_grad);
  const Tensor y = m.block_forward(g, x, 0, 1, ForwardMode::soft);
  EXPECT_EQ(max_abs_diff(x, y), 0.0);
}

TEST(Gates, ZeroGatesLeaveOnlyBranchBiases) {
  auto m = init_model(ModelConfig::toy(), 14);
  Rng rng(15);
  perturb(m, rng);
  for (auto& g : m.gates())
    for (auto& v : g.data()) v = 0.0;
  const auto& b = m.blocks[0];
  const std::size_t n = m.config.tokens(), d = m.config.embed_dim;
  const Tensor x = test::random_tensor({n, d}, rng);
  Graph g(GradMode::no_grad);
  const Tensor y = m.block_forward(g, x, 0, 1, ForwardMode::soft);
  // Zeroed hidden units make fc2 emit its bias; the attention branch emits out's bias.
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j)
      EXPECT_NEAR(y.at(i, j), x.at(i, j) + b.out.bias.data()[j] + b.fc2.bias.data()[j], 1e-15);
}

TEST(Gates, EveryGateReceivesAFiniteGradient) {
  auto m = init_model(ModelConfig::toy(), 16);
  Rng rng(17);
  perturb(m, rng);
  const Tensor images = random_images(4, m.config, rng);
  const std::vector<int> labels{1, 7, 3, 3};
  Graph g;
  g.backward(g.cross_entropy(m.forward(g, images, ForwardMode::soft), labels));
  for (const auto& gate : m.gates()) {
    ASSERT_TRUE(gate.has_grad());
    double mag = 0;
    for (double v : gate.grad()) {
      EXPECT_TRUE(std::isfinite(v));
      mag += std::abs(v);
    }
    EXPECT_GT(mag, 0.0);
  }
}

TEST(Attention, HeadSplitMatchesPerHeadLoop) {
  auto m = init_model(ModelConfig::toy(), 18);
  Rng rng(19);
  perturb(m, rng);
  const std::size_t n = m.config.tokens(), d = m.config.embed_dim, heads = m.config.num_heads;
  const Tensor q = test::random_tensor({n, d}, rng), k = test::random_tensor({n, d}, rng),
               v = test::random_tensor({n, d}, rng);
  Graph g(GradMode::no_grad);
  const Tensor fused = g.attention(q, k, v, heads);
  const std::size_t dh = d / heads;
  for (std::size_t h = 0; h < heads; ++h) {
    std::vector<std::size_t> cols(dh);
    for (std::size_t e = 0; e < dh; ++e) cols[e] = h * dh + e;
    const Tensor one = g.attention(g.gather_columns(q, cols), g.gather_columns(k, cols),
                                   g.gather_columns(v, cols), 1);
    EXPECT_LE(max_abs_diff(one, g.gather_columns(fused, cols)), 1e-12);
  }
}

TEST(FullModel, LossGradientMatchesFiniteDifferences) {
  // A tiny gated transformer so every scalar can be perturbed.
  ModelConfig c{8, 4, 2, 8, 2, 2, 2.0, 3};
  auto m = init_model(c, 20);
  Rng rng(21);
  for (auto& p : m.parameters())
    for (auto& v : p.tensor.data()) v += 0.3 * rng.normal();
  const Tensor images = random_images(2, c, rng);
  const std::vector<int> labels{2, 0};
  std::vector<Tensor> params;
  for (const auto& p : m.parameters()) params.push_back(p.tensor);
  const double err = test::grad_check(
      [&](Graph& g) {
        Tensor loss = g.cross_entropy(m.forward(g, images, ForwardMode::soft), labels);
        const auto gates = m.gates();
        return g.add(loss, g.l1_penalty(gates, 0.01));
      },
      params);
  EXPECT_LE(err, 1e-4);
}
