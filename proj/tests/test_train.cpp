#include <gtest/gtest.h>

#include <cmath>

#include "model_util.hpp"
#include "vtp/data.hpp"
#include "vtp/error.hpp"
#include "vtp/prune.hpp"
#include "vtp/train.hpp"

using namespace vtp;

namespace {

SyntheticDatasetSpec small_spec() {
  SyntheticDatasetSpec s;
  s.train_per_class = 12;
  s.eval_per_class = 6;
  return s;
}

TrainConfig quick(Stage stage, double lambda = 0.0) {
  TrainConfig c;
  c.stage = stage;
  c.epochs = 2;
  c.batch_size = 16;
  c.base_lr = 2e-3;
  c.min_lr = 1e-5;
  c.lambda = lambda;
  c.seed = 5;
  return c;
}

}  // namespace

TEST(Dataset, DeterministicPerSeed) {
  const auto a = make_dataset(small_spec());
  const auto b = make_dataset(small_spec());
  EXPECT_EQ(a.train.pixels, b.train.pixels);
  EXPECT_EQ(a.eval.pixels, b.eval.pixels);
  EXPECT_EQ(a.train.labels, b.train.labels);
  auto other = small_spec();
  other.seed = 8;
  EXPECT_NE(make_dataset(other).train.pixels, a.train.pixels);
}

TEST(Dataset, BalancedCountsAndShapes) {
  const auto d = make_dataset(SyntheticDatasetSpec{});
  EXPECT_EQ(d.train.size(), 2000u);
  EXPECT_EQ(d.eval.size(), 500u);
  std::vector<int> counts(10, 0);
  for (int y : d.train.labels) ++counts.at(y);
  for (int c : counts) EXPECT_EQ(c, 200);
  EXPECT_EQ(d.train.pixels.size(), 2000u * 3 * 16 * 16);
  const std::vector<std::size_t> idx{0, 5};
  EXPECT_EQ(d.train.images(idx).shape(), (Shape{2, 3, 16, 16}));
}

TEST(Dataset, TrainSplitIsNormalizedPerChannel) {
  const auto d = make_dataset(SyntheticDatasetSpec{});
  const std::size_t plane = 16 * 16;
  for (std::size_t ch = 0; ch < 3; ++ch) {
    double sum = 0, sq = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < d.train.size(); ++i)
      for (std::size_t p = 0; p < plane; ++p) {
        const double v = d.train.pixels[(i * 3 + ch) * plane + p];
        sum += v;
        sq += v * v;
        ++n;
      }
    EXPECT_NEAR(sum / n, 0.0, 1e-9);
    EXPECT_NEAR(sq / n, 1.0, 1e-9);
  }
}

TEST(Dataset, EvalSamplesDifferFromTrain) {
  const auto d = make_dataset(small_spec());
  const std::size_t v = d.train.image_values();
  for (std::size_t i = 0; i < d.eval.size(); ++i)
    for (std::size_t j = 0; j < d.train.size(); ++j)
      ASSERT_FALSE(std::equal(d.eval.pixels.begin() + i * v, d.eval.pixels.begin() + (i + 1) * v,
                              d.train.pixels.begin() + j * v));
}

TEST(Dataset, NearestCentroidBeatsChance) {
  const auto d = make_dataset(SyntheticDatasetSpec{});
  const std::size_t v = d.train.image_values();
  std::vector<std::vector<double>> centroid(10, std::vector<double>(v, 0.0));
  for (std::size_t i = 0; i < d.train.size(); ++i)
    for (std::size_t p = 0; p < v; ++p) centroid[d.train.labels[i]][p] += d.train.pixels[i * v + p] / 200.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < d.eval.size(); ++i) {
    int best = 0;
    double best_dist = INFINITY;
    for (int c = 0; c < 10; ++c) {
      double dist = 0;
      for (std::size_t p = 0; p < v; ++p) {
        const double e = d.eval.pixels[i * v + p] - centroid[c][p];
        dist += e * e;
      }
      if (dist < best_dist) best_dist = dist, best = c;
    }
    correct += best == d.eval.labels[i];
  }
  EXPECT_GT(static_cast<double>(correct) / d.eval.size(), 0.1);
}

TEST(Evaluate, ConstantPredictionScoresOneOverClasses) {
  auto m = init_model(ModelConfig::toy(), 1);
  for (auto& w : m.head.weight.data()) w = 0.0;
  m.head.bias.data()[3] = 1.0;
  const auto d = make_dataset(small_spec());
  for (int p : predict(m, d.eval)) EXPECT_EQ(p, 3);
  EXPECT_DOUBLE_EQ(evaluate(m, d.eval), 0.1);
  // all-equal logits resolve to class 0
  m.head.bias.data()[3] = 0.0;
  for (int p : predict(m, d.eval)) EXPECT_EQ(p, 0);
}

TEST(Evaluate, BatchSizeInvariant) {
  auto m = init_model(ModelConfig::toy(), 2);
  Rng rng(3);
  test::perturb(m, rng);
  const auto d = make_dataset(small_spec());
  EXPECT_EQ(predict(m, d.eval, 1), predict(m, d.eval, 64));
  EXPECT_EQ(evaluate(m, d.eval, 1), evaluate(m, d.eval, 7));
}

TEST(Evaluate, UntrainedModelsSitInChanceBand) {
  const auto d = make_dataset(SyntheticDatasetSpec{});
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const double acc = evaluate(init_model(ModelConfig::toy(), seed), d.eval);
    EXPECT_GE(acc, 0.0);
    EXPECT_LE(acc, 0.3) << "seed " << seed;
  }
}

TEST(TrainConfig, LambdaOnlyInSparsityStage) {
  EXPECT_THROW(quick(Stage::sparsity, 0.0).validate(), ConfigError);
  EXPECT_THROW(quick(Stage::baseline, 1e-3).validate(), ConfigError);
  EXPECT_THROW(quick(Stage::finetune, 1e-3).validate(), ConfigError);
  EXPECT_NO_THROW(quick(Stage::sparsity, 1e-3).validate());
  auto c = quick(Stage::baseline);
  c.epochs = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(parse_stage("finetune"), Stage::finetune);
  EXPECT_THROW(parse_stage("pretrain"), ConfigError);
}

TEST(Train, ZeroLearningRateLeavesParameters) {
  const auto d = make_dataset(small_spec());
  auto m = init_model(ModelConfig::toy(), 4);
  const auto before = m.clone();
  auto c = quick(Stage::baseline);
  c.base_lr = 0.0;
  c.min_lr = 0.0;
  train(m, d, c);
  const auto pa = m.parameters(), pb = before.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(max_abs_diff(pa[i].tensor, pb[i].tensor), 0.0);
  EXPECT_EQ(evaluate(m, d.eval), evaluate(before, d.eval));
}

TEST(Train, DeterministicAndRecordsMetrics) {
  const auto d = make_dataset(small_spec());
  auto run = [&] {
    auto m = init_model(ModelConfig::toy(), 6);
    std::vector<std::string> lines;
    const auto r = train(m, d, quick(Stage::baseline), [&](const MetricRecord& rec) {
      lines.push_back(rec.to_json_line());
    });
    EXPECT_EQ(r.history.size(), 2u);
    EXPECT_EQ(r.optimizer.step, 16u);
    return std::pair{m, lines};
  };
  const auto [a, la] = run();
  const auto [b, lb] = run();
  EXPECT_EQ(la, lb);
  const auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(max_abs_diff(pa[i].tensor, pb[i].tensor), 0.0);
  for (const char* key : {"\"stage\"", "\"step\"", "\"lr\"", "\"loss\"", "\"eval_acc\"", "\"gate_median_abs\""})
    EXPECT_NE(la[0].find(key), std::string::npos) << key;
}

TEST(Train, SparsityShrinksGatesBelowControl) {
  const auto d = make_dataset(small_spec());
  auto sparse = init_model(ModelConfig::toy(), 7);
  auto control = sparse.clone();
  train(sparse, d, quick(Stage::sparsity, 1e-2));
  train(control, d, quick(Stage::baseline));
  EXPECT_LT(gate_median_abs(sparse), gate_median_abs(control));
}

TEST(Train, StageModelMismatchIsAStateError) {
  const auto d = make_dataset(small_spec());
  auto soft = init_model(ModelConfig::toy(), 8);
  EXPECT_THROW(train(soft, d, quick(Stage::finetune)), StateError);
  auto hard = apply_plan(soft, make_plan(soft, 0.3));
  EXPECT_THROW(train(hard, d, quick(Stage::sparsity, 1e-3)), StateError);
  EXPECT_NO_THROW(train(hard, d, quick(Stage::finetune)));
}

TEST(Train, NonFiniteLossAbortsWithDiagnostics) {
  const auto d = make_dataset(small_spec());
  auto m = init_model(ModelConfig::toy(), 9);
  m.head.bias.data()[0] = NAN;
  try {
    train(m, d, quick(Stage::baseline));
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("step=0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("lr="), std::string::npos) << msg;
    EXPECT_NE(msg.find("loss="), std::string::npos) << msg;
  }
}

TEST(Train, GateMedianOfFreshModelIsOne) {
  EXPECT_EQ(gate_median_abs(init_model(ModelConfig::toy(), 1)), 1.0);
}
