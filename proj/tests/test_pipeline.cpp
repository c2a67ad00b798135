#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

#include "tiny_config.hpp"
#include "vtp/pipeline.hpp"

using namespace vtp;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("vtp_pipeline_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

std::set<std::string> listing(const fs::path& dir) {
  std::set<std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) out.insert(e.path().filename().string());
  return out;
}

PipelineResult run(const PipelineConfig& c, const fs::path& dir, bool resume = false) {
  PipelineOptions o;
  o.out_dir = dir;
  o.resume = resume;
  return run_pipeline(c, o);
}

}  // namespace

TEST(Pipeline, WritesExactlySevenArtifacts) {
  const auto dir = fresh_dir("artifacts");
  const auto r = run(test::tiny_pipeline(), dir);
  EXPECT_EQ(listing(dir), (std::set<std::string>{"baseline.ckpt", "sparse.ckpt", "pruned.ckpt", "final.ckpt",
                                                 "report.txt", "report.kv", "metrics.log"}));
  EXPECT_GT(r.report.params_reduced_pct, 0.0);
  EXPECT_GT(r.report.flops_reduced_pct, 0.0);
  EXPECT_EQ(load_checkpoint(dir / "baseline.ckpt").stage, "baseline");
  EXPECT_EQ(load_checkpoint(dir / "sparse.ckpt").stage, "sparsity");
  EXPECT_EQ(load_checkpoint(dir / "pruned.ckpt").stage, "pruned");
  EXPECT_EQ(load_checkpoint(dir / "final.ckpt").stage, "finetune");
  EXPECT_EQ(slurp(dir / "report.kv"), format_kv(r.report));

  // one metrics line per epoch of each training stage plus the prune record
  const auto log = slurp(dir / "metrics.log");
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 7);
  EXPECT_NE(log.find("\"stage\":\"pruned\""), std::string::npos) << log;
}

TEST(Pipeline, PrunedScoresAreSmallerOnAverageAndFinetuneRecovers) {
  const auto r = run_pipeline(test::tiny_pipeline());
  double kept = 0, pruned = 0;
  std::size_t nk = 0, np = 0;
  for (const auto& s : collect_scores(r.sparse_model)) {
    if (r.plan.mask(s.site).keep[s.index]) {
      kept += s.magnitude;
      ++nk;
    } else {
      pruned += s.magnitude;
      ++np;
    }
  }
  ASSERT_GT(np, 0u);
  EXPECT_LT(pruned / np, kept / nk);
  EXPECT_GE(r.final_eval_acc, r.pruned_eval_acc);
}

TEST(Pipeline, DeterministicAcrossRuns) {
  const auto a = fresh_dir("det_a"), b = fresh_dir("det_b");
  run(test::tiny_pipeline(), a);
  run(test::tiny_pipeline(), b);
  for (const auto& name : listing(a)) EXPECT_EQ(slurp(a / name), slurp(b / name)) << name;
}

TEST(Pipeline, ResumeFromSparseCheckpointMatchesUninterruptedRun) {
  const auto full = fresh_dir("resume_full"), part = fresh_dir("resume_part");
  run(test::tiny_pipeline(), full);
  run(test::tiny_pipeline(), part);
  for (const char* name : {"pruned.ckpt", "final.ckpt", "report.txt", "report.kv"}) fs::remove(part / name);
  // the baseline checkpoint is not needed once sparse.ckpt exists, but a stale one must not hurt
  run(test::tiny_pipeline(), part, true);
  for (const char* name : {"pruned.ckpt", "final.ckpt", "report.txt", "report.kv"})
    EXPECT_EQ(slurp(full / name), slurp(part / name)) << name;
}

TEST(Pipeline, RateZeroPruneIsIdentity) {
  auto c = test::tiny_pipeline();
  c.rate = 0.0;
  const auto r = run_pipeline(c);
  EXPECT_EQ(r.pruned_eval_acc, r.sparse_eval_acc);
  EXPECT_EQ(r.report.params_reduced_pct, 0.0);
  EXPECT_EQ(r.report.flops_reduced_pct, 0.0);
  EXPECT_EQ(r.plan.pruned_scores, 0u);
}

TEST(Pipeline, StageFailuresCarryTheStageTag) {
  const auto dir = fresh_dir("stage_error");
  run(test::tiny_pipeline(), dir);
  {
    std::ofstream os(dir / "sparse.ckpt", std::ios::binary | std::ios::trunc);
    os << "garbage";
  }
  try {
    run(test::tiny_pipeline(), dir, true);
    FAIL() << "expected StageError";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "sparsity");
    EXPECT_EQ(e.exit_code(), kExitCheckpoint);
  }
  auto bad = test::tiny_pipeline();
  bad.train_sparsity.lambda = 0.0;
  try {
    run_pipeline(bad);
    FAIL() << "expected StageError";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "config");
    EXPECT_EQ(e.exit_code(), kExitConfig);
  }
}
