// Sweeps the sparsity weight on the toy task and reports, per lambda, the
// median |score| of the sets that pruning at the configured rate would keep
// and remove. The recommended lambda is the smallest one whose kept/pruned
// median ratio reaches --target-ratio.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "vtp/pipeline.hpp"

namespace {

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparsity-weight sweep for the toy pruning task"};
  std::string config_path;
  std::string lambdas_text = "1e-4,3e-4,1e-3,3e-3,1e-2,3e-2,1e-1";
  double target_ratio = 2.0;
  app.add_option("--config", config_path, "pipeline config file (defaults to the built-in toy task)");
  app.add_option("--lambdas", lambdas_text, "comma-separated sparsity weights")->capture_default_str();
  app.add_option("--target-ratio", target_ratio, "required kept/pruned median |score| ratio")
      ->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  try {
    vtp::PipelineConfig cfg = config_path.empty() ? vtp::PipelineConfig{} : vtp::load_config_file(config_path);
    std::vector<double> lambdas;
    std::stringstream ss(lambdas_text);
    for (std::string item; std::getline(ss, item, ',');) lambdas.push_back(std::stod(item));

    const auto t0 = std::chrono::steady_clock::now();
    auto elapsed = [&] {
      return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };
    const auto data = vtp::make_dataset(cfg.data);
    const auto baseline = vtp::run_train_stage(vtp::initial_model(cfg), data, cfg.train_baseline);
    std::printf("baseline  train_acc=%.4f eval_acc=%.4f  (%.1fs)\n",
                vtp::evaluate(baseline.model, data.train), vtp::evaluate(baseline.model, data.eval),
                elapsed());

    double chosen = -1.0;
    for (double lambda : lambdas) {
      vtp::TrainConfig sc = cfg.train_sparsity;
      sc.lambda = lambda;
      const auto sparse = vtp::run_train_stage(baseline.model, data, sc);
      const auto plan = vtp::make_plan(sparse.model, cfg.rate);
      std::vector<double> kept, pruned;
      for (const auto& e : vtp::collect_scores(sparse.model)) {
        const auto& m = plan.mask(e.site);
        (m.keep[e.index] ? kept : pruned).push_back(e.magnitude);
      }
      const double mk = median(kept), mp = median(pruned);
      const double ratio = mp > 0.0 ? mk / mp : INFINITY;
      const auto hard = vtp::apply_plan(sparse.model, plan);
      std::printf(
          "lambda=%-8g median_kept=%.4f median_pruned=%.4f ratio=%.3f sparse_eval=%.4f "
          "pruned_eval=%.4f  (%.1fs)\n",
          lambda, mk, mp, ratio, vtp::evaluate(sparse.model, data.eval),
          vtp::evaluate(hard, data.eval), elapsed());
      std::fflush(stdout);
      if (chosen < 0.0 && ratio >= target_ratio) chosen = lambda;
    }
    if (chosen > 0.0) {
      std::printf("recommended lambda=%g\n", chosen);
    } else {
      std::printf("no lambda reached ratio %.2f\n", target_ratio);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return vtp::exit_code_for(e);
  }
  return 0;
}
