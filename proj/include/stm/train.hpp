#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "stm/dataset.hpp"
#include "stm/model.hpp"

namespace stm {

struct TrainConfig {
  std::size_t updates = 500;
  std::size_t micro_batch = 2;  // windows per micro-batch
  std::size_t accum = 4;        // micro-batches per optimizer step
  double lr = 1e-3;
  std::size_t warmup = 100;  // linear ramp in updates
  std::uint64_t seed = 1;
};

/// Adaptive-moment optimizer over a parameter registry.
class Adam {
 public:
  explicit Adam(ParamStore& store, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);
  void step(double lr);

 private:
  ParamStore& store_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct TrainResult {
  std::vector<double> losses;  // one per completed update
  bool aborted = false;        // non-finite loss hit
  std::size_t updates_done = 0;
};

/// MSE training with warmup and gradient accumulation. Each update
/// consumes accum micro-batches of micro_batch windows, every window
/// weighted 1/(accum*micro_batch). A non-finite loss aborts before the
/// poisoned step and writes the last good parameters to ckpt_path;
/// otherwise the final parameters land there.
TrainResult train_model(StmModel& model, const DeploymentMap& map,
                        const std::vector<WindowPair>& train,
                        const TrainConfig& cfg, const std::string& ckpt_path);

struct MetricsReport {
  double mae = 0, mse = 0, rmse = 0;
  std::vector<std::array<double, 3>> per_horizon;  // {mae, mse, rmse} per step
  bool ridge_fallback = false;  // linear baseline only
};

/// Normalized-scale MAE/MSE/RMSE over every element of the windows,
/// plus per-horizon rows.
MetricsReport evaluate_model(StmModel& model, const DeploymentMap& map,
                             const std::vector<WindowPair>& windows);

/// Prediction = last history step repeated across the horizon.
MetricsReport persistence_baseline(const std::vector<WindowPair>& windows);

/// Per-feature linear least squares from the history trajectory (plus
/// bias) to the target trajectory, fitted on train, scored on eval.
/// Falls back to ridge (lambda = 1e-6) on singular systems and flags it.
MetricsReport linear_baseline(const std::vector<WindowPair>& train,
                              const std::vector<WindowPair>& eval);

extern const std::vector<std::string> kAblationVariants;  // incl. "full"

/// Applies a variant name to a config's ablation switches.
ModelConfig apply_variant(ModelConfig cfg, const std::string& variant);

}  // namespace stm
