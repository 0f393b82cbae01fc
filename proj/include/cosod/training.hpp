#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "cosod/checkpoint.hpp"
#include "cosod/dataset.hpp"
#include "cosod/losses.hpp"
#include "cosod/metrics.hpp"
#include "cosod/model.hpp"

namespace cosod {

enum class LrSchedule { kConstant, kCosine };

struct TrainConfig {
  double lr = 1e-4;
  // kCosine anneals lr to 0 over the run's total steps.
  LrSchedule lr_schedule = LrSchedule::kConstant;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double adam_eps = 1e-8;
  int epochs = 20;
  // Hard cap on optimizer steps; 0 means epochs * groups.
  int max_steps = 0;
  int group_size = 4;
  int aux_size = 4;
  std::uint64_t seed = 0;
  LossFlags flags;
  // Checkpoint (and validation, when a split is given) every this many steps; 0 = only at the end.
  int eval_every = 0;

  void validate() const;
};

template <typename Scalar>
struct AdamState {
  std::int64_t step = 0;
  std::vector<std::vector<Scalar>> m, v;

  static AdamState zeros(const ParameterSet<Scalar>& params);
};

// One bias-corrected Adam update of every parameter. A parameter without a
// gradient is a usage error unless `exempt(name)` holds, in which case its
// gradient is taken as zero.
template <typename Scalar>
void adam_step(ParameterSet<Scalar>& params, AdamState<Scalar>& state, const TrainConfig& cfg,
               const std::function<bool(const std::string&)>& exempt = {});

// Optimizer moments keyed "adam.m.<param>" / "adam.v.<param>" plus "adam.step".
template <typename Scalar>
std::vector<NamedTensor> export_adam(const AdamState<Scalar>& state, const ParameterSet<Scalar>& params);
template <typename Scalar>
AdamState<Scalar> import_adam(const std::vector<NamedTensor>& tensors, const ParameterSet<Scalar>& params);

// Parameters that legitimately receive no gradient under the given flags.
bool gradient_exempt(const std::string& name, const LossFlags& flags, bool contrastive_active);

struct LossLogRow {
  int step = 0;  // 1-based
  double l_c = 0, l_s = 0, l_ct = 0, l_single = 0, l_group = 0, total = 0;
};

std::string loss_csv_header();
std::string loss_csv_row(const LossLogRow& row);

// Deterministic step schedule: groups are reshuffled every epoch, aux images
// are drawn per step; both depend only on (seed, step).
class Trainer {
 public:
  Trainer(const ModelConfig& model_cfg, const LossConfig& loss_cfg, const TrainConfig& train_cfg,
          const LoadedDataset<float>& data);

  CoSformer<float>& model() { return model_; }
  const CoSformer<float>& model() const { return model_; }
  const AdamState<float>& optimizer() const { return adam_; }

  int steps_per_epoch() const { return static_cast<int>(data_.groups.size()); }
  int total_steps() const;
  int steps_done() const { return static_cast<int>(adam_.step); }

  // Group index and aux indices used by 0-based step `s`.
  int group_for_step(int s) const;
  std::vector<int> aux_for_step(int s) const;

  LossLogRow step();

  void save(const std::filesystem::path& model_path, const std::filesystem::path& optimizer_path) const;
  void resume(const std::filesystem::path& model_path, const std::filesystem::path& optimizer_path);

 private:
  ModelConfig model_cfg_;
  LossConfig loss_cfg_;
  TrainConfig cfg_;
  const LoadedDataset<float>& data_;
  CoSformer<float> model_;
  AdamState<float> adam_;
};

// Maps for one group, with gradients disabled.
std::vector<Tensor<float>> predict_group(const CoSformer<float>& model, const std::vector<Tensor<float>>& images);

// Predictions are quantized to 8 bits before scoring, as if saved to disk.
MetricsReport evaluate_model(const CoSformer<float>& model, const std::vector<ImageGroup<float>>& groups);

struct TrainRun {
  std::filesystem::path out_dir;  // empty: no files written
  const std::vector<ImageGroup<float>>* validation = nullptr;
  bool resume = false;
  std::function<void(const LossLogRow&)> on_step;
};

struct TrainResult {
  std::vector<LossLogRow> log;
  int steps = 0;
  double seconds = 0;
  std::vector<std::pair<int, MetricsReport>> evaluations;
};

// Files under out_dir: model.ckpt, optimizer.ckpt, loss_log.csv and, with a
// validation split, metrics_step<k>.json.
TrainResult train(Trainer& trainer, const TrainConfig& cfg, const TrainRun& run);

struct LadderRow {
  std::string name;
  ModelConfig model;
  LossFlags flags;
  MetricsReport metrics;
  double seconds = 0;
};

// baseline, +TSIR, +TGL, +TGF, +contrastive.
std::vector<LadderRow> ladder_configs(const ModelConfig& base, const LossFlags& base_flags);

std::vector<LadderRow> ablation_ladder(const ModelConfig& base, const LossConfig& loss_cfg,
                                       const TrainConfig& train_cfg, const LoadedDataset<float>& train_data,
                                       const std::vector<ImageGroup<float>>& validation,
                                       const std::function<void(const LadderRow&)>& on_row = {});

std::string ladder_csv(const std::vector<LadderRow>& rows);
std::string ladder_markdown(const std::vector<LadderRow>& rows);

struct OrderSensitivity {
  int n_orders = 0;
  // Population standard deviation across orders of mae, f_max, s_alpha, e_max.
  std::array<double, 4> std_dev{};
  // Largest absolute difference of any raw map against the first order.
  double max_map_diff = 0;
  std::vector<MetricsReport> per_order;
};

// Each order feeds every group through a random permutation and scores the
// maps after undoing it.
OrderSensitivity order_sensitivity(const CoSformer<float>& model, const std::vector<ImageGroup<float>>& groups,
                                   int n_orders, std::uint64_t seed);

std::string order_sensitivity_csv(const std::vector<std::pair<std::string, OrderSensitivity>>& rows);

}  // namespace cosod
