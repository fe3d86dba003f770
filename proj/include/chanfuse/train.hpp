#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "chanfuse/checkpoint.hpp"
#include "chanfuse/data.hpp"
#include "chanfuse/model.hpp"

namespace chanfuse {

struct TrainConfig {
  double lambda_eff = 0.1;
  double lr = 0.01;
  double momentum = 0.9;
  Index epochs = 30;
  std::vector<Index> lr_decay_epochs = {15, 25};
  double lr_decay_factor = 0.1;
  Index batch_size = 32;
  std::uint64_t seed = 0;
  double tau = 0.67;
  double grad_clip = 10.0;  ///< global norm; <= 0 disables
  Index warmup_epochs = 0;  ///< epochs trained without the efficiency term
  BaselinePolicy policy;     ///< non-learned policy used for training and eval
  /// Stop once validation top-1 reaches this value (disabled when unset).
  std::optional<double> target_top1;
  /// Process CPU-time budget for the whole run; no epoch is started that is
  /// expected to overrun it (<= 0 disables).
  double max_cpu_seconds = 0.0;

  void validate() const;
};

struct MetricsRecord {
  Index epoch = 0;
  double train_loss = 0.0;
  double top1 = 0.0;
  std::optional<double> top5;  ///< only when K >= 5
  double mean_flops = 0.0;
  double mean_util = 0.0;
  std::array<double, 3> policy_fractions = {1.0, 0.0, 0.0};  ///< keep, reuse, skip

  /// One JSON object, no trailing newline.
  std::string to_json() const;
};

struct EvalOptions {
  BaselinePolicy policy;
  Index batch_size = 64;
  std::uint64_t seed = 0;  ///< only used by the random policy
  bool collect_trace = false;
};

struct EvalReport {
  double top1 = 0.0;
  std::optional<double> top5;
  double mean_flops = 0.0;
  double mean_util = 0.0;
  std::array<double, 3> policy_fractions = {1.0, 0.0, 0.0};
  double loss = 0.0;
  Index samples = 0;
  PolicyTrace trace;
};

/// Deterministic evaluation: argmax policies, running batch-norm statistics.
EvalReport evaluate(ToyNet& net, const Dataset& data, const EvalOptions& options = {});

/// Cross entropy of the video logits plus lambda_eff times the sum of the
/// per-gate relaxed normalized costs.
Tensor loss(const Tensor& video_logits, std::span<const int> labels,
            const std::vector<Tensor>& gate_costs, double lambda_eff);

/// v <- momentum * v + g; p <- p - lr * v.
void sgd_step(std::span<Parameter* const> params, std::span<const Tensor> grads, double lr,
              double momentum, std::vector<std::vector<double>>& velocity);

double lr_at(Index epoch, const TrainConfig& config);

/// Scales grads in place so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_grad_norm(std::vector<Tensor>& grads, double max_norm);

struct TrainResult {
  std::vector<MetricsRecord> history;
  double cpu_seconds = 0.0;
  bool budget_stop = false;  ///< stopped early by max_cpu_seconds
  MetricsRecord best;
  Checkpoint best_checkpoint;
};

/// Trains `net` in place; the final state of `net` is the last epoch. When
/// `run_dir` is set, appends to run_dir/metrics.jsonl and writes
/// run_dir/checkpoint.afck whenever validation top-1 improves.
using EpochCallback = std::function<void(const MetricsRecord&)>;

TrainResult train(ToyNet& net, const Dataset& train_set, const Dataset& val_set,
                  const TrainConfig& config, const std::optional<std::filesystem::path>& run_dir = {},
                  const std::string& config_echo = {}, const EpochCallback& on_epoch = {});

}  // namespace chanfuse
