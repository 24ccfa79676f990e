#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "twotower/data.hpp"
#include "twotower/eval.hpp"
#include "twotower/sampling.hpp"
#include "twotower/towers.hpp"

namespace twotower {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moments laid out like the parameters they track.
struct AdamState {
  AdamConfig config;
  std::int64_t step = 0;
  ModelParams first;
  ModelParams second;

  static AdamState zeros_like(const ModelParams& params, AdamConfig config = {});
};

/// Bias-corrected Adam. Dense tensors update every step; embedding tables
/// update only the rows present in the sparse gradient.
void adam_step(ModelParams& params, const Gradients& grads, AdamState& state, double lr);

/// What one step may draw negatives from besides the batch itself.
struct StepContext {
  StrategyKind kind = StrategyKind::in_batch;
  const UnigramTable* unigram = nullptr;
  const ItemDraw* global = nullptr;  // uniform and mns draws
  const MemoryBank* bank = nullptr;  // cbns past warm-up; null means plain in-batch
  double l2 = 0.0;
};

struct StepOutput {
  double loss = 0.0;  // cross-entropy plus penalty
  double penalty = 0.0;
  Gradients grads;
  Matrix positive_vectors;  // item-tower output for the batch positives
  std::size_t in_batch_negatives = 0;
  std::size_t bank_negatives = 0;
  std::size_t global_negatives = 0;
};

/// Forward, corrected sampled softmax and backward for one batch.
StepOutput compute_step(const ModelParams& params, const Batch& batch, const StepContext& context);

struct TrainConfig {
  StrategyConfig strategy;
  std::size_t batch_size = 128;
  std::size_t dim = 64;
  std::size_t hidden = 128;
  bool user_embedding = false;
  double lr = 0.001;
  double l2 = 0.0;
  std::size_t patience = 20;       // in evaluations
  std::size_t eval_every = 500;    // iterations; 0 disables validation
  std::size_t max_iterations = 20000;
  std::size_t max_history = 20;
  bool lr_step_decay = false;      // lr x 0.1 after half of max_iterations
  double time_budget_seconds = 0;  // 0 = unlimited
  bool evaluate_test = true;       // score the best parameters on the test split
  std::uint64_t seed = 0;
  std::filesystem::path run_dir;   // best.ckpt is written here when set

  std::size_t resolved_warmup() const;
};

struct EvalRecord {
  std::size_t iteration = 0;
  double wall_seconds = 0.0;  // wall-clock since the run started, evaluations included
  double recall20 = 0.0;
  double ndcg20 = 0.0;
  double recall50 = 0.0;
  double ndcg50 = 0.0;
};

EvalRecord make_record(std::size_t iteration, double wall_seconds, const EvalResult& result);

struct RunReport {
  std::string strategy;
  std::vector<EvalRecord> records;
  std::vector<double> losses;  // per iteration, cross-entropy plus l2 penalty
  std::size_t iterations = 0;
  std::size_t warmup_iterations = 0;
  std::size_t best_iteration = 0;
  double best_recall50 = 0.0;
  double step_seconds = 0.0;  // training steps only, evaluation excluded
  double total_wall_seconds = 0.0;
  std::string stop_reason;
  std::optional<EvalRecord> test;
};

struct TimingSummary {
  double convergence_minutes = 0.0;
  double avg_seconds_per_1k = 0.0;
  bool convergence_defined = true;  // false: no eval ran; minutes is the total wall-clock
};

TimingSummary timing_summary(const RunReport& report);

struct StepInfo {
  std::size_t iteration = 0;
  double loss = 0.0;
  std::size_t in_batch_negatives = 0;
  std::size_t bank_negatives = 0;
  std::size_t global_negatives = 0;
  std::size_t bank_size = 0;  // after this step's enqueue
};

struct TrainHooks {
  std::function<void(const StepInfo&, const ModelParams&)> on_step;
  std::function<void(const MemoryBank&)> on_finish;  // final bank state, called once
};

struct TrainResult {
  RunReport report;
  ModelParams best_params;
};

TrainResult train(const TrainConfig& config, const SplitDataset& dataset, const TrainHooks& hooks = {});

}  // namespace twotower
