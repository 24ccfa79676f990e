#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "twotower/common.hpp"
#include "twotower/data.hpp"
#include "twotower/towers.hpp"
#include "twotower/trainer.hpp"

namespace twotower {

struct ProbeSet {
  std::vector<ItemIndex> items;
};

/// Up to `size` distinct items drawn uniformly without replacement.
ProbeSet make_probe(std::size_t n_items, std::size_t size, std::uint64_t seed);

/// Item-tower outputs for the probe items, detached.
Matrix snapshot_probe(const ModelParams& params, const ProbeSet& probe);

/// Sum over rows of the Euclidean distance between corresponding rows.
double feature_drift(const Matrix& snapshot, const Matrix& previous);

struct DriftRecord {
  std::size_t iteration = 0;
  std::size_t delta = 0;
  double drift = 0.0;
};

struct DriftConfig {
  std::vector<std::size_t> deltas = {1, 5, 10};
  std::size_t probe_size = 512;
  std::uint64_t probe_seed = 0;
};

struct DriftResult {
  std::vector<DriftRecord> records;
  ModelParams final_params;
};

/// Trains with `train_config` (step decay forced on) and records the probe
/// drift D(t, t - delta) for every iteration t > delta and each configured delta.
DriftResult drift_experiment(const TrainConfig& train_config, const SplitDataset& dataset,
                             const DriftConfig& drift_config);

/// User-tower parameter groups that the gradient deviation is measured over.
enum class UserParam { pooled_embeddings, user_id, w1, b1, w2, b2 };

struct LemmaTrial {
  double epsilon = 0.0;    // ||v_hat - v||^2
  double deviation = 0.0;  // ||d(u.v_hat)/dθ - d(u.v)/dθ||^2
  double bound = 0.0;      // C * epsilon
  bool satisfied = true;
};

struct LemmaCheckReport {
  double jacobian_bound = 0.0;  // C: squared spectral norm of du/dθ
  std::size_t n_parameters = 0;
  std::vector<LemmaTrial> trials;

  bool all_satisfied() const;
};

struct LemmaInput {
  std::vector<ItemIndex> history;  // user tower input
  UserIndex user = 0;
  ItemIndex item = 0;              // item tower input, gives v
};

/// Full Jacobian du/dθ (d x |θ|) of the user tower at `input`, one backward
/// pass per output coordinate.
Matrix user_jacobian(const ModelParams& params, const LemmaInput& input, std::span<const UserParam> scope);

/// Gradient of the logit u.w with respect to the scoped user-tower parameters.
Eigen::VectorXd logit_gradient(const ModelParams& params, const LemmaInput& input,
                               std::span<const double> item_vector, std::span<const UserParam> scope);

/// Perturbs v by `scale` times a standard normal vector, measures the squared
/// gradient deviation and checks it against C * ||v_hat - v||^2.
LemmaCheckReport lemma_check(const ModelParams& params, const LemmaInput& input, double perturbation_scale,
                             std::size_t n_trials, Rng& rng, std::span<const UserParam> scope = {});

/// Same measurement for explicit perturbation directions (one per trial).
LemmaCheckReport lemma_check_directions(const ModelParams& params, const LemmaInput& input,
                                        const std::vector<Eigen::VectorXd>& perturbations,
                                        std::span<const UserParam> scope = {});

}  // namespace twotower
