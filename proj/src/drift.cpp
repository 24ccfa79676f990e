#include "twotower/drift.hpp"

#include <algorithm>
#include <deque>
#include <numeric>

namespace twotower {

namespace {

constexpr UserParam kAllUserParams[] = {UserParam::pooled_embeddings, UserParam::user_id, UserParam::w1,
                                        UserParam::b1, UserParam::w2, UserParam::b2};

bool in_scope(std::span<const UserParam> scope, UserParam p) {
  return std::find(scope.begin(), scope.end(), p) != scope.end();
}

// Flattens the scoped user-tower gradient in a fixed order.
Eigen::VectorXd flatten_user_gradient(const Gradients& g, const LemmaInput& input, std::size_t dim,
                                      std::span<const UserParam> scope) {
  std::vector<double> out;
  if (in_scope(scope, UserParam::pooled_embeddings)) {
    if (input.history.empty()) {
      out.insert(out.end(), g.empty_history.data(), g.empty_history.data() + g.empty_history.size());
    } else {
      auto rows = input.history;
      std::sort(rows.begin(), rows.end());
      rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
      for (const auto r : rows) {
        const double* v = g.item_embed.find(r);
        for (std::size_t j = 0; j < dim; ++j) out.push_back(v ? v[j] : 0.0);
      }
    }
  }
  if (in_scope(scope, UserParam::user_id) && g.user_embed.n_rows() > 0) {
    const double* v = g.user_embed.find(input.user);
    for (std::size_t j = 0; j < dim; ++j) out.push_back(v ? v[j] : 0.0);
  }
  const auto add = [&](const auto& m) { out.insert(out.end(), m.data(), m.data() + m.size()); };
  if (in_scope(scope, UserParam::w1)) add(g.user_mlp.w1);
  if (in_scope(scope, UserParam::b1)) add(g.user_mlp.b1);
  if (in_scope(scope, UserParam::w2)) add(g.user_mlp.w2);
  if (in_scope(scope, UserParam::b2)) add(g.user_mlp.b2);
  return Eigen::Map<Eigen::VectorXd>(out.data(), static_cast<Eigen::Index>(out.size()));
}

Eigen::VectorXd gradient_for_upstream(const ModelParams& params, const UserTape& tape, const LemmaInput& input,
                                      const Matrix& upstream, std::span<const UserParam> scope) {
  auto grads = Gradients::zeros_like(params);
  user_backward(params, tape, upstream, grads);
  return flatten_user_gradient(grads, input, params.dim(), scope);
}

std::pair<Matrix, UserTape> encode_user(const ModelParams& params, const LemmaInput& input) {
  const std::vector<std::vector<ItemIndex>> histories{input.history};
  const std::vector<UserIndex> users{input.user};
  return user_forward(params, histories, users);
}

LemmaCheckReport run_check(const ModelParams& params, const LemmaInput& input,
                           const std::vector<Eigen::VectorXd>& perturbations, std::span<const UserParam> scope) {
  if (scope.empty()) scope = kAllUserParams;
  const auto [u, tape] = encode_user(params, input);
  const auto [v, item_tape] = item_forward(params, std::vector<ItemIndex>{input.item});

  LemmaCheckReport report;
  const Matrix jacobian = user_jacobian(params, input, scope);
  report.n_parameters = static_cast<std::size_t>(jacobian.cols());
  const Matrix gram = jacobian * jacobian.transpose();
  Eigen::SelfAdjointEigenSolver<Matrix> eig(gram, Eigen::EigenvaluesOnly);
  report.jacobian_bound = std::max(0.0, eig.eigenvalues().maxCoeff());

  const Eigen::VectorXd base = gradient_for_upstream(params, tape, input, v, scope);
  for (const auto& delta : perturbations) {
    if (delta.size() != v.cols()) throw ShapeError("lemma_check: perturbation width must equal dim");
    const Matrix v_hat = v + delta.transpose();
    const Eigen::VectorXd moved = gradient_for_upstream(params, tape, input, v_hat, scope);
    LemmaTrial trial;
    trial.epsilon = (v_hat - v).squaredNorm();
    trial.deviation = (moved - base).squaredNorm();
    trial.bound = report.jacobian_bound * trial.epsilon;
    trial.satisfied = trial.deviation <= trial.bound;
    report.trials.push_back(trial);
  }
  return report;
}

}  // namespace

ProbeSet make_probe(std::size_t n_items, std::size_t size, std::uint64_t seed) {
  std::vector<ItemIndex> all(n_items);
  std::iota(all.begin(), all.end(), 0u);
  Rng rng(mix_seed(seed, 0x970be));
  const auto take = std::min(size, n_items);
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < take; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.uniform_index(n_items - i));
    std::swap(all[i], all[j]);
  }
  all.resize(take);
  return {std::move(all)};
}

Matrix snapshot_probe(const ModelParams& params, const ProbeSet& probe) {
  return item_forward(params, probe.items).first;
}

double feature_drift(const Matrix& snapshot, const Matrix& previous) {
  if (snapshot.rows() != previous.rows() || snapshot.cols() != previous.cols()) {
    throw ShapeError("feature_drift: snapshot shapes differ");
  }
  double total = 0.0;
  for (Eigen::Index r = 0; r < snapshot.rows(); ++r) total += (snapshot.row(r) - previous.row(r)).norm();
  return total;
}

DriftResult drift_experiment(const TrainConfig& train_config, const SplitDataset& dataset,
                             const DriftConfig& drift_config) {
  if (drift_config.deltas.empty()) throw ConfigError("drift experiment needs at least one delta");
  auto config = train_config;
  config.lr_step_decay = true;
  const auto probe = make_probe(dataset.n_items(), drift_config.probe_size, drift_config.probe_seed);
  const auto max_delta = *std::max_element(drift_config.deltas.begin(), drift_config.deltas.end());

  // history.front() is the snapshot at the current iteration.
  std::deque<Matrix> history;
  DriftResult result;
  auto& records = result.records;
  TrainHooks hooks;
  hooks.on_step = [&](const StepInfo& info, const ModelParams& params) {
    history.push_front(snapshot_probe(params, probe));
    if (history.size() > max_delta + 1) history.pop_back();
    for (const auto delta : drift_config.deltas) {
      if (delta < history.size()) {
        records.push_back({info.iteration, delta, feature_drift(history.front(), history[delta])});
      }
    }
    if (info.iteration == config.max_iterations) result.final_params = params;
  };
  auto trained = train(config, dataset, hooks);
  if (result.final_params.item_embed.size() == 0) result.final_params = std::move(trained.best_params);
  return result;
}

Matrix user_jacobian(const ModelParams& params, const LemmaInput& input, std::span<const UserParam> scope) {
  if (scope.empty()) scope = kAllUserParams;
  const auto [u, tape] = encode_user(params, input);
  const auto d = static_cast<Eigen::Index>(params.dim());
  Matrix jacobian;
  for (Eigen::Index k = 0; k < d; ++k) {
    Matrix unit = Matrix::Zero(1, d);
    unit(0, k) = 1.0;
    const Eigen::VectorXd row = gradient_for_upstream(params, tape, input, unit, scope);
    if (k == 0) jacobian.resize(d, row.size());
    jacobian.row(k) = row.transpose();
  }
  return jacobian;
}

Eigen::VectorXd logit_gradient(const ModelParams& params, const LemmaInput& input,
                               std::span<const double> item_vector, std::span<const UserParam> scope) {
  if (scope.empty()) scope = kAllUserParams;
  if (item_vector.size() != params.dim()) throw ShapeError("logit_gradient: item vector width must equal dim");
  const auto [u, tape] = encode_user(params, input);
  const Matrix upstream = MatrixMap(item_vector.data(), 1, static_cast<Eigen::Index>(item_vector.size()));
  return gradient_for_upstream(params, tape, input, upstream, scope);
}

bool LemmaCheckReport::all_satisfied() const {
  return std::all_of(trials.begin(), trials.end(), [](const LemmaTrial& t) { return t.satisfied; });
}

LemmaCheckReport lemma_check(const ModelParams& params, const LemmaInput& input, double perturbation_scale,
                             std::size_t n_trials, Rng& rng, std::span<const UserParam> scope) {
  if (!(perturbation_scale > 0.0)) throw ConfigError("perturbation_scale must be positive");
  std::vector<Eigen::VectorXd> perturbations;
  perturbations.reserve(n_trials);
  const auto d = static_cast<Eigen::Index>(params.dim());
  for (std::size_t t = 0; t < n_trials; ++t) {
    Eigen::VectorXd delta(d);
    for (Eigen::Index j = 0; j < d; ++j) delta(j) = perturbation_scale * rng.normal();
    perturbations.push_back(std::move(delta));
  }
  return run_check(params, input, perturbations, scope);
}

LemmaCheckReport lemma_check_directions(const ModelParams& params, const LemmaInput& input,
                                        const std::vector<Eigen::VectorXd>& perturbations,
                                        std::span<const UserParam> scope) {
  return run_check(params, input, perturbations, scope);
}

}  // namespace twotower
