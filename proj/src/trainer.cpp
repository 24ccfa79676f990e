#include "twotower/trainer.hpp"

#include <chrono>
#include <cmath>
#include <mutex>
#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "twotower/loss.hpp"

namespace twotower {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

template <typename T>
void check_finite(const T& m, const char* name) {
  if (!m.allFinite()) throw NumericError(std::string("non-finite gradient in ") + name);
}

struct AdamCoefficients {
  double beta1, beta2, eps, lr, correction1, correction2;
};

template <typename T>
void adam_dense(T& param, const T& grad, T& m, T& v, const AdamCoefficients& c) {
  m = c.beta1 * m + (1.0 - c.beta1) * grad;
  v = c.beta2 * v + (1.0 - c.beta2) * grad.cwiseProduct(grad);
  param.array() -= c.lr * (m.array() / c.correction1) / ((v.array() / c.correction2).sqrt() + c.eps);
}

void adam_sparse(Matrix& param, const SparseRows& grad, Matrix& m, Matrix& v, const AdamCoefficients& c,
                 const char* name) {
  const auto cols = grad.cols();
  for (std::size_t slot = 0; slot < grad.touched().size(); ++slot) {
    const auto row = static_cast<Eigen::Index>(grad.touched()[slot]);
    const auto g = grad.values(slot);
    for (std::size_t j = 0; j < cols; ++j) {
      if (!std::isfinite(g[j])) throw NumericError(std::string("non-finite gradient in ") + name);
    }
    for (std::size_t j = 0; j < cols; ++j) {
      const auto col = static_cast<Eigen::Index>(j);
      double& mj = m(row, col);
      double& vj = v(row, col);
      mj = c.beta1 * mj + (1.0 - c.beta1) * g[j];
      vj = c.beta2 * vj + (1.0 - c.beta2) * g[j] * g[j];
      param(row, col) -= c.lr * (mj / c.correction1) / (std::sqrt(vj / c.correction2) + c.eps);
    }
  }
}

void adam_mlp(Mlp& p, const Mlp& g, Mlp& m, Mlp& v, const AdamCoefficients& c, const char* tower) {
  const std::string prefix(tower);
  check_finite(g.w1, (prefix + ".w1").c_str());
  check_finite(g.b1, (prefix + ".b1").c_str());
  check_finite(g.w2, (prefix + ".w2").c_str());
  check_finite(g.b2, (prefix + ".b2").c_str());
  adam_dense(p.w1, g.w1, m.w1, v.w1, c);
  adam_dense(p.b1, g.b1, m.b1, v.b1, c);
  adam_dense(p.w2, g.w2, m.w2, v.w2, c);
  adam_dense(p.b2, g.b2, m.b2, v.b2, c);
}

ModelParams zeros_like(const ModelParams& p) {
  ModelParams z;
  z.item_embed = Matrix::Zero(p.item_embed.rows(), p.item_embed.cols());
  z.user_embed = Matrix::Zero(p.user_embed.rows(), p.user_embed.cols());
  z.empty_history = RowVector::Zero(p.empty_history.size());
  z.user_mlp = Mlp::zeros(p.dim(), p.hidden());
  z.item_mlp = Mlp::zeros(p.dim(), p.hidden());
  return z;
}

}  // namespace

AdamState AdamState::zeros_like(const ModelParams& params, AdamConfig config) {
  return {config, 0, twotower::zeros_like(params), twotower::zeros_like(params)};
}

void adam_step(ModelParams& params, const Gradients& grads, AdamState& state, double lr) {
  check_finite(grads.empty_history, "empty_history");
  ++state.step;
  const auto t = static_cast<double>(state.step);
  const AdamCoefficients c{state.config.beta1, state.config.beta2, state.config.eps, lr,
                           1.0 - std::pow(state.config.beta1, t), 1.0 - std::pow(state.config.beta2, t)};
  adam_sparse(params.item_embed, grads.item_embed, state.first.item_embed, state.second.item_embed, c, "item_embed");
  adam_sparse(params.user_embed, grads.user_embed, state.first.user_embed, state.second.user_embed, c, "user_embed");
  adam_dense(params.empty_history, grads.empty_history, state.first.empty_history, state.second.empty_history, c);
  adam_mlp(params.user_mlp, grads.user_mlp, state.first.user_mlp, state.second.user_mlp, c, "user_mlp");
  adam_mlp(params.item_mlp, grads.item_mlp, state.first.item_mlp, state.second.item_mlp, c, "item_mlp");
}

std::size_t TrainConfig::resolved_warmup() const {
  if (strategy.warmup_iterations >= 0) return static_cast<std::size_t>(strategy.warmup_iterations);
  return max_iterations / 10;
}

EvalRecord make_record(std::size_t iteration, double wall_seconds, const EvalResult& result) {
  return {iteration, wall_seconds, result.recall_at(20), result.ndcg_at(20), result.recall_at(50), result.ndcg_at(50)};
}

TimingSummary timing_summary(const RunReport& report) {
  TimingSummary s;
  if (report.iterations > 0) {
    s.avg_seconds_per_1k = report.step_seconds / (static_cast<double>(report.iterations) / 1000.0);
  }
  const EvalRecord* best = nullptr;
  for (const auto& r : report.records) {
    if (r.iteration == report.best_iteration) best = &r;
  }
  if (best == nullptr) {
    s.convergence_defined = false;
    s.convergence_minutes = report.total_wall_seconds / 60.0;
  } else {
    s.convergence_minutes = best->wall_seconds / 60.0;
  }
  return s;
}

StepOutput compute_step(const ModelParams& params, const Batch& batch, const StepContext& context) {
  if (context.unigram == nullptr) throw std::invalid_argument("compute_step: unigram table required");
  const auto& unigram = *context.unigram;
  const auto kind = context.kind;

  auto [user_vectors, user_tape] = user_forward(params, batch.histories, batch.users);
  auto [positive_vectors, positive_tape] = item_forward(params, batch.positives);

  // Uniform sampling corrects every entry, the positive included, by the same 1/N.
  std::vector<double> positive_probs(batch.size());
  const double uniform_q = 1.0 / static_cast<double>(params.n_items());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    positive_probs[i] = kind == StrategyKind::uniform ? uniform_q : unigram.prob(batch.positives[i]);
  }

  static const ItemDraw kNoDraw;
  const ItemDraw& draw = context.global != nullptr ? *context.global : kNoDraw;
  GlobalNegatives global;
  NegativeSet negatives;
  switch (kind) {
    case StrategyKind::uniform:
      global = encode_global(params, draw);
      negatives = uniform_negatives(global);
      break;
    case StrategyKind::in_batch:
      negatives = gather_in_batch(batch.positives, positive_vectors, unigram);
      break;
    case StrategyKind::mns:
      global = encode_global(params, draw);
      negatives = sample_mns(batch.positives, positive_vectors, unigram, global);
      break;
    case StrategyKind::cbns:
      negatives = context.bank != nullptr ? cbns_collect(*context.bank, batch.positives, positive_vectors, unigram)
                                          : gather_in_batch(batch.positives, positive_vectors, unigram);
      break;
  }

  const auto loss = sampled_softmax_ce(user_vectors, positive_vectors, batch.positives, positive_probs, negatives);

  StepOutput out;
  out.grads = Gradients::zeros_like(params);
  user_backward(params, user_tape, loss.grad_u, out.grads);
  Matrix grad_positive = loss.grad_positive;
  for (std::size_t b = 0; b < negatives.blocks.size(); ++b) {
    const auto& block = negatives.blocks[b];
    if (block.source == NegativeSource::in_batch) {
      grad_positive += loss.grad_blocks[b];
    } else if (block.source == NegativeSource::global) {
      item_backward(params, global.tape, loss.grad_blocks[b], out.grads);
    }
  }
  item_backward(params, positive_tape, grad_positive, out.grads);
  out.penalty = add_l2_penalty(params, context.l2, out.grads);
  out.loss = loss.loss + out.penalty;
  out.in_batch_negatives = negatives.count(NegativeSource::in_batch);
  out.bank_negatives = negatives.count(NegativeSource::bank);
  out.global_negatives = negatives.count(NegativeSource::global);
  out.positive_vectors = std::move(positive_vectors);
  return out;
}

namespace {

// The per-step logit and gradient buffers are a few MB each. glibc hands
// blocks that size out via mmap and unmaps them on free, so every step paid
// for fresh page faults. Keep them on the heap instead.
void keep_large_blocks_on_heap() {
#if defined(__GLIBC__)
  static std::once_flag once;
  std::call_once(once, [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
  });
#endif
}

}  // namespace

TrainResult train(const TrainConfig& config, const SplitDataset& dataset, const TrainHooks& hooks) {
  keep_large_blocks_on_heap();
  validate(config.strategy, config.batch_size);
  if (config.max_iterations == 0) throw ConfigError("max_iterations must be positive");
  if (config.lr < 0.0) throw ConfigError("lr must be non-negative");

  const auto kind = config.strategy.kind;
  const auto n_items = dataset.n_items();
  const auto warmup = kind == StrategyKind::cbns ? config.resolved_warmup() : 0;
  const auto n_global = resolved_n_global(config.strategy);
  static constexpr std::size_t kKs[] = {20, 50};

  ModelParams params = init_params(n_items, dataset.n_users(),
                                   {config.dim, config.hidden, config.user_embedding}, config.seed);
  AdamState adam = AdamState::zeros_like(params);
  BatchIterator batches(dataset, config.batch_size, mix_seed(config.seed, 0xba7c), config.max_history);
  Rng negative_rng(mix_seed(config.seed, 0x9106a1));
  MemoryBank bank(kind == StrategyKind::cbns ? config.strategy.bank_capacity : 0, config.dim);

  TrainResult result;
  auto& report = result.report;
  report.strategy = strategy_name(kind);
  report.warmup_iterations = warmup;
  report.losses.reserve(config.max_iterations);
  result.best_params = params;

  const auto run_start = Clock::now();
  std::size_t evals_since_best = 0;
  bool have_best = false;
  std::size_t last_eval = 0;

  const auto run_eval = [&](std::size_t iteration) {
    const auto ev = evaluate(params, dataset, Split::validation, kKs, config.max_history);
    report.records.push_back(make_record(iteration, seconds_since(run_start), ev));
    last_eval = iteration;
    const double r50 = report.records.back().recall50;
    if (!have_best || r50 > report.best_recall50) {
      have_best = true;
      report.best_recall50 = r50;
      report.best_iteration = iteration;
      result.best_params = params;
      evals_since_best = 0;
    } else {
      ++evals_since_best;
    }
  };

  for (std::size_t it = 1; it <= config.max_iterations; ++it) {
    const auto step_start = Clock::now();
    const Batch batch = batches.next();

    ItemDraw draw;
    if (kind == StrategyKind::uniform || kind == StrategyKind::mns) {
      draw = sample_uniform(n_global, n_items, negative_rng);
    }
    StepContext context;
    context.kind = kind;
    context.unigram = &dataset.unigram;
    context.global = &draw;
    context.bank = kind == StrategyKind::cbns && it > warmup ? &bank : nullptr;
    context.l2 = config.l2;
    auto step = compute_step(params, batch, context);

    const bool decayed = config.lr_step_decay && it > config.max_iterations / 2;
    adam_step(params, step.grads, adam, decayed ? config.lr * 0.1 : config.lr);

    if (kind == StrategyKind::cbns && it > warmup) {
      bank.enqueue(batch.positives, step.positive_vectors, dataset.unigram);
    }
    report.step_seconds += seconds_since(step_start);
    report.iterations = it;
    report.losses.push_back(step.loss);

    if (hooks.on_step) {
      StepInfo info;
      info.iteration = it;
      info.loss = step.loss;
      info.in_batch_negatives = step.in_batch_negatives;
      info.bank_negatives = step.bank_negatives;
      info.global_negatives = step.global_negatives;
      info.bank_size = bank.size();
      hooks.on_step(info, params);
    }

    if (config.eval_every > 0 && it % config.eval_every == 0) {
      run_eval(it);
      if (evals_since_best >= config.patience) {
        report.stop_reason = "early_stop";
        break;
      }
    }
    if (config.time_budget_seconds > 0 && seconds_since(run_start) > config.time_budget_seconds) {
      report.stop_reason = "time_budget";
      break;
    }
  }
  if (report.stop_reason.empty()) report.stop_reason = "max_iterations";
  if (config.eval_every > 0 && last_eval != report.iterations) run_eval(report.iterations);
  if (!have_best) {
    result.best_params = params;
    report.best_iteration = report.iterations;
  }
  report.total_wall_seconds = seconds_since(run_start);
  if (hooks.on_finish) hooks.on_finish(bank);

  if (config.evaluate_test && !dataset.test.empty()) {
    const auto ev = evaluate(result.best_params, dataset, Split::test, kKs, config.max_history);
    report.test = make_record(report.best_iteration, report.step_seconds, ev);
  }
  if (!config.run_dir.empty()) {
    std::filesystem::create_directories(config.run_dir);
    save_checkpoint(config.run_dir / "best.ckpt", result.best_params);
  }
  return result;
}

}  // namespace twotower
