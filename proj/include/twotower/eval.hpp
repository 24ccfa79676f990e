#pragma once

#include <optional>
#include <span>
#include <vector>

#include "twotower/common.hpp"
#include "twotower/data.hpp"
#include "twotower/towers.hpp"

namespace twotower {

/// The K highest-scoring items by u.v, skipping `exclude`. Ties go to the
/// smaller item index. Throws ConfigError when fewer than K candidates remain.
std::vector<ItemIndex> topk_retrieve(std::span<const double> u, const Matrix& item_matrix, std::size_t k,
                                     std::span<const ItemIndex> exclude);

/// |top-K ∩ relevant| / min(K, |relevant|); nullopt when `relevant` is empty.
std::optional<double> recall_at_k(std::span<const ItemIndex> retrieved, std::span<const ItemIndex> relevant,
                                  std::size_t k);

/// Binary-relevance NDCG with 1/log2(rank+1) discounts; nullopt when `relevant` is empty.
std::optional<double> ndcg_at_k(std::span<const ItemIndex> retrieved, std::span<const ItemIndex> relevant,
                                std::size_t k);

struct EvalResult {
  std::vector<std::size_t> ks;
  std::vector<UserIndex> users;             // evaluated users, in dataset order
  std::vector<std::vector<double>> recall;  // [k][user]
  std::vector<std::vector<double>> ndcg;
  std::vector<double> mean_recall;          // [k]
  std::vector<double> mean_ndcg;
  std::size_t n_skipped = 0;                // users without usable targets

  std::size_t n_evaluated() const { return users.size(); }
  double recall_at(std::size_t k) const;
  double ndcg_at(std::size_t k) const;
};

/// Worker count for evaluation: TWOTOWER_THREADS if set, else hardware concurrency.
std::size_t eval_threads();

/// Scores every item for every user. Relevant items are the distinct targets
/// outside the fold-in history, which is excluded from retrieval.
EvalResult evaluate_embeddings(const Matrix& user_vectors, const Matrix& item_matrix,
                               std::span<const EvalUser> users, std::span<const std::size_t> ks,
                               std::size_t threads = 1);

/// Encodes each user's fold-in history (most recent `max_history` items) and
/// evaluates retrieval against the held-out targets.
EvalResult evaluate(const ModelParams& params, const SplitDataset& dataset, Split split,
                    std::span<const std::size_t> ks = {}, std::size_t max_history = 20,
                    std::size_t threads = 0);

}  // namespace twotower
