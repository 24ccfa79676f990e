#pragma once

#include <span>
#include <vector>

#include "twotower/common.hpp"
#include "twotower/data.hpp"
#include "twotower/sampling.hpp"

namespace twotower {

/// u.v - ln q. Throws std::domain_error for q <= 0.
double corrected_logit(std::span<const double> u, std::span<const double> v, double q);

/// Corrected logits for a batch: column 0 is each row's positive, the rest are
/// the pooled negatives in block order. Masked entries are excluded from the
/// softmax.
struct LogitBlock {
  Matrix logits;
  std::vector<std::uint8_t> mask;  // row-major, 1 = excluded; column 0 never masked
  std::vector<NegativeSource> sources;  // per negative column

  std::size_t rows() const { return static_cast<std::size_t>(logits.rows()); }
  std::size_t cols() const { return static_cast<std::size_t>(logits.cols()); }
  bool masked(std::size_t r, std::size_t c) const { return mask[r * cols() + c] != 0; }
};

/// Builds the corrected logits. A negative whose item equals the row's
/// positive item is masked for that row.
LogitBlock build_logits(const Matrix& user_embeddings, const Matrix& positive_embeddings,
                        std::span<const ItemIndex> positives, std::span<const double> positive_probs,
                        const NegativeSet& negatives);

struct SoftmaxResult {
  double loss = 0.0;
  std::vector<double> positive_log_prob;
  Matrix grad_logits;  // d(loss)/d(logit), already scaled by 1/|B|; zero on masked entries
};

/// Mean cross-entropy of the positive column under a per-row masked softmax.
SoftmaxResult softmax_cross_entropy(const LogitBlock& block);

struct LossOutput {
  double loss = 0.0;
  std::vector<double> positive_log_prob;
  Matrix grad_u;
  Matrix grad_positive;
  // One entry per negative block; empty for blocks that are not live.
  std::vector<Matrix> grad_blocks;
};

/// Sampled softmax with logQ correction over [positive; negatives].
LossOutput sampled_softmax_ce(const Matrix& user_embeddings, const Matrix& positive_embeddings,
                              std::span<const ItemIndex> positives,
                              std::span<const double> positive_probs, const NegativeSet& negatives);

/// Same, with the positives' q looked up in the unigram table.
LossOutput sampled_softmax_ce(const Matrix& user_embeddings, const Matrix& positive_embeddings,
                              std::span<const ItemIndex> positives, const NegativeSet& negatives,
                              const UnigramTable& unigram);

/// Exact softmax cross-entropy over every item, no correction. Test oracle.
double full_softmax_oracle(const Matrix& user_embeddings, const Matrix& item_embeddings,
                           std::span<const ItemIndex> positives);

}  // namespace twotower
