#include "twotower/loss.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace twotower {

double corrected_logit(std::span<const double> u, std::span<const double> v, double q) {
  if (!(q > 0.0)) throw std::domain_error("corrected_logit: sampling probability must be positive");
  return score(u, v) - std::log(q);
}

LogitBlock build_logits(const Matrix& user_embeddings, const Matrix& positive_embeddings,
                        std::span<const ItemIndex> positives, std::span<const double> positive_probs,
                        const NegativeSet& negatives) {
  const auto batch = static_cast<std::size_t>(user_embeddings.rows());
  const auto dim = static_cast<std::size_t>(user_embeddings.cols());
  if (positive_embeddings.rows() != user_embeddings.rows() || positive_embeddings.cols() != user_embeddings.cols() ||
      positives.size() != batch || positive_probs.size() != batch) {
    throw ShapeError("build_logits: batch shapes disagree");
  }

  LogitBlock block;
  const auto n_neg = negatives.size();
  const auto cols = n_neg + 1;
  block.logits.resize(static_cast<Eigen::Index>(batch), static_cast<Eigen::Index>(cols));
  block.mask.assign(batch * cols, 0);
  block.sources.reserve(n_neg);

  for (std::size_t i = 0; i < batch; ++i) {
    if (!(positive_probs[i] > 0.0)) throw std::domain_error("positive sampling probability must be positive");
    block.logits(static_cast<Eigen::Index>(i), 0) =
        user_embeddings.row(static_cast<Eigen::Index>(i)).dot(positive_embeddings.row(static_cast<Eigen::Index>(i))) -
        std::log(positive_probs[i]);
  }

  // (item, row) pairs sorted by item, for identity masking.
  std::vector<std::pair<ItemIndex, std::uint32_t>> owners(batch);
  for (std::size_t i = 0; i < batch; ++i) owners[i] = {positives[i], static_cast<std::uint32_t>(i)};
  std::sort(owners.begin(), owners.end());

  std::size_t offset = 1;
  for (const auto& neg : negatives.blocks) {
    const auto k = neg.size();
    if (neg.probs.size() != k || neg.embeddings.size() != k * dim) {
      throw ShapeError("build_logits: negative block is inconsistent");
    }
    Eigen::RowVectorXd log_q(static_cast<Eigen::Index>(k));
    for (std::size_t j = 0; j < k; ++j) {
      const double q = neg.probs[j];
      if (!(q > 0.0 && q <= 1.0)) throw std::domain_error("negative sampling probability outside (0, 1]");
      log_q[static_cast<Eigen::Index>(j)] = std::log(q);
    }
    auto cols_view = block.logits.middleCols(static_cast<Eigen::Index>(offset), static_cast<Eigen::Index>(k));
    cols_view.noalias() = user_embeddings * neg.matrix(dim).transpose();
    cols_view.rowwise() -= log_q;
    for (std::size_t j = 0; j < k; ++j) {
      const auto item = neg.items[j];
      auto it = std::lower_bound(owners.begin(), owners.end(), std::pair<ItemIndex, std::uint32_t>{item, 0});
      for (; it != owners.end() && it->first == item; ++it) {
        block.mask[it->second * cols + offset + j] = 1;
      }
    }
    block.sources.insert(block.sources.end(), k, neg.source);
    offset += k;
  }
  return block;
}

SoftmaxResult softmax_cross_entropy(const LogitBlock& block) {
  const auto rows = block.rows();
  const auto cols = block.cols();
  if (rows == 0) throw ShapeError("softmax_cross_entropy: empty batch");
  SoftmaxResult result;
  result.positive_log_prob.resize(rows);
  result.grad_logits.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  const double scale = 1.0 / static_cast<double>(rows);

  double total = 0.0;
  std::vector<std::size_t> masked;
  for (std::size_t i = 0; i < rows; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const auto logit = block.logits.row(r);
    const std::uint8_t* mask = block.mask.data() + i * cols;
    masked.clear();
    for (const std::uint8_t* m = std::find(mask, mask + cols, 1); m != mask + cols; m = std::find(m + 1, mask + cols, 1)) {
      masked.push_back(static_cast<std::size_t>(m - mask));
    }
    if (masked.size() + 1 >= cols) {
      throw DegenerateBatchError("degenerate batch: row " + std::to_string(i) + " has no unmasked negatives", i);
    }
    double peak = logit.maxCoeff();
    // a masked column holding the maximum would shift the live ones too far down
    for (const auto j : masked) {
      if (logit[static_cast<Eigen::Index>(j)] == peak) {
        peak = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < cols; ++c) {
          if (!mask[c]) peak = std::max(peak, logit[static_cast<Eigen::Index>(c)]);
        }
        break;
      }
    }
    auto grad = result.grad_logits.row(r);
    grad = (logit.array() - peak).exp();
    for (const auto j : masked) grad[static_cast<Eigen::Index>(j)] = 0.0;
    const double z = grad.sum();
    if (!std::isfinite(peak) || !std::isfinite(z)) {
      for (std::size_t j = 0; j < cols; ++j) {
        if (!std::isfinite(logit[static_cast<Eigen::Index>(j)])) {
          throw NumericError("non-finite logit at row " + std::to_string(i) + ", column " + std::to_string(j));
        }
      }
      throw NumericError("softmax normalizer overflowed at row " + std::to_string(i));
    }
    const double log_p = logit[0] - peak - std::log(z);
    result.positive_log_prob[i] = log_p;
    total -= log_p;
    grad *= scale / z;
    grad[0] -= scale;
  }
  result.loss = total * scale;
  return result;
}

LossOutput sampled_softmax_ce(const Matrix& user_embeddings, const Matrix& positive_embeddings,
                              std::span<const ItemIndex> positives,
                              std::span<const double> positive_probs, const NegativeSet& negatives) {
  const auto block = build_logits(user_embeddings, positive_embeddings, positives, positive_probs, negatives);
  auto soft = softmax_cross_entropy(block);
  const auto dim = static_cast<std::size_t>(user_embeddings.cols());

  LossOutput out;
  out.loss = soft.loss;
  out.positive_log_prob = std::move(soft.positive_log_prob);
  const auto& g = soft.grad_logits;
  const Eigen::VectorXd g_pos = g.col(0);
  out.grad_u = positive_embeddings.array().colwise() * g_pos.array();
  out.grad_positive = user_embeddings.array().colwise() * g_pos.array();

  std::size_t offset = 1;
  out.grad_blocks.reserve(negatives.blocks.size());
  for (const auto& neg : negatives.blocks) {
    const auto k = static_cast<Eigen::Index>(neg.size());
    const auto g_block = g.middleCols(static_cast<Eigen::Index>(offset), k);
    const auto e = neg.matrix(dim);
    out.grad_u.noalias() += g_block * e;
    if (neg.live) {
      out.grad_blocks.emplace_back(g_block.transpose() * user_embeddings);
    } else {
      out.grad_blocks.emplace_back();
    }
    offset += static_cast<std::size_t>(k);
  }
  return out;
}

LossOutput sampled_softmax_ce(const Matrix& user_embeddings, const Matrix& positive_embeddings,
                              std::span<const ItemIndex> positives, const NegativeSet& negatives,
                              const UnigramTable& unigram) {
  std::vector<double> probs(positives.size());
  for (std::size_t i = 0; i < positives.size(); ++i) probs[i] = unigram.prob(positives[i]);
  return sampled_softmax_ce(user_embeddings, positive_embeddings, positives, probs, negatives);
}

double full_softmax_oracle(const Matrix& user_embeddings, const Matrix& item_embeddings,
                           std::span<const ItemIndex> positives) {
  const auto rows = static_cast<std::size_t>(user_embeddings.rows());
  const auto n_items = static_cast<std::size_t>(item_embeddings.rows());
  const auto dim = static_cast<std::size_t>(user_embeddings.cols());
  if (positives.size() != rows || static_cast<std::size_t>(item_embeddings.cols()) != dim) {
    throw ShapeError("full_softmax_oracle: shape mismatch");
  }
  double total = 0.0;
  std::vector<double> scores(n_items);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < n_items; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < dim; ++k) s += user_embeddings(i, k) * item_embeddings(j, k);
      scores[j] = s;
    }
    const double peak = *std::max_element(scores.begin(), scores.end());
    double z = 0.0;
    for (const double s : scores) z += std::exp(s - peak);
    total += (peak + std::log(z)) - scores.at(positives[i]);
  }
  return total / static_cast<double>(rows);
}

}  // namespace twotower
