#pragma once

#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "twotower/common.hpp"
#include "twotower/data.hpp"
#include "twotower/towers.hpp"

namespace twotower {

enum class StrategyKind { uniform, in_batch, mns, cbns };

const char* strategy_name(StrategyKind kind);
StrategyKind parse_strategy(const std::string& name);

struct StrategyConfig {
  StrategyKind kind = StrategyKind::cbns;
  // Global draws per step; negative selects the kind default
  // (uniform: 1280, mns: 1024 on top of the in-batch pool).
  std::int64_t n_global = -1;
  std::size_t bank_capacity = 2432;  // 0 turns CBNS into plain in-batch sampling
  // Negative means "10% of max_iterations", resolved by the trainer.
  std::int64_t warmup_iterations = -1;
};

/// Rejects field combinations that cannot run with the given batch size.
void validate(const StrategyConfig& config, std::size_t batch_size);
std::size_t resolved_n_global(const StrategyConfig& config);

enum class NegativeSource { in_batch, bank, global };
const char* source_name(NegativeSource source);

/// A contiguous block of candidate negatives sharing one source.
///
/// `embeddings` views row-major storage owned elsewhere (the batch's item
/// tower output, a fresh global forward, or the memory bank ring). Only
/// `live` blocks receive gradients.
struct NegativeBlock {
  NegativeSource source = NegativeSource::in_batch;
  std::vector<ItemIndex> items;
  std::vector<double> probs;
  std::span<const double> embeddings;
  bool live = false;

  std::size_t size() const { return items.size(); }
  MatrixMap matrix(std::size_t dim) const {
    return MatrixMap(embeddings.data(), static_cast<Eigen::Index>(items.size()),
                     static_cast<Eigen::Index>(dim));
  }
};

struct NegativeSet {
  std::vector<NegativeBlock> blocks;

  std::size_t size() const;
  std::size_t count(NegativeSource source) const;
};

struct ItemDraw {
  std::vector<ItemIndex> items;
  std::vector<double> probs;
};

/// n i.i.d. uniform draws with replacement; every prob is 1/vocab_size.
ItemDraw sample_uniform(std::size_t n, std::size_t vocab_size, Rng& rng);

/// The batch positives as a live block with unigram probabilities.
/// `positive_embeddings` must outlive the returned set.
NegativeSet gather_in_batch(std::span<const ItemIndex> positives, const Matrix& positive_embeddings,
                            const UnigramTable& unigram);

/// Globally drawn negatives plus their fresh (gradient-carrying) encodings.
struct GlobalNegatives {
  ItemDraw draw;
  Matrix embeddings;
  ItemTape tape;
};

GlobalNegatives draw_global(const ModelParams& params, std::size_t n, Rng& rng);
/// Encodes an existing draw with the current item tower.
GlobalNegatives encode_global(const ModelParams& params, ItemDraw draw);

/// Uniform sampled softmax pool: the global draws only.
NegativeSet uniform_negatives(const GlobalNegatives& global);

/// In-batch pool plus the global draws (MNS). n = 0 reduces to gather_in_batch.
NegativeSet sample_mns(std::span<const ItemIndex> positives, const Matrix& positive_embeddings,
                       const UnigramTable& unigram, const GlobalNegatives& global);

/// Fixed-capacity FIFO of detached (item, embedding, q) entries.
class MemoryBank {
 public:
  MemoryBank(std::size_t capacity, std::size_t dim);

  /// Appends in batch order, evicting the oldest entries past capacity.
  /// Copies `embeddings`; nothing links back to the gradient graph.
  void enqueue(std::span<const ItemIndex> items, const Matrix& embeddings, const UnigramTable& unigram);

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return len_; }
  std::size_t dim() const { return dim_; }
  bool empty() const { return len_ == 0; }

  /// Entries in insertion order, oldest first.
  std::vector<ItemIndex> items_fifo() const;
  Matrix embeddings_fifo() const;
  std::vector<double> probs_fifo() const;

  /// The occupied ring slots as a block (storage order, not FIFO order).
  NegativeBlock as_block() const;

  /// One `item \t q \t norm` line per entry, oldest first.
  void dump(std::ostream& out) const;

 private:
  std::size_t slot(std::size_t fifo_position) const { return (head_ + fifo_position) % capacity_; }

  std::size_t capacity_;
  std::size_t dim_;
  std::size_t head_ = 0;  // oldest entry
  std::size_t len_ = 0;
  std::vector<ItemIndex> items_;
  std::vector<double> probs_;
  Matrix storage_;
};

/// Current bank entries (constants) plus the live in-batch pool.
NegativeSet cbns_collect(const MemoryBank& bank, std::span<const ItemIndex> positives,
                         const Matrix& positive_embeddings, const UnigramTable& unigram);

}  // namespace twotower
