#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "twotower/common.hpp"

namespace twotower {

struct Interaction {
  std::string user_id;
  std::string item_id;
  std::int64_t timestamp = 0;

  bool operator==(const Interaction&) const = default;
};

/// Reads a `user \t item \t timestamp` file. Blank lines are skipped.
std::vector<Interaction> load_interactions(const std::filesystem::path& path);
void save_interactions(const std::filesystem::path& path, std::span<const Interaction> rows);

/// Bijection between string tokens and dense indices, in insertion order.
class Vocab {
 public:
  std::uint32_t add(const std::string& token);
  std::optional<std::uint32_t> find(const std::string& token) const;
  std::uint32_t index_of(const std::string& token) const;
  const std::string& token(std::uint32_t index) const { return tokens_.at(index); }
  std::size_t size() const { return tokens_.size(); }

 private:
  std::unordered_map<std::string, std::uint32_t> index_;
  std::vector<std::string> tokens_;
};

/// Empirical item distribution over the training split.
class UnigramTable {
 public:
  UnigramTable() = default;
  explicit UnigramTable(std::vector<double> probs);

  double prob(ItemIndex item) const { return probs_.at(item); }
  const std::vector<double>& probs() const { return probs_; }
  std::size_t size() const { return probs_.size(); }

 private:
  std::vector<double> probs_;
};

/// count(i)/total over `train_items`; unseen items get 1/(10*total) before the
/// table is renormalized.
UnigramTable unigram_probs(std::span<const ItemIndex> train_items, std::size_t n_items);

struct UserSequence {
  UserIndex user = 0;
  std::vector<ItemIndex> items;         // sorted by timestamp (stable)
  std::vector<std::int64_t> timestamps;
};

struct EvalUser {
  UserIndex user = 0;
  std::vector<ItemIndex> fold_in;  // earliest interactions, temporal order
  std::vector<ItemIndex> targets;  // latest interactions
};

/// One training example: the interaction at `position` of a train user's sequence.
struct TrainPair {
  std::uint32_t sequence = 0;  // index into SplitDataset::train_sequences
  std::uint32_t position = 0;
};

enum class Split { train, validation, test };
const char* split_name(Split split);

struct SplitConfig {
  double train_ratio = 0.8;
  double validation_ratio = 0.1;
  double fold_in_fraction = 0.8;
  std::size_t min_interactions = 5;
  std::uint64_t seed = 0;
};

struct SplitDataset {
  Vocab users;
  Vocab items;
  std::vector<UserIndex> train_users;
  std::vector<UserIndex> validation_users;
  std::vector<UserIndex> test_users;
  std::vector<UserSequence> train_sequences;
  std::vector<TrainPair> train_pairs;
  std::vector<EvalUser> validation;
  std::vector<EvalUser> test;
  UnigramTable unigram;

  std::size_t n_items() const { return items.size(); }
  std::size_t n_users() const { return users.size(); }
  const std::vector<EvalUser>& eval_users(Split split) const;
};

SplitDataset build_splits(std::span<const Interaction> interactions, const SplitConfig& config);

/// `split \t user_id` lines, train then validation then test.
void save_split_manifest(const std::filesystem::path& path, const SplitDataset& dataset);

struct Batch {
  std::vector<UserIndex> users;
  std::vector<std::vector<ItemIndex>> histories;
  std::vector<ItemIndex> positives;
  bool unique = true;  // no positive item repeats within the batch

  std::size_t size() const { return positives.size(); }
};

/// Items of `sequence` strictly earlier than `position`'s timestamp, at most
/// `max_history` of the most recent ones.
std::vector<ItemIndex> history_before(const UserSequence& sequence, std::size_t position,
                                      std::size_t max_history);

/// Mini-batches over the training pairs; each epoch is a fresh shuffle keyed
/// by (seed, epoch) and visits every pair exactly once.
class BatchIterator {
 public:
  BatchIterator(const SplitDataset& dataset, std::size_t batch_size, std::uint64_t seed,
                std::size_t max_history = 20);

  /// Next batch of the current epoch, or nullopt when the epoch is exhausted.
  std::optional<Batch> next_in_epoch();
  /// Next batch, rolling over into the following epoch when needed.
  Batch next();

  void start_epoch(std::uint64_t epoch);
  std::uint64_t epoch() const { return epoch_; }

 private:
  const SplitDataset* dataset_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::size_t max_history_;
  std::uint64_t epoch_ = 0;
  std::vector<std::uint32_t> order_;
  std::size_t cursor_ = 0;
};

std::vector<Batch> make_batches(const SplitDataset& dataset, std::size_t batch_size,
                                std::uint64_t shuffle_seed, std::uint64_t epoch,
                                std::size_t max_history = 20);

struct SynthConfig {
  std::size_t n_users = 1000;
  std::size_t n_items = 2000;
  std::size_t n_clusters = 10;
  std::size_t interactions_per_user = 30;
  double home_fraction = 0.8;
  // Zipf exponent of item popularity within a cluster (0 = uniform).
  double popularity_exponent = 0.5;
  std::uint64_t seed = 1;
};

/// Cluster-structured interactions: each user draws `home_fraction` of its
/// interactions from its home cluster and the rest uniformly from other items.
std::vector<Interaction> synth_generate(const SynthConfig& config);

/// Home cluster of a synthetic user / item, by index.
std::size_t synth_user_cluster(std::size_t user, std::size_t n_clusters);
std::size_t synth_item_cluster(std::size_t item, std::size_t n_items, std::size_t n_clusters);

}  // namespace twotower
