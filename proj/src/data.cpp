#include "twotower/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace twotower {

namespace {

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    if (tab == std::string_view::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
  return fields;
}

bool is_blank(std::string_view line) {
  return std::all_of(line.begin(), line.end(),
                     [](char c) { return c == ' ' || c == '\t' || c == '\r'; });
}

void shuffle(std::vector<std::uint32_t>& values, Rng& rng) {
  for (std::size_t i = values.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_index(i));
    std::swap(values[i - 1], values[j]);
  }
}

}  // namespace

std::vector<Interaction> load_interactions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open interaction file: " + path.string());

  std::vector<Interaction> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (is_blank(line)) continue;
    std::string_view view(line);
    if (!view.empty() && view.back() == '\r') view.remove_suffix(1);
    const auto fields = split_tabs(view);
    if (fields.size() != 3 || fields[0].empty() || fields[1].empty()) {
      throw DataError("malformed interaction at line " + std::to_string(line_no) +
                      ": expected user<TAB>item<TAB>timestamp");
    }
    std::int64_t ts = 0;
    const auto* first = fields[2].data();
    const auto* last = first + fields[2].size();
    const auto [ptr, ec] = std::from_chars(first, last, ts);
    if (ec != std::errc{} || ptr != last) {
      throw DataError("malformed timestamp at line " + std::to_string(line_no));
    }
    rows.push_back({std::string(fields[0]), std::string(fields[1]), ts});
  }
  if (rows.empty()) throw DataError("empty dataset: " + path.string());
  return rows;
}

void save_interactions(const std::filesystem::path& path, std::span<const Interaction> rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& row : rows) {
    out << row.user_id << '\t' << row.item_id << '\t' << row.timestamp << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::uint32_t Vocab::add(const std::string& token) {
  const auto [it, inserted] = index_.try_emplace(token, static_cast<std::uint32_t>(tokens_.size()));
  if (inserted) tokens_.push_back(token);
  return it->second;
}

std::optional<std::uint32_t> Vocab::find(const std::string& token) const {
  const auto it = index_.find(token);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::uint32_t Vocab::index_of(const std::string& token) const {
  const auto found = find(token);
  if (!found) throw std::out_of_range("unknown token: " + token);
  return *found;
}

UnigramTable::UnigramTable(std::vector<double> probs) : probs_(std::move(probs)) {
  for (const double p : probs_) {
    if (!(p > 0.0 && p <= 1.0)) throw NumericError("unigram probability outside (0, 1]");
  }
}

UnigramTable unigram_probs(std::span<const ItemIndex> train_items, std::size_t n_items) {
  if (train_items.empty()) throw DataError("unigram table needs at least one training interaction");
  std::vector<std::uint64_t> counts(n_items, 0);
  for (const auto item : train_items) {
    if (item >= n_items) throw std::out_of_range("item index out of range in unigram counts");
    ++counts[item];
  }
  const auto total = static_cast<double>(train_items.size());
  const double floor = 1.0 / (10.0 * total);
  std::vector<double> probs(n_items);
  bool any_unseen = false;
  for (std::size_t i = 0; i < n_items; ++i) {
    any_unseen |= counts[i] == 0;
    probs[i] = counts[i] > 0 ? static_cast<double>(counts[i]) / total : floor;
  }
  if (any_unseen) {
    const double sum = std::accumulate(probs.begin(), probs.end(), 0.0);
    for (auto& p : probs) p /= sum;
  }
  return UnigramTable(std::move(probs));
}

const char* split_name(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "?";
}

const std::vector<EvalUser>& SplitDataset::eval_users(Split split) const {
  switch (split) {
    case Split::validation: return validation;
    case Split::test: return test;
    case Split::train: break;
  }
  throw ConfigError("training users have no held-out targets");
}

SplitDataset build_splits(std::span<const Interaction> interactions, const SplitConfig& config) {
  if (config.train_ratio <= 0.0 || config.validation_ratio < 0.0 ||
      config.train_ratio + config.validation_ratio >= 1.0) {
    throw ConfigError("split ratios must be positive and leave room for a test split");
  }
  if (!(config.fold_in_fraction > 0.0 && config.fold_in_fraction < 1.0)) {
    throw ConfigError("fold_in_fraction must lie in (0, 1)");
  }

  // Group by user in order of first appearance.
  Vocab raw_users;
  std::vector<std::vector<std::uint32_t>> rows_of_user;
  for (std::uint32_t r = 0; r < interactions.size(); ++r) {
    const auto u = raw_users.add(interactions[r].user_id);
    if (u == rows_of_user.size()) rows_of_user.emplace_back();
    rows_of_user[u].push_back(r);
  }

  SplitDataset ds;
  std::vector<std::vector<std::uint32_t>> eligible_rows;
  for (std::uint32_t u = 0; u < rows_of_user.size(); ++u) {
    auto& rows = rows_of_user[u];
    if (rows.size() < config.min_interactions) continue;
    std::stable_sort(rows.begin(), rows.end(), [&](std::uint32_t a, std::uint32_t b) {
      return interactions[a].timestamp < interactions[b].timestamp;
    });
    ds.users.add(raw_users.token(u));
    eligible_rows.push_back(std::move(rows));
  }
  if (ds.users.size() < 10) {
    throw DataError("insufficient data: " + std::to_string(ds.users.size()) +
                    " users with at least " + std::to_string(config.min_interactions) +
                    " interactions (need 10)");
  }

  // Item vocabulary in file order over retained users.
  std::vector<bool> retained(interactions.size(), false);
  for (const auto& rows : eligible_rows) {
    for (const auto r : rows) retained[r] = true;
  }
  for (std::size_t r = 0; r < interactions.size(); ++r) {
    if (retained[r]) ds.items.add(interactions[r].item_id);
  }

  const auto n = static_cast<std::uint32_t>(ds.users.size());
  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  Rng rng(mix_seed(config.seed, 0x5711));
  shuffle(order, rng);

  const auto n_train = static_cast<std::size_t>(std::llround(config.train_ratio * n));
  const auto n_val = static_cast<std::size_t>(std::llround(config.validation_ratio * n));
  if (n_train == 0 || n_val == 0 || n_train + n_val >= n) {
    throw DataError("insufficient data: split leaves an empty partition");
  }
  ds.train_users.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  ds.validation_users.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                             order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  ds.test_users.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
  for (auto* users : {&ds.train_users, &ds.validation_users, &ds.test_users}) {
    std::sort(users->begin(), users->end());
  }

  auto item_of = [&](std::uint32_t row) { return ds.items.index_of(interactions[row].item_id); };

  std::vector<ItemIndex> train_items;
  for (const auto u : ds.train_users) {
    UserSequence seq;
    seq.user = u;
    for (const auto r : eligible_rows[u]) {
      seq.items.push_back(item_of(r));
      seq.timestamps.push_back(interactions[r].timestamp);
    }
    const auto s = static_cast<std::uint32_t>(ds.train_sequences.size());
    for (std::uint32_t p = 0; p < seq.items.size(); ++p) ds.train_pairs.push_back({s, p});
    train_items.insert(train_items.end(), seq.items.begin(), seq.items.end());
    ds.train_sequences.push_back(std::move(seq));
  }

  auto make_eval = [&](UserIndex u) {
    const auto& rows = eligible_rows[u];
    const auto total = rows.size();
    auto n_fold = static_cast<std::size_t>(std::floor(config.fold_in_fraction * static_cast<double>(total) + 1e-9));
    n_fold = std::clamp<std::size_t>(n_fold, 1, total - 1);
    EvalUser eu;
    eu.user = u;
    for (std::size_t k = 0; k < total; ++k) {
      (k < n_fold ? eu.fold_in : eu.targets).push_back(item_of(rows[k]));
    }
    return eu;
  };
  for (const auto u : ds.validation_users) ds.validation.push_back(make_eval(u));
  for (const auto u : ds.test_users) ds.test.push_back(make_eval(u));

  ds.unigram = unigram_probs(train_items, ds.items.size());
  return ds;
}

void save_split_manifest(const std::filesystem::path& path, const SplitDataset& dataset) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const std::pair<const char*, const std::vector<UserIndex>*> parts[] = {
      {"train", &dataset.train_users},
      {"validation", &dataset.validation_users},
      {"test", &dataset.test_users}};
  for (const auto& [name, users] : parts) {
    for (const auto u : *users) out << name << '\t' << dataset.users.token(u) << '\n';
  }
}

std::vector<ItemIndex> history_before(const UserSequence& sequence, std::size_t position,
                                      std::size_t max_history) {
  const auto ts = sequence.timestamps.at(position);
  const auto end = static_cast<std::size_t>(
      std::lower_bound(sequence.timestamps.begin(), sequence.timestamps.end(), ts) -
      sequence.timestamps.begin());
  const auto begin = end > max_history ? end - max_history : 0;
  return {sequence.items.begin() + static_cast<std::ptrdiff_t>(begin),
          sequence.items.begin() + static_cast<std::ptrdiff_t>(end)};
}

BatchIterator::BatchIterator(const SplitDataset& dataset, std::size_t batch_size,
                             std::uint64_t seed, std::size_t max_history)
    : dataset_(&dataset), batch_size_(batch_size), seed_(seed), max_history_(max_history) {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (dataset.train_pairs.empty()) throw DataError("no training pairs");
  start_epoch(0);
}

void BatchIterator::start_epoch(std::uint64_t epoch) {
  epoch_ = epoch;
  order_.resize(dataset_->train_pairs.size());
  std::iota(order_.begin(), order_.end(), 0u);
  Rng rng(mix_seed(seed_, 0xba7c0000ULL + epoch));
  shuffle(order_, rng);
  cursor_ = 0;
}

std::optional<Batch> BatchIterator::next_in_epoch() {
  if (cursor_ >= order_.size()) return std::nullopt;
  const auto end = std::min(order_.size(), cursor_ + batch_size_);
  Batch batch;
  batch.users.reserve(end - cursor_);
  batch.histories.reserve(end - cursor_);
  batch.positives.reserve(end - cursor_);
  for (; cursor_ < end; ++cursor_) {
    const auto& pair = dataset_->train_pairs[order_[cursor_]];
    const auto& seq = dataset_->train_sequences[pair.sequence];
    batch.users.push_back(seq.user);
    batch.histories.push_back(history_before(seq, pair.position, max_history_));
    batch.positives.push_back(seq.items[pair.position]);
  }
  auto sorted = batch.positives;
  std::sort(sorted.begin(), sorted.end());
  batch.unique = std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end();
  return batch;
}

Batch BatchIterator::next() {
  auto batch = next_in_epoch();
  if (!batch) {
    start_epoch(epoch_ + 1);
    batch = next_in_epoch();
  }
  return std::move(*batch);
}

std::vector<Batch> make_batches(const SplitDataset& dataset, std::size_t batch_size,
                                std::uint64_t shuffle_seed, std::uint64_t epoch,
                                std::size_t max_history) {
  BatchIterator it(dataset, batch_size, shuffle_seed, max_history);
  it.start_epoch(epoch);
  std::vector<Batch> batches;
  while (auto batch = it.next_in_epoch()) batches.push_back(std::move(*batch));
  return batches;
}

std::size_t synth_user_cluster(std::size_t user, std::size_t n_clusters) {
  return user % n_clusters;
}

std::size_t synth_item_cluster(std::size_t item, std::size_t n_items, std::size_t n_clusters) {
  return item * n_clusters / n_items;
}

std::vector<Interaction> synth_generate(const SynthConfig& config) {
  const auto n_clusters = config.n_clusters;
  if (n_clusters == 0 || n_clusters > std::min(config.n_users, config.n_items)) {
    throw ConfigError("n_clusters must lie in [1, min(n_users, n_items)]");
  }
  if (n_clusters == 1 && config.home_fraction < 1.0) {
    throw ConfigError("a single cluster leaves no out-of-cluster items");
  }

  // Cluster c owns items [start[c], start[c+1]).
  std::vector<std::size_t> start(n_clusters + 1, config.n_items);
  for (std::size_t i = config.n_items; i-- > 0;) {
    start[synth_item_cluster(i, config.n_items, n_clusters)] = i;
  }
  std::vector<std::vector<double>> cumulative(n_clusters);
  for (std::size_t c = 0; c < n_clusters; ++c) {
    double acc = 0.0;
    for (std::size_t r = 0; r < start[c + 1] - start[c]; ++r) {
      acc += std::pow(static_cast<double>(r + 1), -config.popularity_exponent);
      cumulative[c].push_back(acc);
    }
  }

  Rng rng(mix_seed(config.seed, 0x5e17));
  std::vector<Interaction> rows;
  rows.reserve(config.n_users * config.interactions_per_user);
  for (std::size_t u = 0; u < config.n_users; ++u) {
    const auto home = synth_user_cluster(u, n_clusters);
    const auto home_size = start[home + 1] - start[home];
    const std::string user = "u" + std::to_string(u);
    for (std::size_t k = 0; k < config.interactions_per_user; ++k) {
      std::size_t item;
      if (rng.uniform01() < config.home_fraction) {
        const auto& cdf = cumulative[home];
        const double x = rng.uniform01() * cdf.back();
        const auto r = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), x) - cdf.begin());
        item = start[home] + std::min(r, home_size - 1);
      } else {
        item = static_cast<std::size_t>(rng.uniform_index(config.n_items - home_size));
        if (item >= start[home]) item += home_size;
      }
      rows.push_back({user, "i" + std::to_string(item), static_cast<std::int64_t>(k + 1)});
    }
  }
  return rows;
}

}  // namespace twotower
