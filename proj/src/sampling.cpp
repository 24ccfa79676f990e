#include "twotower/sampling.hpp"

#include <numeric>

namespace twotower {

const char* strategy_name(StrategyKind kind) {
  switch (kind) {
    case StrategyKind::uniform: return "uniform";
    case StrategyKind::in_batch: return "in_batch";
    case StrategyKind::mns: return "mns";
    case StrategyKind::cbns: return "cbns";
  }
  return "?";
}

StrategyKind parse_strategy(const std::string& name) {
  if (name == "uniform") return StrategyKind::uniform;
  if (name == "in_batch" || name == "in-batch" || name == "inbatch") return StrategyKind::in_batch;
  if (name == "mns") return StrategyKind::mns;
  if (name == "cbns") return StrategyKind::cbns;
  throw ConfigError("unknown strategy '" + name + "' (expected uniform, in_batch, mns or cbns)");
}

const char* source_name(NegativeSource source) {
  switch (source) {
    case NegativeSource::in_batch: return "in_batch";
    case NegativeSource::bank: return "bank";
    case NegativeSource::global: return "global";
  }
  return "?";
}

std::size_t resolved_n_global(const StrategyConfig& config) {
  if (config.n_global >= 0) return static_cast<std::size_t>(config.n_global);
  switch (config.kind) {
    case StrategyKind::uniform: return 1280;
    case StrategyKind::mns: return 1024;
    default: return 0;
  }
}

void validate(const StrategyConfig& config, std::size_t batch_size) {
  switch (config.kind) {
    case StrategyKind::uniform:
      if (resolved_n_global(config) == 0) throw ConfigError("uniform sampling needs n_global >= 1");
      break;
    case StrategyKind::cbns:
      if (config.bank_capacity != 0 && config.bank_capacity < batch_size) {
        throw ConfigError("memory bank capacity " + std::to_string(config.bank_capacity) +
                          " is smaller than the batch size " + std::to_string(batch_size));
      }
      break;
    case StrategyKind::in_batch:
    case StrategyKind::mns:
      break;
  }
}

std::size_t NegativeSet::size() const {
  std::size_t n = 0;
  for (const auto& b : blocks) n += b.size();
  return n;
}

std::size_t NegativeSet::count(NegativeSource source) const {
  std::size_t n = 0;
  for (const auto& b : blocks) {
    if (b.source == source) n += b.size();
  }
  return n;
}

ItemDraw sample_uniform(std::size_t n, std::size_t vocab_size, Rng& rng) {
  if (vocab_size == 0) throw ConfigError("cannot sample from an empty vocabulary");
  ItemDraw draw;
  draw.items.resize(n);
  for (auto& item : draw.items) item = static_cast<ItemIndex>(rng.uniform_index(vocab_size));
  draw.probs.assign(n, 1.0 / static_cast<double>(vocab_size));
  return draw;
}

namespace {

NegativeBlock in_batch_block(std::span<const ItemIndex> positives, const Matrix& embeddings,
                             const UnigramTable& unigram) {
  if (static_cast<std::size_t>(embeddings.rows()) != positives.size()) {
    throw ShapeError("in-batch pool: embeddings do not align with positives");
  }
  NegativeBlock block;
  block.source = NegativeSource::in_batch;
  block.items.assign(positives.begin(), positives.end());
  block.probs.reserve(positives.size());
  for (const auto item : positives) block.probs.push_back(unigram.prob(item));
  block.embeddings = {embeddings.data(), static_cast<std::size_t>(embeddings.size())};
  block.live = true;
  return block;
}

NegativeBlock global_block(const GlobalNegatives& global) {
  NegativeBlock block;
  block.source = NegativeSource::global;
  block.items = global.draw.items;
  block.probs = global.draw.probs;
  block.embeddings = {global.embeddings.data(), static_cast<std::size_t>(global.embeddings.size())};
  block.live = true;
  return block;
}

}  // namespace

NegativeSet gather_in_batch(std::span<const ItemIndex> positives, const Matrix& positive_embeddings,
                            const UnigramTable& unigram) {
  if (positives.size() < 2) throw NumericError("in-batch sampling needs at least two rows in a batch");
  NegativeSet set;
  set.blocks.push_back(in_batch_block(positives, positive_embeddings, unigram));
  return set;
}

GlobalNegatives draw_global(const ModelParams& params, std::size_t n, Rng& rng) {
  return encode_global(params, sample_uniform(n, params.n_items(), rng));
}

GlobalNegatives encode_global(const ModelParams& params, ItemDraw draw) {
  GlobalNegatives global;
  global.draw = std::move(draw);
  auto [embeddings, tape] = item_forward(params, global.draw.items);
  global.embeddings = std::move(embeddings);
  global.tape = std::move(tape);
  return global;
}

NegativeSet uniform_negatives(const GlobalNegatives& global) {
  if (global.draw.items.empty()) throw NumericError("uniform sampling drew no negatives");
  NegativeSet set;
  set.blocks.push_back(global_block(global));
  return set;
}

NegativeSet sample_mns(std::span<const ItemIndex> positives, const Matrix& positive_embeddings,
                       const UnigramTable& unigram, const GlobalNegatives& global) {
  auto set = gather_in_batch(positives, positive_embeddings, unigram);
  if (!global.draw.items.empty()) set.blocks.push_back(global_block(global));
  return set;
}

MemoryBank::MemoryBank(std::size_t capacity, std::size_t dim)
    : capacity_(capacity), dim_(dim), storage_(static_cast<Eigen::Index>(capacity), static_cast<Eigen::Index>(dim)) {
  items_.resize(capacity);
  probs_.resize(capacity);
}

void MemoryBank::enqueue(std::span<const ItemIndex> items, const Matrix& embeddings,
                         const UnigramTable& unigram) {
  if (capacity_ == 0) return;
  if (items.size() > capacity_) {
    throw ConfigError("batch of " + std::to_string(items.size()) +
                      " does not fit a memory bank of capacity " + std::to_string(capacity_));
  }
  if (static_cast<std::size_t>(embeddings.rows()) != items.size() ||
      static_cast<std::size_t>(embeddings.cols()) != dim_) {
    throw ShapeError("bank enqueue: embeddings do not align with items");
  }
  for (std::size_t r = 0; r < items.size(); ++r) {
    std::size_t s;
    if (len_ < capacity_) {
      s = slot(len_);
      ++len_;
    } else {
      s = head_;
      head_ = (head_ + 1) % capacity_;
    }
    items_[s] = items[r];
    probs_[s] = unigram.prob(items[r]);
    storage_.row(static_cast<Eigen::Index>(s)) = embeddings.row(static_cast<Eigen::Index>(r));
  }
}

std::vector<ItemIndex> MemoryBank::items_fifo() const {
  std::vector<ItemIndex> out(len_);
  for (std::size_t k = 0; k < len_; ++k) out[k] = items_[slot(k)];
  return out;
}

std::vector<double> MemoryBank::probs_fifo() const {
  std::vector<double> out(len_);
  for (std::size_t k = 0; k < len_; ++k) out[k] = probs_[slot(k)];
  return out;
}

Matrix MemoryBank::embeddings_fifo() const {
  Matrix out(static_cast<Eigen::Index>(len_), static_cast<Eigen::Index>(dim_));
  for (std::size_t k = 0; k < len_; ++k) {
    out.row(static_cast<Eigen::Index>(k)) = storage_.row(static_cast<Eigen::Index>(slot(k)));
  }
  return out;
}

NegativeBlock MemoryBank::as_block() const {
  // Slots [0, len) are exactly the occupied ones: the ring only wraps once full.
  NegativeBlock block;
  block.source = NegativeSource::bank;
  block.items.assign(items_.begin(), items_.begin() + static_cast<std::ptrdiff_t>(len_));
  block.probs.assign(probs_.begin(), probs_.begin() + static_cast<std::ptrdiff_t>(len_));
  block.embeddings = {storage_.data(), len_ * dim_};
  block.live = false;
  return block;
}

void MemoryBank::dump(std::ostream& out) const {
  for (std::size_t k = 0; k < len_; ++k) {
    const auto s = static_cast<Eigen::Index>(slot(k));
    out << items_[slot(k)] << '\t' << probs_[slot(k)] << '\t' << storage_.row(s).norm() << '\n';
  }
}

NegativeSet cbns_collect(const MemoryBank& bank, std::span<const ItemIndex> positives,
                         const Matrix& positive_embeddings, const UnigramTable& unigram) {
  if (bank.empty()) return gather_in_batch(positives, positive_embeddings, unigram);
  if (static_cast<std::size_t>(positive_embeddings.cols()) != bank.dim()) {
    throw ShapeError("cbns: bank and batch embedding widths differ");
  }
  NegativeSet set;
  set.blocks.push_back(in_batch_block(positives, positive_embeddings, unigram));
  set.blocks.push_back(bank.as_block());
  return set;
}

}  // namespace twotower
