#include "twotower/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <thread>

namespace twotower {

namespace {

constexpr std::size_t kDefaultKs[] = {20, 50};

std::vector<ItemIndex> distinct(std::span<const ItemIndex> items) {
  std::vector<ItemIndex> out(items.begin(), items.end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::size_t hits_in_prefix(std::span<const ItemIndex> retrieved, const std::vector<ItemIndex>& relevant,
                           std::size_t k, std::vector<std::size_t>* ranks = nullptr) {
  // A repeated item in `retrieved` counts once, at its first rank.
  std::size_t hits = 0;
  std::vector<bool> found(relevant.size(), false);
  const auto n = std::min(k, retrieved.size());
  for (std::size_t r = 0; r < n; ++r) {
    const auto it = std::lower_bound(relevant.begin(), relevant.end(), retrieved[r]);
    if (it != relevant.end() && *it == retrieved[r] && !found[static_cast<std::size_t>(it - relevant.begin())]) {
      found[static_cast<std::size_t>(it - relevant.begin())] = true;
      ++hits;
      if (ranks) ranks->push_back(r + 1);
    }
  }
  return hits;
}

}  // namespace

std::vector<ItemIndex> topk_retrieve(std::span<const double> u, const Matrix& item_matrix, std::size_t k,
                                     std::span<const ItemIndex> exclude) {
  if (u.size() != static_cast<std::size_t>(item_matrix.cols())) throw ShapeError("topk_retrieve: dimension mismatch");
  const auto n = static_cast<std::size_t>(item_matrix.rows());
  std::vector<std::uint8_t> blocked(n, 0);
  for (const auto item : exclude) {
    if (item < n) blocked[item] = 1;
  }
  const auto n_blocked = static_cast<std::size_t>(std::count(blocked.begin(), blocked.end(), 1));
  if (k > n - n_blocked) {
    throw ConfigError("top-" + std::to_string(k) + " requested but only " + std::to_string(n - n_blocked) +
                      " candidates remain");
  }

  const Eigen::Map<const Eigen::VectorXd> query(u.data(), static_cast<Eigen::Index>(u.size()));
  const Eigen::VectorXd scores = item_matrix * query;
  std::vector<ItemIndex> candidates;
  candidates.reserve(n - n_blocked);
  for (std::size_t i = 0; i < n; ++i) {
    if (!blocked[i]) candidates.push_back(static_cast<ItemIndex>(i));
  }
  const auto better = [&](ItemIndex a, ItemIndex b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  };
  const auto kth = candidates.begin() + static_cast<std::ptrdiff_t>(k);
  if (kth != candidates.end()) std::nth_element(candidates.begin(), kth, candidates.end(), better);
  std::sort(candidates.begin(), kth, better);
  candidates.resize(k);
  return candidates;
}

std::optional<double> recall_at_k(std::span<const ItemIndex> retrieved, std::span<const ItemIndex> relevant,
                                  std::size_t k) {
  const auto rel = distinct(relevant);
  if (rel.empty() || k == 0) return std::nullopt;
  const auto hits = hits_in_prefix(retrieved, rel, k);
  return static_cast<double>(hits) / static_cast<double>(std::min(k, rel.size()));
}

std::optional<double> ndcg_at_k(std::span<const ItemIndex> retrieved, std::span<const ItemIndex> relevant,
                                std::size_t k) {
  const auto rel = distinct(relevant);
  if (rel.empty() || k == 0) return std::nullopt;
  std::vector<std::size_t> ranks;
  hits_in_prefix(retrieved, rel, k, &ranks);
  double dcg = 0.0;
  for (const auto r : ranks) dcg += 1.0 / std::log2(static_cast<double>(r) + 1.0);
  double idcg = 0.0;
  for (std::size_t r = 1; r <= std::min(k, rel.size()); ++r) idcg += 1.0 / std::log2(static_cast<double>(r) + 1.0);
  return dcg / idcg;
}

double EvalResult::recall_at(std::size_t k) const {
  const auto it = std::find(ks.begin(), ks.end(), k);
  if (it == ks.end()) throw std::out_of_range("recall not computed at K=" + std::to_string(k));
  return mean_recall[static_cast<std::size_t>(it - ks.begin())];
}

double EvalResult::ndcg_at(std::size_t k) const {
  const auto it = std::find(ks.begin(), ks.end(), k);
  if (it == ks.end()) throw std::out_of_range("ndcg not computed at K=" + std::to_string(k));
  return mean_ndcg[static_cast<std::size_t>(it - ks.begin())];
}

std::size_t eval_threads() {
  if (const char* env = std::getenv("TWOTOWER_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n > 0) return static_cast<std::size_t>(n);
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

EvalResult evaluate_embeddings(const Matrix& user_vectors, const Matrix& item_matrix,
                               std::span<const EvalUser> users, std::span<const std::size_t> ks,
                               std::size_t threads) {
  if (static_cast<std::size_t>(user_vectors.rows()) != users.size()) {
    throw ShapeError("evaluate: one user vector per eval user expected");
  }
  if (ks.empty()) ks = kDefaultKs;
  const auto max_k = *std::max_element(ks.begin(), ks.end());
  const auto n_k = ks.size();

  struct PerUser {
    bool usable = false;
    std::vector<double> recall, ndcg;
  };
  std::vector<PerUser> per_user(users.size());

  const auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const auto& eu = users[i];
      const auto fold = distinct(eu.fold_in);
      std::vector<ItemIndex> relevant;
      for (const auto t : distinct(eu.targets)) {
        if (!std::binary_search(fold.begin(), fold.end(), t)) relevant.push_back(t);
      }
      if (relevant.empty()) continue;
      const auto row = user_vectors.row(static_cast<Eigen::Index>(i));
      const auto ranked = topk_retrieve({row.data(), static_cast<std::size_t>(row.size())}, item_matrix, max_k, fold);
      auto& out = per_user[i];
      out.usable = true;
      for (const auto k : ks) {
        out.recall.push_back(*recall_at_k(ranked, relevant, k));
        out.ndcg.push_back(*ndcg_at_k(ranked, relevant, k));
      }
    }
  };

  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(1, users.size()));
  if (threads == 1) {
    work(0, users.size());
  } else {
    std::vector<std::thread> pool;
    const auto chunk = (users.size() + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
      const auto begin = t * chunk;
      const auto end = std::min(users.size(), begin + chunk);
      if (begin < end) pool.emplace_back(work, begin, end);
    }
    for (auto& th : pool) th.join();
  }

  EvalResult result;
  result.ks.assign(ks.begin(), ks.end());
  result.recall.assign(n_k, {});
  result.ndcg.assign(n_k, {});
  for (std::size_t i = 0; i < users.size(); ++i) {
    if (!per_user[i].usable) {
      ++result.n_skipped;
      continue;
    }
    result.users.push_back(users[i].user);
    for (std::size_t k = 0; k < n_k; ++k) {
      result.recall[k].push_back(per_user[i].recall[k]);
      result.ndcg[k].push_back(per_user[i].ndcg[k]);
    }
  }
  for (std::size_t k = 0; k < n_k; ++k) {
    const auto n = static_cast<double>(result.users.size());
    const auto mean = [n](const std::vector<double>& v) {
      return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / n;
    };
    result.mean_recall.push_back(mean(result.recall[k]));
    result.mean_ndcg.push_back(mean(result.ndcg[k]));
  }
  return result;
}

EvalResult evaluate(const ModelParams& params, const SplitDataset& dataset, Split split,
                    std::span<const std::size_t> ks, std::size_t max_history, std::size_t threads) {
  const auto& users = dataset.eval_users(split);
  std::vector<std::vector<ItemIndex>> histories;
  std::vector<UserIndex> ids;
  histories.reserve(users.size());
  for (const auto& eu : users) {
    const auto begin = eu.fold_in.size() > max_history ? eu.fold_in.size() - max_history : 0;
    histories.emplace_back(eu.fold_in.begin() + static_cast<std::ptrdiff_t>(begin), eu.fold_in.end());
    ids.push_back(eu.user);
  }
  const auto [user_vectors, user_tape] = user_forward(params, histories, ids);
  std::vector<ItemIndex> all(params.n_items());
  std::iota(all.begin(), all.end(), 0u);
  const auto [item_matrix, item_tape] = item_forward(params, all);
  return evaluate_embeddings(user_vectors, item_matrix, users, ks, threads == 0 ? eval_threads() : threads);
}

}  // namespace twotower
