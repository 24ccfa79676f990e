#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "support/fixtures.hpp"
#include "twotower/data.hpp"

using namespace twotower;
using twotower::testing::TempDir;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

// n_users users with `per_user` interactions each; timestamps written out of order.
std::vector<Interaction> grid_interactions(std::size_t n_users, std::size_t per_user) {
  std::vector<Interaction> rows;
  for (std::size_t k = per_user; k-- > 0;) {
    for (std::size_t u = 0; u < n_users; ++u) {
      rows.push_back({"user" + std::to_string(u), "item" + std::to_string((u * 7 + k) % 40),
                      static_cast<std::int64_t>(100 + k * 10)});
    }
  }
  return rows;
}

}  // namespace

TEST_CASE("load_interactions keeps file order") {
  TempDir dir("load");
  write_text(dir / "a.tsv", "u1\ti1\t10\nu1\ti2\t20\n");
  const auto rows = load_interactions(dir / "a.tsv");
  REQUIRE(rows.size() == 2);
  CHECK(rows[0] == Interaction{"u1", "i1", 10});
  CHECK(rows[1] == Interaction{"u1", "i2", 20});
}

TEST_CASE("load_interactions rejects a missing field with the line number") {
  TempDir dir("bad");
  write_text(dir / "bad.tsv", "u1\ti1\n");
  try {
    load_interactions(dir / "bad.tsv");
    FAIL("expected a parse error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("line 1") != std::string::npos);
  }
  write_text(dir / "ts.tsv", "u1\ti1\t5\nu2\ti2\tnope\n");
  CHECK_THROWS_AS(load_interactions(dir / "ts.tsv"), DataError);
  write_text(dir / "empty.tsv", "\n\n");
  CHECK_THROWS_AS(load_interactions(dir / "empty.tsv"), DataError);
  CHECK_THROWS_AS(load_interactions(dir / "missing.tsv"), DataError);
}

TEST_CASE("interactions survive a write/read round trip") {
  TempDir dir("roundtrip");
  SynthConfig sc;
  sc.n_users = 10;
  sc.n_items = 50;
  sc.n_clusters = 5;
  sc.interactions_per_user = 10;
  const auto rows = synth_generate(sc);
  REQUIRE(rows.size() == 100);
  save_interactions(dir / "rt.tsv", rows);
  CHECK(load_interactions(dir / "rt.tsv") == rows);
}

TEST_CASE("vocab is a bijection in insertion order") {
  Vocab v;
  CHECK(v.add("b") == 0);
  CHECK(v.add("a") == 1);
  CHECK(v.add("b") == 0);
  CHECK(v.size() == 2);
  CHECK(v.token(1) == "a");
  CHECK(v.index_of("a") == 1);
  CHECK_FALSE(v.find("zz").has_value());
  CHECK_THROWS(v.index_of("zz"));
}

TEST_CASE("unigram probabilities") {
  SUBCASE("plain frequency ratio") {
    const std::vector<ItemIndex> items = {0, 0, 1, 2};
    const auto t = unigram_probs(items, 3);
    CHECK(t.prob(0) == 0.5);
    CHECK(t.prob(1) == 0.25);
    CHECK(t.prob(2) == 0.25);
  }
  SUBCASE("single item corpus") {
    const std::vector<ItemIndex> items(7, 0);
    CHECK(unigram_probs(items, 1).prob(0) == 1.0);
  }
  SUBCASE("unseen item is floored then renormalized") {
    const std::vector<ItemIndex> items = {0, 0, 0, 1};
    const auto t = unigram_probs(items, 3);
    // floor 1/(10*4) = 0.025, mass before renormalizing 1.025
    CHECK(t.prob(0) == doctest::Approx(0.75 / 1.025).epsilon(1e-12));
    CHECK(t.prob(1) == doctest::Approx(0.25 / 1.025).epsilon(1e-12));
    CHECK(t.prob(2) == doctest::Approx(0.025 / 1.025).epsilon(1e-12));
    double sum = 0.0;
    for (double p : t.probs()) sum += p;
    CHECK(std::abs(sum - 1.0) < 1e-9);
    for (double p : t.probs()) CHECK(p > 0.0);
  }
  SUBCASE("empty corpus is an error") {
    CHECK_THROWS(unigram_probs(std::vector<ItemIndex>{}, 3));
  }
  SUBCASE("table rejects values outside (0, 1]") {
    CHECK_THROWS(UnigramTable({0.5, 0.0}));
    CHECK_THROWS(UnigramTable({1.5}));
  }
}

TEST_CASE("split partitions users 80/10/10 and is deterministic") {
  const auto rows = grid_interactions(100, 10);
  SplitConfig cfg;
  cfg.seed = 7;
  const auto a = build_splits(rows, cfg);
  CHECK(a.train_users.size() == 80);
  CHECK(a.validation_users.size() == 10);
  CHECK(a.test_users.size() == 10);
  std::set<UserIndex> all;
  for (const auto* part : {&a.train_users, &a.validation_users, &a.test_users}) {
    for (auto u : *part) CHECK(all.insert(u).second);
  }
  CHECK(all.size() == 100);

  const auto b = build_splits(rows, cfg);
  CHECK(a.train_users == b.train_users);
  CHECK(a.validation_users == b.validation_users);
  CHECK(a.test_users == b.test_users);
  CHECK(a.unigram.probs() == b.unigram.probs());

  SplitConfig other = cfg;
  other.seed = 8;
  CHECK(build_splits(rows, other).test_users != a.test_users);
}

TEST_CASE("test users fold in their earliest 80 percent") {
  const auto rows = grid_interactions(100, 10);
  SplitConfig cfg;
  cfg.seed = 7;
  const auto ds = build_splits(rows, cfg);
  REQUIRE(!ds.test.empty());
  for (const auto& eu : ds.test) {
    REQUIRE(eu.fold_in.size() == 8);
    REQUIRE(eu.targets.size() == 2);
    const auto u = std::stoul(ds.users.token(eu.user).substr(4));
    // item at step k is (7u + k) % 40 with timestamp 100 + 10k; targets are k = 8, 9
    CHECK(ds.items.token(eu.targets[0]) == "item" + std::to_string((u * 7 + 8) % 40));
    CHECK(ds.items.token(eu.targets[1]) == "item" + std::to_string((u * 7 + 9) % 40));
    CHECK(ds.items.token(eu.fold_in[0]) == "item" + std::to_string((u * 7) % 40));
  }
}

TEST_CASE("split drops short users and rejects tiny corpora") {
  auto rows = grid_interactions(20, 6);
  rows.push_back({"short", "item1", 1});
  SplitConfig cfg;
  const auto ds = build_splits(rows, cfg);
  CHECK_FALSE(ds.users.find("short").has_value());
  CHECK(ds.n_users() == 20);
  CHECK_THROWS_AS(build_splits(grid_interactions(5, 6), cfg), DataError);
}

TEST_CASE("unigram covers only training users") {
  const auto ds = twotower::testing::small_dataset();
  std::vector<double> counts(ds.n_items(), 0.0);
  double total = 0.0;
  for (const auto& seq : ds.train_sequences) {
    for (auto it : seq.items) {
      counts[it] += 1.0;
      total += 1.0;
    }
  }
  const bool all_seen = std::all_of(counts.begin(), counts.end(), [](double c) { return c > 0; });
  for (std::size_t i = 0; i < ds.n_items() && all_seen; ++i) {
    CHECK(ds.unigram.prob(static_cast<ItemIndex>(i)) == counts[i] / total);
  }
  double sum = 0.0;
  for (double p : ds.unigram.probs()) sum += p;
  CHECK(std::abs(sum - 1.0) < 1e-9);
}

TEST_CASE("history is truncated to the most recent items") {
  UserSequence seq;
  for (int k = 0; k < 31; ++k) {
    seq.items.push_back(static_cast<ItemIndex>(k));
    seq.timestamps.push_back(k);
  }
  const auto h = history_before(seq, 30, 20);
  REQUIRE(h.size() == 20);
  CHECK(h.front() == 10);
  CHECK(h.back() == 29);
  CHECK(history_before(seq, 0, 20).empty());
  CHECK(history_before(seq, 5, 20).size() == 5);
}

TEST_CASE("history excludes interactions sharing the positive's timestamp") {
  UserSequence seq;
  seq.items = {4, 5, 6, 7};
  seq.timestamps = {1, 2, 2, 3};
  CHECK(history_before(seq, 2, 20) == std::vector<ItemIndex>{4});
  CHECK(history_before(seq, 3, 20) == std::vector<ItemIndex>{4, 5, 6});
}

TEST_CASE("batches are 128, 128, 44 for 300 pairs") {
  // 50 training users with 6 interactions: 300 pairs
  auto rows = grid_interactions(63, 6);
  SplitConfig cfg;
  cfg.train_ratio = 50.0 / 63.0;
  cfg.validation_ratio = 7.0 / 63.0;
  const auto ds = build_splits(rows, cfg);
  REQUIRE(ds.train_pairs.size() == 300);
  const auto batches = make_batches(ds, 128, 1, 0);
  REQUIRE(batches.size() == 3);
  CHECK(batches[0].size() == 128);
  CHECK(batches[1].size() == 128);
  CHECK(batches[2].size() == 44);
}

TEST_CASE("an epoch of batch positives is the multiset of training pairs") {
  const auto ds = twotower::testing::small_dataset();
  std::map<std::pair<UserIndex, ItemIndex>, int> expected, seen;
  for (const auto& pair : ds.train_pairs) {
    const auto& seq = ds.train_sequences[pair.sequence];
    ++expected[{seq.user, seq.items[pair.position]}];
  }
  for (std::uint64_t epoch : {0u, 1u}) {
    seen.clear();
    for (const auto& b : make_batches(ds, 64, 9, epoch)) {
      for (std::size_t i = 0; i < b.size(); ++i) ++seen[{b.users[i], b.positives[i]}];
    }
    CHECK(seen == expected);
  }
  const auto e0 = make_batches(ds, 64, 9, 0);
  const auto e1 = make_batches(ds, 64, 9, 1);
  CHECK(e0.front().positives != e1.front().positives);
}

TEST_CASE("batch iterator rolls over epochs and matches make_batches") {
  const auto ds = twotower::testing::small_dataset();
  const auto e0 = make_batches(ds, 100, 4, 0);
  const auto e1 = make_batches(ds, 100, 4, 1);
  BatchIterator it(ds, 100, 4);
  for (const auto& b : e0) CHECK(it.next().positives == b.positives);
  CHECK(it.next().positives == e1.front().positives);
  CHECK(it.epoch() == 1);
}

TEST_CASE("batch histories come strictly before the positive") {
  const auto ds = twotower::testing::small_dataset();
  BatchIterator it(ds, 50, 2, 5);
  const auto b = it.next();
  for (const auto& h : b.histories) CHECK(h.size() <= 5);
  std::set<ItemIndex> distinct(b.positives.begin(), b.positives.end());
  CHECK(b.unique == (distinct.size() == b.positives.size()));
}

TEST_CASE("synthetic generator") {
  SynthConfig sc;
  sc.seed = 1;
  const auto rows = synth_generate(sc);
  CHECK(rows.size() == 30000);

  std::size_t home = 0;
  for (const auto& r : rows) {
    const auto u = std::stoul(r.user_id.substr(1));
    const auto i = std::stoul(r.item_id.substr(1));
    home += synth_user_cluster(u, sc.n_clusters) == synth_item_cluster(i, sc.n_items, sc.n_clusters) ? 1 : 0;
  }
  const double fraction = static_cast<double>(home) / static_cast<double>(rows.size());
  CHECK(std::abs(fraction - 0.8) <= 0.02);

  TempDir dir("synth");
  save_interactions(dir / "a.tsv", rows);
  save_interactions(dir / "b.tsv", synth_generate(sc));
  CHECK(slurp(dir / "a.tsv") == slurp(dir / "b.tsv"));

  SynthConfig other = sc;
  other.seed = 2;
  CHECK(synth_generate(other) != rows);
}

TEST_CASE("synthetic generator rejects impossible shapes") {
  SynthConfig sc;
  sc.n_clusters = 0;
  CHECK_THROWS(synth_generate(sc));
  sc.n_clusters = 3000;
  CHECK_THROWS(synth_generate(sc));
}

TEST_CASE("property: splits are disjoint and cover every kept user") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    SynthConfig sc;
    sc.n_users = 20 + rng.uniform_index(80);
    sc.n_items = 40 + rng.uniform_index(100);
    sc.n_clusters = 2 + rng.uniform_index(5);
    sc.interactions_per_user = 5 + rng.uniform_index(15);
    sc.seed = seed;
    SplitConfig cfg;
    cfg.seed = seed;
    const auto ds = build_splits(synth_generate(sc), cfg);
    std::vector<int> hits(ds.n_users(), 0);
    for (const auto* part : {&ds.train_users, &ds.validation_users, &ds.test_users}) {
      for (auto u : *part) ++hits[u];
    }
    CHECK(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }));
    for (const auto& eu : ds.test) {
      CHECK(!eu.fold_in.empty());
      CHECK(!eu.targets.empty());
      CHECK(eu.fold_in.size() + eu.targets.size() == sc.interactions_per_user);
    }
  }
}
