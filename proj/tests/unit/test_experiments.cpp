#include <doctest.h>

#include "support/fixtures.hpp"
#include "twotower/experiments.hpp"

using namespace twotower;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.batch_size = 16;
  c.dim = 4;
  c.hidden = 8;
  c.max_iterations = 12;
  c.eval_every = 6;
  c.strategy.bank_capacity = 32;
  c.strategy.warmup_iterations = 2;
  c.strategy.n_global = 24;
  return c;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double leading_number(const std::string& cell) { return parse_number(cell.substr(0, cell.find("±"))); }

}  // namespace

TEST_CASE("mean and half-range cell") {
  const std::vector<double> v = {1.0, 2.0, 6.0};
  CHECK(mean_range_cell(v) == "3±2.5");
  CHECK(mean_range_cell(std::vector<double>{}) == "nan");
}

TEST_CASE("strategy sweep layout and aggregates") {
  twotower::testing::TempDir dir("sweep");
  const auto ds = twotower::testing::small_dataset();
  const std::vector<StrategyKind> kinds = {StrategyKind::uniform, StrategyKind::in_batch, StrategyKind::mns,
                                           StrategyKind::cbns};
  const std::vector<std::uint64_t> seeds = {1, 2, 3};
  const auto out = run_sweep_strategies(tiny_config(), ds, kinds, seeds, {dir.path(), 1});
  REQUIRE(out.cells.size() == 12);
  CHECK(out.full.rows.size() == 16);
  CHECK(out.metrics.rows.size() == 16);
  const auto r50 = out.metrics.column("recall@50(%)");
  for (std::size_t k = 0; k < kinds.size(); ++k) {
    std::vector<double> cells;
    for (std::size_t s = 0; s < 3; ++s) {
      const auto& c = out.cells[k * 3 + s];
      CHECK(c.ok);
      CHECK(c.strategy == strategy_name(kinds[k]));
      CHECK(c.seed == seeds[s]);
      cells.push_back(c.recall50 * 100.0);
      CHECK(out.metrics.rows[k * 4 + s][r50] == format_number(c.recall50 * 100.0));
    }
    const auto& agg = out.metrics.rows[k * 4 + 3];
    CHECK(agg[1] == "mean");
    CHECK(leading_number(agg[r50]) == doctest::Approx(mean_of(cells)).epsilon(1e-12));
  }
}

TEST_CASE("bank sweep") {
  twotower::testing::TempDir dir("bank");
  const auto ds = twotower::testing::small_dataset();
  auto base = tiny_config();
  const std::vector<std::size_t> multiples = {0, 1, 2};
  const auto sizes = bank_sizes_from_multiples(multiples, base.batch_size);
  CHECK(sizes == std::vector<std::size_t>{0, 16, 32});
  const std::vector<std::uint64_t> seeds = {1, 2};
  const auto out = run_sweep_bank(base, ds, sizes, seeds, {dir.path(), 1});
  CHECK(out.full.rows.size() == sizes.size() * seeds.size() + sizes.size());
  const auto neg = out.full.column("#neg");
  for (const auto& row : out.full.rows) CHECK(parse_number(row[neg]) == parse_number(row[0]) + 16.0);

  // M = 0 reproduces the in-batch cell
  twotower::testing::TempDir other("bank_ib");
  const std::vector<StrategyKind> ib = {StrategyKind::in_batch};
  const std::vector<std::uint64_t> one = {1};
  const auto ref = run_sweep_strategies(base, ds, ib, one, {other.path(), 1});
  CHECK(out.cells[0].recall50 == ref.cells[0].recall50);
  CHECK(out.cells[0].ndcg20 == ref.cells[0].ndcg20);
}

TEST_CASE("finished cells are reloaded, not retrained") {
  twotower::testing::TempDir dir("resume");
  const auto ds = twotower::testing::small_dataset();
  auto c = tiny_config();
  c.strategy.kind = StrategyKind::in_batch;
  const auto cell = dir / "cell";
  const auto first = run_cell(c, ds, cell);
  REQUIRE(first.ok);
  REQUIRE(std::filesystem::exists(cell / "done"));
  // a config that would fail proves the cached record is used
  auto broken = c;
  broken.max_iterations = 0;
  const auto again = run_cell(broken, ds, cell);
  CHECK(again.ok);
  CHECK(again.recall50 == first.recall50);
  CHECK(again.avg_seconds_per_1k == first.avg_seconds_per_1k);
  std::filesystem::remove(cell / "done");
  const auto failed = run_cell(broken, ds, cell);
  CHECK_FALSE(failed.ok);
  CHECK(std::filesystem::exists(cell / "error.txt"));
}

TEST_CASE("parallel cells match serial metrics and drop timing") {
  twotower::testing::TempDir a("par_a"), b("par_b");
  const auto ds = twotower::testing::small_dataset();
  const std::vector<StrategyKind> kinds = {StrategyKind::in_batch, StrategyKind::cbns};
  const std::vector<std::uint64_t> seeds = {1, 2};
  const auto serial = run_sweep_strategies(tiny_config(), ds, kinds, seeds, {a.path(), 1});
  const auto par = run_sweep_strategies(tiny_config(), ds, kinds, seeds, {b.path(), 3});
  CHECK(serial.metrics == par.metrics);
  CHECK(par.full.rows[0][par.full.column("avg_time_1k_s")] == "n/a");
}
