#include "twotower/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <numeric>
#include <thread>

namespace twotower {

namespace {

const std::vector<std::string> kCellColumns = {"strategy", "bank_size", "seed", "status", "avg_seconds_per_1k",
                                               "convergence_minutes", "recall@20", "ndcg@20", "recall@50", "ndcg@50"};

std::string percent(double fraction) { return format_number(fraction * 100.0); }

std::string cell_label(const TrainConfig& c) {
  return std::string(strategy_name(c.strategy.kind)) + "_m" + std::to_string(c.strategy.bank_capacity) + "_s" +
         std::to_string(c.seed);
}

Table cell_table(const CellResult& r) {
  Table t;
  t.columns = kCellColumns;
  t.add_row({r.strategy, std::to_string(r.bank_size), std::to_string(r.seed), r.ok ? "ok" : "failed",
             format_number(r.avg_seconds_per_1k), format_number(r.convergence_minutes), format_number(r.recall20),
             format_number(r.ndcg20), format_number(r.recall50), format_number(r.ndcg50)});
  return t;
}

CellResult cell_from_table(const Table& t) {
  if (t.rows.size() != 1 || t.columns != kCellColumns) throw DataError("malformed sweep cell record");
  const auto& row = t.rows[0];
  CellResult r;
  r.strategy = row[0];
  r.bank_size = static_cast<std::size_t>(parse_number(row[1]));
  r.seed = static_cast<std::uint64_t>(parse_number(row[2]));
  r.ok = row[3] == "ok";
  r.avg_seconds_per_1k = parse_number(row[4]);
  r.convergence_minutes = parse_number(row[5]);
  r.recall20 = parse_number(row[6]);
  r.ndcg20 = parse_number(row[7]);
  r.recall50 = parse_number(row[8]);
  r.ndcg50 = parse_number(row[9]);
  return r;
}

std::vector<CellResult> run_cells(const std::vector<TrainConfig>& configs, const SplitDataset& dataset,
                                  const SweepOptions& options) {
  std::vector<CellResult> results(configs.size());
  const bool timed = options.parallel <= 1;
  const auto cell_dir = [&](const TrainConfig& c) { return options.out_dir / "cells" / cell_label(c); };
  if (timed) {
    for (std::size_t i = 0; i < configs.size(); ++i) results[i] = run_cell(configs[i], dataset, cell_dir(configs[i]));
    return results;
  }
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (auto i = next++; i < configs.size(); i = next++) {
      results[i] = run_cell(configs[i], dataset, cell_dir(configs[i]), false);
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(options.parallel, configs.size()); ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  return results;
}

std::string time_cell(const CellResult& r, double value) {
  if (!r.ok) return "nan";
  return r.timed ? format_number(value) : "n/a";
}

}  // namespace

std::string mean_range_cell(std::span<const double> values) {
  if (values.empty()) return "nan";
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  return format_number(mean) + "±" + format_number((*hi - *lo) / 2.0);
}

CellResult run_cell(const TrainConfig& config, const SplitDataset& dataset, const std::filesystem::path& cell_dir,
                    bool timed) {
  const auto marker = cell_dir / "done";
  if (std::filesystem::exists(marker)) {
    auto cached = cell_from_table(read_table(cell_dir / "cell.tsv"));
    cached.timed = timed;
    return cached;
  }
  std::filesystem::create_directories(cell_dir);
  CellResult r;
  r.strategy = strategy_name(config.strategy.kind);
  r.bank_size = config.strategy.kind == StrategyKind::cbns ? config.strategy.bank_capacity : 0;
  r.seed = config.seed;
  r.timed = timed;
  try {
    auto cfg = config;
    cfg.run_dir = cell_dir;
    cfg.evaluate_test = true;
    const auto trained = train(cfg, dataset);
    emit_report(trained.report, cell_dir);
    const auto timing = timing_summary(trained.report);
    r.ok = true;
    r.avg_seconds_per_1k = timing.avg_seconds_per_1k;
    r.convergence_minutes = timing.convergence_minutes;
    const auto& test = *trained.report.test;
    r.recall20 = test.recall20;
    r.ndcg20 = test.ndcg20;
    r.recall50 = test.recall50;
    r.ndcg50 = test.ndcg50;
    write_file(cell_dir / "cell.tsv", to_tsv(cell_table(r)));
    write_file(marker, "");
  } catch (const std::exception& e) {
    r.ok = false;
    r.error = e.what();
    write_file(cell_dir / "error.txt", r.error + "\n");
  }
  return r;
}

std::vector<std::size_t> bank_sizes_from_multiples(std::span<const std::size_t> multiples, std::size_t batch_size) {
  std::vector<std::size_t> sizes;
  for (const auto m : multiples) sizes.push_back(m * batch_size);
  return sizes;
}

SweepTables run_sweep_strategies(const TrainConfig& base, const SplitDataset& dataset,
                                 std::span<const StrategyKind> strategies, std::span<const std::uint64_t> seeds,
                                 const SweepOptions& options) {
  std::vector<TrainConfig> configs;
  for (const auto kind : strategies) {
    for (const auto seed : seeds) {
      auto c = base;
      c.strategy.kind = kind;
      c.seed = seed;
      validate(c.strategy, c.batch_size);
      configs.push_back(c);
    }
  }
  SweepTables out;
  out.cells = run_cells(configs, dataset, options);

  out.full.columns = {"strategy", "seed", "avg_time_1k_s", "conv_time_min",
                      "recall@20(%)", "ndcg@20(%)", "recall@50(%)", "ndcg@50(%)"};
  out.metrics.columns = {"strategy", "seed", "recall@20(%)", "ndcg@20(%)", "recall@50(%)", "ndcg@50(%)"};
  std::size_t cursor = 0;
  for (const auto kind : strategies) {
    std::vector<double> avg, conv, r20, n20, r50, n50;
    bool all_timed = true;
    for (std::size_t s = 0; s < seeds.size(); ++s, ++cursor) {
      const auto& r = out.cells[cursor];
      const auto status_metric = [&](double v) { return r.ok ? percent(v) : std::string("nan"); };
      const std::vector<std::string> metrics{status_metric(r.recall20), status_metric(r.ndcg20),
                                             status_metric(r.recall50), status_metric(r.ndcg50)};
      std::vector<std::string> full_row{strategy_name(kind), std::to_string(r.seed),
                                        time_cell(r, r.avg_seconds_per_1k), time_cell(r, r.convergence_minutes)};
      full_row.insert(full_row.end(), metrics.begin(), metrics.end());
      out.full.add_row(std::move(full_row));
      std::vector<std::string> metric_row{strategy_name(kind), std::to_string(r.seed)};
      metric_row.insert(metric_row.end(), metrics.begin(), metrics.end());
      out.metrics.add_row(std::move(metric_row));
      if (!r.ok) continue;
      all_timed &= r.timed;
      avg.push_back(r.avg_seconds_per_1k);
      conv.push_back(r.convergence_minutes);
      r20.push_back(r.recall20 * 100.0);
      n20.push_back(r.ndcg20 * 100.0);
      r50.push_back(r.recall50 * 100.0);
      n50.push_back(r.ndcg50 * 100.0);
    }
    const std::vector<std::string> agg{mean_range_cell(r20), mean_range_cell(n20), mean_range_cell(r50),
                                       mean_range_cell(n50)};
    std::vector<std::string> full_row{strategy_name(kind), "mean", all_timed ? mean_range_cell(avg) : "n/a",
                                      all_timed ? mean_range_cell(conv) : "n/a"};
    full_row.insert(full_row.end(), agg.begin(), agg.end());
    out.full.add_row(std::move(full_row));
    std::vector<std::string> metric_row{strategy_name(kind), "mean"};
    metric_row.insert(metric_row.end(), agg.begin(), agg.end());
    out.metrics.add_row(std::move(metric_row));
  }
  return out;
}

SweepTables run_sweep_bank(const TrainConfig& base, const SplitDataset& dataset,
                           std::span<const std::size_t> bank_sizes, std::span<const std::uint64_t> seeds,
                           const SweepOptions& options) {
  std::vector<TrainConfig> configs;
  for (const auto m : bank_sizes) {
    for (const auto seed : seeds) {
      auto c = base;
      c.strategy.kind = StrategyKind::cbns;
      c.strategy.bank_capacity = m;
      c.seed = seed;
      validate(c.strategy, c.batch_size);
      configs.push_back(c);
    }
  }
  SweepTables out;
  out.cells = run_cells(configs, dataset, options);
  out.full.columns = {"M", "#neg", "seed", "avg_time_1k_s", "recall@50(%)", "ndcg@50(%)"};
  out.metrics.columns = {"M", "#neg", "seed", "recall@50(%)", "ndcg@50(%)"};
  std::size_t cursor = 0;
  for (const auto m : bank_sizes) {
    const auto n_neg = std::to_string(m + base.batch_size);
    std::vector<double> avg, r50, n50;
    bool all_timed = true;
    for (std::size_t s = 0; s < seeds.size(); ++s, ++cursor) {
      const auto& r = out.cells[cursor];
      const auto r50_cell = r.ok ? percent(r.recall50) : std::string("nan");
      const auto n50_cell = r.ok ? percent(r.ndcg50) : std::string("nan");
      out.full.add_row({std::to_string(m), n_neg, std::to_string(r.seed), time_cell(r, r.avg_seconds_per_1k),
                        r50_cell, n50_cell});
      out.metrics.add_row({std::to_string(m), n_neg, std::to_string(r.seed), r50_cell, n50_cell});
      if (!r.ok) continue;
      all_timed &= r.timed;
      avg.push_back(r.avg_seconds_per_1k);
      r50.push_back(r.recall50 * 100.0);
      n50.push_back(r.ndcg50 * 100.0);
    }
    out.full.add_row({std::to_string(m), n_neg, "mean", all_timed ? mean_range_cell(avg) : "n/a",
                      mean_range_cell(r50), mean_range_cell(n50)});
    out.metrics.add_row({std::to_string(m), n_neg, "mean", mean_range_cell(r50), mean_range_cell(n50)});
  }
  return out;
}

}  // namespace twotower
