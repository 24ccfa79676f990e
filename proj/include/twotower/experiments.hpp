#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "twotower/report.hpp"
#include "twotower/trainer.hpp"

namespace twotower {

struct SweepOptions {
  std::filesystem::path out_dir;  // cells/<label>/ hold per-cell results and `done` markers
  std::size_t parallel = 1;       // > 1 runs cells concurrently and blanks timing columns
};

/// One finished (or failed) sweep cell.
struct CellResult {
  std::string strategy;
  std::size_t bank_size = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double avg_seconds_per_1k = 0.0;
  double convergence_minutes = 0.0;
  // Test-split metrics of the best-validation parameters, as fractions.
  double recall20 = 0.0, ndcg20 = 0.0, recall50 = 0.0, ndcg50 = 0.0;
  bool timed = true;
};

/// Trains one cell, or reloads it when its `done` marker exists.
CellResult run_cell(const TrainConfig& config, const SplitDataset& dataset, const std::filesystem::path& cell_dir,
                    bool timed = true);

struct SweepTables {
  Table full;     // with timing columns
  Table metrics;  // metric columns only
  std::vector<CellResult> cells;
};

/// Strategy comparison: one row per (strategy, seed) plus one aggregate row
/// per strategy holding mean±half-range.
SweepTables run_sweep_strategies(const TrainConfig& base, const SplitDataset& dataset,
                                 std::span<const StrategyKind> strategies, std::span<const std::uint64_t> seeds,
                                 const SweepOptions& options);

/// CBNS memory-size sweep; M = 0 is plain in-batch sampling.
SweepTables run_sweep_bank(const TrainConfig& base, const SplitDataset& dataset,
                           std::span<const std::size_t> bank_sizes, std::span<const std::uint64_t> seeds,
                           const SweepOptions& options);

std::vector<std::size_t> bank_sizes_from_multiples(std::span<const std::size_t> multiples, std::size_t batch_size);

/// "mean±half_range" of the values.
std::string mean_range_cell(std::span<const double> values);

}  // namespace twotower
