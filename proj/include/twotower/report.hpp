#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "twotower/drift.hpp"
#include "twotower/eval.hpp"
#include "twotower/trainer.hpp"

namespace twotower {

/// Shortest decimal that parses back to the same double.
std::string format_number(double value);
double parse_number(std::string_view text);

/// A header plus string cells; numeric cells go through format_number.
struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  void add_row(std::vector<std::string> row);
  std::size_t column(std::string_view name) const;
  bool operator==(const Table&) const = default;
};

std::string to_tsv(const Table& table);
std::string to_aligned_text(const Table& table);
Table parse_tsv(std::string_view text);
Table read_table(const std::filesystem::path& path);

/// Writes `<stem>.tsv` (line-delimited records) and `<stem>.txt` (aligned text).
void emit_table(const Table& table, const std::filesystem::path& dir, const std::string& stem);

void write_file(const std::filesystem::path& path, std::string_view contents);

/// Per-eval records: iteration, wall_seconds, recall@20, ndcg@20, recall@50, ndcg@50.
Table report_table(const RunReport& report);
/// Same records without the wall-clock column; reproducible byte-for-byte.
Table metrics_table(const RunReport& report);

/// report.tsv/.txt (with `#summary` trailer) and metrics.tsv/.txt under `dir`.
void emit_report(const RunReport& report, const std::filesystem::path& dir);

/// user_id, recall@20, ndcg@20, recall@50, ndcg@50 per evaluated user.
Table per_user_table(const EvalResult& result, const Vocab& users);
Table eval_summary_table(const EvalResult& result);

/// t, delta_t, D
Table drift_table(const std::vector<DriftRecord>& records);
Table lemma_table(const LemmaCheckReport& report);

}  // namespace twotower
