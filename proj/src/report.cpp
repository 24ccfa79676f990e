#include "twotower/report.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <fstream>
#include <sstream>

namespace twotower {

std::string format_number(double value) {
  std::array<char, 64> buf{};
  const auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), value);
  if (ec != std::errc{}) throw std::runtime_error("number formatting failed");
  return std::string(buf.data(), ptr);
}

double parse_number(std::string_view text) {
  double value = 0.0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || ptr != text.data() + text.size()) {
    throw DataError("not a number: '" + std::string(text) + "'");
  }
  return value;
}

void Table::add_row(std::vector<std::string> row) {
  if (row.size() != columns.size()) throw ShapeError("table row width does not match header");
  rows.push_back(std::move(row));
}

std::size_t Table::column(std::string_view name) const {
  const auto it = std::find(columns.begin(), columns.end(), name);
  if (it == columns.end()) throw std::out_of_range("no column " + std::string(name));
  return static_cast<std::size_t>(it - columns.begin());
}

namespace {

void append_line(std::string& out, const std::vector<std::string>& cells) {
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) out += '\t';
    out += cells[i];
  }
  out += '\n';
}

std::vector<std::string> split_line(std::string_view line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    cells.emplace_back(line.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start));
    if (tab == std::string_view::npos) break;
    start = tab + 1;
  }
  return cells;
}

std::vector<std::string> record_cells(const EvalRecord& r, bool with_wall) {
  std::vector<std::string> cells{std::to_string(r.iteration)};
  if (with_wall) cells.push_back(format_number(r.wall_seconds));
  for (const double v : {r.recall20, r.ndcg20, r.recall50, r.ndcg50}) cells.push_back(format_number(v));
  return cells;
}

}  // namespace

std::string to_tsv(const Table& table) {
  std::string out;
  append_line(out, table.columns);
  for (const auto& row : table.rows) append_line(out, row);
  return out;
}

std::string to_aligned_text(const Table& table) {
  std::vector<std::size_t> width(table.columns.size(), 0);
  const auto measure = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) width[i] = std::max(width[i], cells[i].size());
  };
  measure(table.columns);
  for (const auto& row : table.rows) measure(row);

  std::string out;
  const auto emit = [&](const std::vector<std::string>& cells) {
    std::string line;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) line += "  ";
      line += cells[i];
      line.append(width[i] - cells[i].size(), ' ');
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out += line;
    out += '\n';
  };
  emit(table.columns);
  std::size_t total = 0;
  for (const auto w : width) total += w;
  out.append(total + (width.empty() ? 0 : 2 * (width.size() - 1)), '-');
  out += '\n';
  for (const auto& row : table.rows) emit(row);
  return out;
}

Table parse_tsv(std::string_view text) {
  Table table;
  bool header = true;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const auto line = text.substr(start, end - start);
    start = end + 1;
    if (line.empty() || line.front() == '#') continue;
    auto cells = split_line(line);
    if (header) {
      table.columns = std::move(cells);
      header = false;
    } else {
      table.add_row(std::move(cells));
    }
  }
  return table;
}

Table read_table(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read table " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_tsv(buf.str());
}

void write_file(const std::filesystem::path& path, std::string_view contents) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void emit_table(const Table& table, const std::filesystem::path& dir, const std::string& stem) {
  write_file(dir / (stem + ".tsv"), to_tsv(table));
  write_file(dir / (stem + ".txt"), to_aligned_text(table));
}

Table report_table(const RunReport& report) {
  Table t;
  t.columns = {"iteration", "wall_seconds", "recall@20", "ndcg@20", "recall@50", "ndcg@50"};
  for (const auto& r : report.records) t.add_row(record_cells(r, true));
  return t;
}

Table metrics_table(const RunReport& report) {
  Table t;
  t.columns = {"iteration", "recall@20", "ndcg@20", "recall@50", "ndcg@50"};
  for (const auto& r : report.records) t.add_row(record_cells(r, false));
  return t;
}

void emit_report(const RunReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto timing = timing_summary(report);

  std::string summary = "#summary\tstrategy=" + report.strategy + "\titerations=" + std::to_string(report.iterations) +
                        "\twarmup=" + std::to_string(report.warmup_iterations) +
                        "\tbest_iteration=" + std::to_string(report.best_iteration) +
                        "\tbest_recall@50=" + format_number(report.best_recall50) +
                        "\tstop_reason=" + report.stop_reason;
  std::string test_line;
  if (report.test) {
    const auto& t = *report.test;
    test_line = "#test\trecall@20=" + format_number(t.recall20) + "\tndcg@20=" + format_number(t.ndcg20) +
                "\trecall@50=" + format_number(t.recall50) + "\tndcg@50=" + format_number(t.ndcg50) + "\n";
  }
  const std::string timing_line = "#timing\tconvergence_minutes=" + format_number(timing.convergence_minutes) +
                                  "\tconvergence_defined=" + (timing.convergence_defined ? "1" : "0") +
                                  "\tavg_seconds_per_1k=" + format_number(timing.avg_seconds_per_1k) + "\n";

  const auto full = report_table(report);
  write_file(dir / "report.tsv", to_tsv(full) + summary + "\n" + test_line + timing_line);
  write_file(dir / "report.txt", to_aligned_text(full) + summary + "\n" + test_line + timing_line);

  const auto metrics = metrics_table(report);
  write_file(dir / "metrics.tsv", to_tsv(metrics) + summary + "\n" + test_line);
  write_file(dir / "metrics.txt", to_aligned_text(metrics) + summary + "\n" + test_line);
}

Table per_user_table(const EvalResult& result, const Vocab& users) {
  Table t;
  t.columns = {"user_id"};
  for (const auto k : result.ks) {
    t.columns.push_back("recall@" + std::to_string(k));
    t.columns.push_back("ndcg@" + std::to_string(k));
  }
  for (std::size_t i = 0; i < result.users.size(); ++i) {
    std::vector<std::string> row{users.token(result.users[i])};
    for (std::size_t k = 0; k < result.ks.size(); ++k) {
      row.push_back(format_number(result.recall[k][i]));
      row.push_back(format_number(result.ndcg[k][i]));
    }
    t.add_row(std::move(row));
  }
  return t;
}

Table eval_summary_table(const EvalResult& result) {
  Table t;
  t.columns = {"k", "recall", "ndcg", "n_users", "n_skipped"};
  for (std::size_t k = 0; k < result.ks.size(); ++k) {
    t.add_row({std::to_string(result.ks[k]), format_number(result.mean_recall[k]), format_number(result.mean_ndcg[k]),
               std::to_string(result.n_evaluated()), std::to_string(result.n_skipped)});
  }
  return t;
}

Table drift_table(const std::vector<DriftRecord>& records) {
  Table t;
  t.columns = {"t", "delta_t", "D"};
  for (const auto& r : records) {
    t.add_row({std::to_string(r.iteration), std::to_string(r.delta), format_number(r.drift)});
  }
  return t;
}

Table lemma_table(const LemmaCheckReport& report) {
  Table t;
  t.columns = {"trial", "epsilon", "deviation", "C", "bound", "satisfied"};
  for (std::size_t i = 0; i < report.trials.size(); ++i) {
    const auto& tr = report.trials[i];
    t.add_row({std::to_string(i), format_number(tr.epsilon), format_number(tr.deviation),
               format_number(report.jacobian_bound), format_number(tr.bound), tr.satisfied ? "1" : "0"});
  }
  return t;
}

}  // namespace twotower
