#include "twotower/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>

#include "twotower/report.hpp"

namespace twotower {

const std::vector<SettingSpec>& known_settings() {
  static const std::vector<SettingSpec> specs = {
      {"data", "", "interaction TSV (user, item, timestamp)"},
      {"out", "", "output file (synth) or run directory"},
      {"checkpoint", "", "checkpoint for eval (default <out>/best.ckpt)"},
      {"seed", "0", "training seed"},
      {"split_seed", "7", "seed of the user split"},
      {"min_interactions", "5", "users with fewer interactions are dropped"},
      {"strategy", "cbns", "uniform | in_batch | mns | cbns"},
      {"bank_size", "2432", "CBNS memory bank capacity M"},
      {"warmup", "auto", "CBNS warm-up iterations (auto = 10% of max_iters)"},
      {"n_global", "auto", "global negatives (auto: uniform 1280, mns 1024)"},
      {"max_iters", "20000", "maximum training iterations"},
      {"batch_size", "128", "mini-batch size"},
      {"dim", "64", "embedding dimension"},
      {"hidden", "128", "tower hidden width"},
      {"user_embedding", "false", "add a user-ID embedding to the user tower"},
      {"lr", "0.001", "Adam base learning rate"},
      {"l2", "0", "l2 coefficient, one of 0, 1e-6, 1e-5, 1e-4, 1e-3"},
      {"patience", "20", "early-stopping patience in evaluations"},
      {"eval_every", "500", "iterations between validation evaluations"},
      {"max_history", "20", "most recent history items fed to the user tower"},
      {"lr_decay", "false", "multiply lr by 0.1 after half of max_iters"},
      {"time_budget", "0", "wall-clock budget in seconds (0 = none)"},
      {"seeds", "1,2,3", "seeds for sweeps"},
      {"strategies", "uniform,in_batch,mns,cbns", "strategies for sweep-strategies"},
      {"bank_multiples", "0,1,4,9,19", "bank sizes for sweep-bank, in multiples of batch_size"},
      {"parallel", "1", "concurrent sweep cells (>1 drops timing columns)"},
      {"probe_size", "512", "drift probe items"},
      {"deltas", "1,5,10", "drift intervals"},
      {"lemma_trials", "100", "gradient-deviation trials in the drift command"},
      {"lemma_scale", "0.1", "perturbation scale of those trials"},
      {"per_user_dump", "false", "eval: write per-user metrics"},
      {"bank_dump", "false", "train: dump final bank entries (item, q, norm)"},
      {"synth_users", "1000", "synth: users"},
      {"synth_items", "2000", "synth: items"},
      {"synth_clusters", "10", "synth: clusters"},
      {"synth_per_user", "30", "synth: interactions per user"},
      {"synth_popularity", "0.5", "synth: Zipf exponent of within-cluster popularity"},
  };
  return specs;
}

namespace {

bool is_known(const std::string& key) {
  const auto& specs = known_settings();
  return std::any_of(specs.begin(), specs.end(), [&](const SettingSpec& s) { return s.key == key; });
}

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

}  // namespace

std::map<std::string, std::string> parse_config_text(std::string_view text) {
  std::map<std::string, std::string> values;
  std::size_t start = 0;
  std::size_t line_no = 0;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    ++line_no;
    auto line = text.substr(start, end - start);
    start = end + 1;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    if (trim(line).empty()) {
      if (end == text.size()) break;
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    const auto key = trim(line.substr(0, eq));
    if (!is_known(key)) throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    values[key] = trim(line.substr(eq + 1));
    if (end == text.size()) break;
  }
  return values;
}

Settings Settings::resolve(const std::map<std::string, std::string>& file_values,
                           const std::map<std::string, std::string>& flag_values) {
  Settings s;
  for (const auto& spec : known_settings()) {
    s.values_[spec.key] = spec.default_value;
    s.origin_[spec.key] = "default";
  }
  for (const auto& [layer, values] : {std::pair{"file", &file_values}, std::pair{"flag", &flag_values}}) {
    for (const auto& [key, value] : *values) {
      if (!is_known(key)) throw ConfigError(std::string("unknown ") + layer + " setting '" + key + "'");
      s.values_[key] = value;
      s.origin_[key] = layer;
    }
  }
  return s;
}

const std::string& Settings::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown setting '" + key + "'");
  return it->second;
}

std::string Settings::origin(const std::string& key) const {
  const auto it = origin_.find(key);
  return it == origin_.end() ? "" : it->second;
}

std::int64_t Settings::get_int(const std::string& key) const {
  const auto& v = get(key);
  std::int64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return out;
}

std::size_t Settings::get_size(const std::string& key) const {
  const auto v = get_int(key);
  if (v < 0) throw ConfigError(key + ": must be non-negative");
  return static_cast<std::size_t>(v);
}

double Settings::get_double(const std::string& key) const {
  try {
    return parse_number(get(key));
  } catch (const DataError&) {
    throw ConfigError(key + ": expected a number, got '" + get(key) + "'");
  }
}

bool Settings::get_bool(const std::string& key) const {
  const auto& v = get(key);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

std::vector<std::string> Settings::get_list(const std::string& key) const {
  std::vector<std::string> out;
  const auto& v = get(key);
  std::size_t start = 0;
  while (start <= v.size()) {
    auto comma = v.find(',', start);
    if (comma == std::string::npos) comma = v.size();
    auto item = trim(std::string_view(v).substr(start, comma - start));
    if (!item.empty()) out.push_back(std::move(item));
    start = comma + 1;
  }
  return out;
}

TrainConfig to_train_config(const Settings& s) {
  TrainConfig c;
  c.strategy.kind = parse_strategy(s.get("strategy"));
  c.strategy.bank_capacity = s.get_size("bank_size");
  c.strategy.warmup_iterations = s.get("warmup") == "auto" ? -1 : static_cast<std::int64_t>(s.get_size("warmup"));
  c.strategy.n_global = s.get("n_global") == "auto" ? -1 : static_cast<std::int64_t>(s.get_size("n_global"));
  c.batch_size = s.get_size("batch_size");
  c.dim = s.get_size("dim");
  c.hidden = s.get_size("hidden");
  c.user_embedding = s.get_bool("user_embedding");
  c.lr = s.get_double("lr");
  c.l2 = s.get_double("l2");
  static constexpr double kL2Grid[] = {0.0, 1e-6, 1e-5, 1e-4, 1e-3};
  if (std::find(std::begin(kL2Grid), std::end(kL2Grid), c.l2) == std::end(kL2Grid)) {
    throw ConfigError("l2 must be one of 0, 1e-6, 1e-5, 1e-4, 1e-3");
  }
  c.patience = s.get_size("patience");
  c.eval_every = s.get_size("eval_every");
  c.max_iterations = s.get_size("max_iters");
  c.max_history = s.get_size("max_history");
  c.lr_step_decay = s.get_bool("lr_decay");
  c.time_budget_seconds = s.get_double("time_budget");
  c.seed = static_cast<std::uint64_t>(s.get_int("seed"));
  if (c.batch_size == 0 || c.dim == 0 || c.hidden == 0 || c.max_iterations == 0) {
    throw ConfigError("batch_size, dim, hidden and max_iters must be positive");
  }
  validate(c.strategy, c.batch_size);
  return c;
}

SplitConfig to_split_config(const Settings& s) {
  SplitConfig c;
  c.min_interactions = s.get_size("min_interactions");
  c.seed = static_cast<std::uint64_t>(s.get_int("split_seed"));
  return c;
}

SynthConfig to_synth_config(const Settings& s) {
  SynthConfig c;
  c.n_users = s.get_size("synth_users");
  c.n_items = s.get_size("synth_items");
  c.n_clusters = s.get_size("synth_clusters");
  c.interactions_per_user = s.get_size("synth_per_user");
  c.popularity_exponent = s.get_double("synth_popularity");
  c.seed = static_cast<std::uint64_t>(s.get_int("seed"));
  return c;
}

DriftConfig to_drift_config(const Settings& s) {
  DriftConfig c;
  c.deltas.clear();
  for (const auto& d : s.get_list("deltas")) {
    std::size_t v = 0;
    const auto [ptr, ec] = std::from_chars(d.data(), d.data() + d.size(), v);
    if (ec != std::errc{} || ptr != d.data() + d.size() || v == 0) throw ConfigError("deltas: bad interval '" + d + "'");
    c.deltas.push_back(v);
  }
  c.probe_size = s.get_size("probe_size");
  c.probe_seed = static_cast<std::uint64_t>(s.get_int("seed"));
  return c;
}

}  // namespace twotower
