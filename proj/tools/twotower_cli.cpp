// Command-line entry point: synth, train, eval, sweep-strategies, sweep-bank, drift.
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "twotower/config.hpp"
#include "twotower/data.hpp"
#include "twotower/drift.hpp"
#include "twotower/eval.hpp"
#include "twotower/experiments.hpp"
#include "twotower/report.hpp"
#include "twotower/trainer.hpp"

namespace fs = std::filesystem;
using namespace twotower;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfigFailure = 2, kDataFailure = 3, kNumericFailure = 4 };

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

fs::path require_path(const Settings& s, const std::string& key) {
  const auto& v = s.get(key);
  if (v.empty()) throw ConfigError("--" + key + " is required for this command");
  return v;
}

SplitDataset load_dataset(const Settings& s) {
  const auto rows = load_interactions(require_path(s, "data"));
  return build_splits(rows, to_split_config(s));
}

std::vector<std::uint64_t> seeds_of(const Settings& s) {
  std::vector<std::uint64_t> seeds;
  for (const auto& v : s.get_list("seeds")) seeds.push_back(static_cast<std::uint64_t>(parse_number(v)));
  if (seeds.empty()) throw ConfigError("seeds: at least one seed required");
  return seeds;
}

int cmd_synth(const Settings& s) {
  const auto out = require_path(s, "out");
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  const auto rows = synth_generate(to_synth_config(s));
  save_interactions(out, rows);
  std::cout << "wrote " << rows.size() << " interactions to " << out.string() << "\n";
  return kOk;
}

int cmd_train(const Settings& s) {
  const auto ds = load_dataset(s);
  const auto out = require_path(s, "out");
  fs::create_directories(out);
  save_split_manifest(out / "split.tsv", ds);
  auto config = to_train_config(s);
  config.run_dir = out;
  TrainHooks hooks;
  if (s.get_bool("bank_dump")) {
    hooks.on_finish = [&](const MemoryBank& bank) {
      std::ofstream dump(out / "bank.tsv");
      bank.dump(dump);
    };
  }
  const auto result = train(config, ds, hooks);
  emit_report(result.report, out);
  const auto timing = timing_summary(result.report);
  std::cout << "strategy " << result.report.strategy << ": " << result.report.iterations << " iterations ("
            << result.report.stop_reason << "), best validation recall@50 " << result.report.best_recall50
            << " at iteration " << result.report.best_iteration << "\n"
            << "avg seconds per 1k batches " << timing.avg_seconds_per_1k << ", convergence "
            << timing.convergence_minutes << " min" << (timing.convergence_defined ? "" : " (no eval ran)") << "\n";
  if (result.report.test) {
    const auto& t = *result.report.test;
    std::cout << "test recall@20 " << t.recall20 << " ndcg@20 " << t.ndcg20 << " recall@50 " << t.recall50
              << " ndcg@50 " << t.ndcg50 << "\n";
  }
  return kOk;
}

int cmd_eval(const Settings& s) {
  const auto ds = load_dataset(s);
  const auto out = require_path(s, "out");
  const fs::path checkpoint = s.get("checkpoint").empty() ? out / "best.ckpt" : fs::path(s.get("checkpoint"));
  const auto params = load_checkpoint(checkpoint);
  if (params.n_items() != ds.n_items()) throw DataError("checkpoint item count does not match the dataset");
  const auto result = evaluate(params, ds, Split::test, {}, s.get_size("max_history"));
  fs::create_directories(out);
  emit_table(eval_summary_table(result), out, "eval");
  if (s.get_bool("per_user_dump")) emit_table(per_user_table(result, ds.users), out, "eval_per_user");
  std::cout << to_aligned_text(eval_summary_table(result));
  return kOk;
}

int cmd_sweep_strategies(const Settings& s) {
  const auto ds = load_dataset(s);
  const auto out = require_path(s, "out");
  fs::create_directories(out);
  std::vector<StrategyKind> strategies;
  for (const auto& name : s.get_list("strategies")) strategies.push_back(parse_strategy(name));
  const auto tables = run_sweep_strategies(to_train_config(s), ds, strategies, seeds_of(s),
                                           {out, s.get_size("parallel")});
  emit_table(tables.full, out, "table");
  emit_table(tables.metrics, out, "metrics");
  std::cout << to_aligned_text(tables.full);
  for (const auto& c : tables.cells) {
    if (!c.ok) std::cerr << "cell " << c.strategy << " seed " << c.seed << " failed: " << c.error << "\n";
  }
  return kOk;
}

int cmd_sweep_bank(const Settings& s) {
  const auto ds = load_dataset(s);
  const auto out = require_path(s, "out");
  fs::create_directories(out);
  const auto base = to_train_config(s);
  std::vector<std::size_t> multiples;
  for (const auto& m : s.get_list("bank_multiples")) multiples.push_back(static_cast<std::size_t>(parse_number(m)));
  const auto sizes = bank_sizes_from_multiples(multiples, base.batch_size);
  const auto tables = run_sweep_bank(base, ds, sizes, seeds_of(s), {out, s.get_size("parallel")});
  emit_table(tables.full, out, "table");
  emit_table(tables.metrics, out, "metrics");
  std::cout << to_aligned_text(tables.full);
  return kOk;
}

int cmd_drift(const Settings& s) {
  const auto ds = load_dataset(s);
  const auto out = require_path(s, "out");
  fs::create_directories(out);
  auto config = to_train_config(s);
  const auto drift = drift_experiment(config, ds, to_drift_config(s));
  emit_table(drift_table(drift.records), out, "drift");

  // Gradient-deviation bound on the trained user tower, first test user as input.
  LemmaInput input;
  if (!ds.test.empty()) {
    const auto& eu = ds.test.front();
    const auto take = std::min<std::size_t>(eu.fold_in.size(), config.max_history);
    input.history.assign(eu.fold_in.end() - static_cast<std::ptrdiff_t>(take), eu.fold_in.end());
    input.user = eu.user;
    input.item = eu.targets.front();
  }
  Rng rng(mix_seed(config.seed, 0x1e33a));
  const auto lemma = lemma_check(drift.final_params, input, s.get_double("lemma_scale"), s.get_size("lemma_trials"), rng);
  emit_table(lemma_table(lemma), out, "lemma");
  std::size_t held = 0;
  for (const auto& t : lemma.trials) held += t.satisfied ? 1 : 0;
  std::cout << "drift records: " << drift.records.size() << "\n"
            << "measured C = " << lemma.jacobian_bound << " over " << lemma.n_parameters << " parameters; bound held in "
            << held << "/" << lemma.trials.size() << " trials\n";
  return lemma.all_satisfied() ? kOk : kNumericFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-tower recommender training with uniform, in-batch, mixed and cross-batch negative sampling"};
  std::string command;
  app.add_option("command", command, "synth | train | eval | sweep-strategies | sweep-bank | drift")
      ->required()
      ->check(CLI::IsMember({"synth", "train", "eval", "sweep-strategies", "sweep-bank", "drift"}));

  std::string config_path;
  app.add_option("--config", config_path, "flat key = value config file");

  // flag name -> setting key
  const std::vector<std::pair<std::string, std::string>> flag_keys = {
      {"--data", "data"},           {"--out", "out"},               {"--seed", "seed"},
      {"--strategy", "strategy"},   {"--bank-size", "bank_size"},   {"--warmup", "warmup"},
      {"--max-iters", "max_iters"}, {"--batch-size", "batch_size"}, {"--dim", "dim"},
      {"--lr", "lr"},               {"--l2", "l2"},                 {"--patience", "patience"},
      {"--checkpoint", "checkpoint"}, {"--eval-every", "eval_every"}, {"--seeds", "seeds"},
      {"--hidden", "hidden"}};
  std::map<std::string, std::string> flag_values;
  std::vector<CLI::Option*> flag_options;
  for (const auto& [flag, key] : flag_keys) {
    flag_options.push_back(app.add_option(flag, flag_values[key], "sets '" + key + "'"));
  }
  std::vector<std::string> extra;
  app.add_option("--set", extra, "any other setting as key=value (repeatable)");
  bool list_settings = false;
  app.add_flag("--list-settings", list_settings, "print every setting with its default and exit");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kConfigFailure;
  }

  try {
    std::map<std::string, std::string> flags;
    for (std::size_t i = 0; i < flag_keys.size(); ++i) {
      if (flag_options[i]->count() > 0) flags[flag_keys[i].second] = flag_values[flag_keys[i].second];
    }
    for (const auto& kv : extra) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      flags[kv.substr(0, eq)] = kv.substr(eq + 1);
    }
    const auto file_values = config_path.empty() ? std::map<std::string, std::string>{}
                                                 : parse_config_text(read_text(config_path));
    const auto settings = Settings::resolve(file_values, flags);
    if (list_settings) {
      for (const auto& spec : known_settings()) {
        std::cout << spec.key << " = " << settings.get(spec.key) << "  # " << spec.help << "\n";
      }
      return kOk;
    }

    if (command == "synth") return cmd_synth(settings);
    if (command == "train") return cmd_train(settings);
    if (command == "eval") return cmd_eval(settings);
    if (command == "sweep-strategies") return cmd_sweep_strategies(settings);
    if (command == "sweep-bank") return cmd_sweep_bank(settings);
    if (command == "drift") return cmd_drift(settings);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigFailure;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kDataFailure;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumericFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}
