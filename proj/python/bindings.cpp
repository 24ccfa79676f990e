#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "twotower/config.hpp"
#include "twotower/data.hpp"
#include "twotower/drift.hpp"
#include "twotower/eval.hpp"
#include "twotower/loss.hpp"
#include "twotower/report.hpp"
#include "twotower/trainer.hpp"

namespace py = pybind11;
using namespace twotower;

namespace {

// Python values become setting strings, so the config layer does all validation.
std::map<std::string, std::string> to_settings(const py::dict& d) {
  std::map<std::string, std::string> out;
  for (const auto& [k, v] : d) {
    const auto key = py::str(k).cast<std::string>();
    if (py::isinstance<py::bool_>(v)) {
      out[key] = v.cast<bool>() ? "true" : "false";
    } else if (py::isinstance<py::float_>(v)) {
      out[key] = format_number(v.cast<double>());
    } else if (py::isinstance<py::list>(v) || py::isinstance<py::tuple>(v)) {
      std::string joined;
      for (const auto& item : v) joined += (joined.empty() ? "" : ",") + py::str(item).cast<std::string>();
      out[key] = joined;
    } else {
      out[key] = py::str(v).cast<std::string>();
    }
  }
  return out;
}

py::dict record_dict(const EvalRecord& r) {
  py::dict d;
  d["iteration"] = r.iteration;
  d["wall_seconds"] = r.wall_seconds;
  d["recall@20"] = r.recall20;
  d["ndcg@20"] = r.ndcg20;
  d["recall@50"] = r.recall50;
  d["ndcg@50"] = r.ndcg50;
  return d;
}

py::dict report_dict(const RunReport& r) {
  py::dict d;
  d["strategy"] = r.strategy;
  d["iterations"] = r.iterations;
  d["warmup_iterations"] = r.warmup_iterations;
  d["best_iteration"] = r.best_iteration;
  d["best_recall@50"] = r.best_recall50;
  d["stop_reason"] = r.stop_reason;
  d["losses"] = r.losses;
  py::list records;
  for (const auto& rec : r.records) records.append(record_dict(rec));
  d["records"] = records;
  d["test"] = r.test ? py::object(record_dict(*r.test)) : py::none();
  const auto timing = timing_summary(r);
  d["avg_seconds_per_1k"] = timing.avg_seconds_per_1k;
  d["convergence_minutes"] = timing.convergence_minutes;
  return d;
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "validation") return Split::validation;
  if (name == "test") return Split::test;
  throw ConfigError("split must be train, validation or test");
}

}  // namespace

PYBIND11_MODULE(_twotower, m) {
  m.doc() = "Two-tower retrieval training with uniform, in-batch, mixed and cross-batch negatives";

  auto base = py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_IOError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  py::class_<SplitDataset>(m, "Dataset")
      .def_static(
          "synthetic",
          [](const py::dict& settings) {
            const auto s = Settings::resolve({}, to_settings(settings));
            return build_splits(synth_generate(to_synth_config(s)), to_split_config(s));
          },
          py::arg("settings") = py::dict(),
          "Cluster-structured synthetic data; keys as in the CLI (synth_users, seed, ...).")
      .def_static(
          "load",
          [](const std::filesystem::path& path, const py::dict& settings) {
            const auto s = Settings::resolve({}, to_settings(settings));
            return build_splits(load_interactions(path), to_split_config(s));
          },
          py::arg("path"), py::arg("settings") = py::dict())
      .def_property_readonly("n_users", &SplitDataset::n_users)
      .def_property_readonly("n_items", &SplitDataset::n_items)
      .def_property_readonly("n_train_pairs", [](const SplitDataset& d) { return d.train_pairs.size(); })
      .def_property_readonly("n_validation_users", [](const SplitDataset& d) { return d.validation.size(); })
      .def_property_readonly("n_test_users", [](const SplitDataset& d) { return d.test.size(); });

  py::class_<ModelParams>(m, "Model")
      .def_static("load", &load_checkpoint, py::arg("path"))
      .def("save", [](const ModelParams& p, const std::filesystem::path& path) { save_checkpoint(path, p); })
      .def_property_readonly("dim", &ModelParams::dim)
      .def_property_readonly("n_items", &ModelParams::n_items)
      .def("item_vectors",
           [](const ModelParams& p, const std::vector<ItemIndex>& items) { return item_forward(p, items).first; },
           py::arg("items"))
      .def(
          "user_vectors",
          [](const ModelParams& p, const std::vector<std::vector<ItemIndex>>& histories,
             std::vector<UserIndex> users) {
            if (users.empty()) users.assign(histories.size(), 0);
            return user_forward(p, histories, users).first;
          },
          py::arg("histories"), py::arg("users") = std::vector<UserIndex>{});

  m.def(
      "train",
      [](const SplitDataset& dataset, const py::dict& settings) {
        const auto config = to_train_config(Settings::resolve({}, to_settings(settings)));
        TrainResult result;
        {
          py::gil_scoped_release release;
          result = train(config, dataset);
        }
        return py::make_tuple(report_dict(result.report), result.best_params);
      },
      py::arg("dataset"), py::arg("settings") = py::dict(),
      "Returns (report, best_model). Settings use the CLI keys (strategy, bank_size, max_iters, ...).");

  m.def(
      "evaluate",
      [](const ModelParams& params, const SplitDataset& dataset, const std::string& split, std::size_t max_history) {
        const auto r = evaluate(params, dataset, parse_split(split), {}, max_history);
        py::dict d;
        for (std::size_t k = 0; k < r.ks.size(); ++k) {
          d[py::str("recall@" + std::to_string(r.ks[k]))] = r.mean_recall[k];
          d[py::str("ndcg@" + std::to_string(r.ks[k]))] = r.mean_ndcg[k];
        }
        d["n_users"] = r.n_evaluated();
        return d;
      },
      py::arg("model"), py::arg("dataset"), py::arg("split") = "test", py::arg("max_history") = 20);

  m.def(
      "recall_at_k",
      [](const std::vector<ItemIndex>& retrieved, const std::vector<ItemIndex>& relevant, std::size_t k) {
        return recall_at_k(retrieved, relevant, k);
      },
      py::arg("retrieved"), py::arg("relevant"), py::arg("k"));
  m.def(
      "ndcg_at_k",
      [](const std::vector<ItemIndex>& retrieved, const std::vector<ItemIndex>& relevant, std::size_t k) {
        return ndcg_at_k(retrieved, relevant, k);
      },
      py::arg("retrieved"), py::arg("relevant"), py::arg("k"));
  m.def(
      "topk_retrieve",
      [](const std::vector<double>& user, const Matrix& items, std::size_t k, const std::vector<ItemIndex>& exclude) {
        return topk_retrieve(user, items, k, exclude);
      },
      py::arg("user"), py::arg("items"), py::arg("k"), py::arg("exclude") = std::vector<ItemIndex>{});

  m.def(
      "corrected_logit",
      [](const std::vector<double>& u, const std::vector<double>& v, double q) { return corrected_logit(u, v, q); },
      py::arg("u"), py::arg("v"), py::arg("q"));
  m.def(
      "full_softmax_oracle",
      [](const Matrix& users, const Matrix& items, const std::vector<ItemIndex>& positives) {
        return full_softmax_oracle(users, items, positives);
      },
      py::arg("users"), py::arg("items"), py::arg("positives"));
  m.def(
      "all_items_sampled_softmax",
      [](const Matrix& users, const Matrix& items, const std::vector<ItemIndex>& positives) {
        const auto n = static_cast<std::size_t>(items.rows());
        NegativeBlock block;
        block.source = NegativeSource::global;
        for (std::size_t i = 0; i < n; ++i) block.items.push_back(static_cast<ItemIndex>(i));
        block.probs.assign(n, 1.0 / static_cast<double>(n));
        block.embeddings = {items.data(), static_cast<std::size_t>(items.size())};
        block.live = true;
        NegativeSet set;
        set.blocks.push_back(block);
        Matrix v(static_cast<Eigen::Index>(positives.size()), items.cols());
        for (std::size_t r = 0; r < positives.size(); ++r) v.row(static_cast<Eigen::Index>(r)) = items.row(positives.at(r));
        const std::vector<double> pq(positives.size(), 1.0 / static_cast<double>(n));
        return sampled_softmax_ce(users, v, positives, pq, set).loss;
      },
      py::arg("users"), py::arg("items"), py::arg("positives"),
      "Corrected sampled softmax with every item as a negative under uniform q.");
  m.def("feature_drift", &feature_drift, py::arg("snapshot"), py::arg("previous"));

  m.def(
      "settings_defaults",
      [] {
        py::dict d;
        for (const auto& s : known_settings()) d[py::str(s.key)] = s.default_value;
        return d;
      },
      "Every accepted setting key with its default.");
  (void)base;
}
