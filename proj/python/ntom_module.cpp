// Python bindings: point-process math, attention softmax, simulation, and
// training and evaluation driven by the same flat config keys as the
// command-line tool.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <filesystem>
#include <string>
#include <vector>

#include "ntom/attention.hpp"
#include "ntom/point_process.hpp"
#include "ntom/run.hpp"
#include "ntom/simulator.hpp"
#include "ntom/training.hpp"

namespace py = pybind11;
using namespace ntom;

namespace {

KeyValues to_kv(const py::dict& settings) {
  KeyValues kv;
  kv.set_base_dir(std::filesystem::current_path());
  for (const auto& [k, v] : settings) {
    std::string value = py::isinstance<py::bool_>(v) ? (v.cast<bool>() ? "true" : "false")
                                                     : py::str(v).cast<std::string>();
    kv.set(py::str(k).cast<std::string>(), std::move(value));
  }
  return kv;
}

py::object from_json(const std::string& text) {
  return py::module_::import("json").attr("loads")(text);
}

py::dict post_dict(const Post& p) {
  py::dict d;
  d["user_id"] = p.user_id;
  d["timestamp"] = p.timestamp;
  d["text"] = p.text;
  d["stance"] = p.stance;
  d["neighbors"] = p.neighbors;
  if (p.topic >= 0) d["topic"] = p.topic;
  return d;
}

py::dict run_train(const py::dict& settings) {
  const RunConfig cfg = run_config_from(to_kv(settings));
  TrainResult result;
  std::string hash;
  {
    py::gil_scoped_release release;
    const PreparedData data = prepare_from(cfg);
    if (data.train.empty()) throw EmptyResultError("no training sequences after filtering");
    NtomModel model = build_model(cfg, data);
    result = train(model, data, cfg.train);
    if (cfg.checkpoint.has_parent_path()) std::filesystem::create_directories(cfg.checkpoint.parent_path());
    save_checkpoint(model, cfg.checkpoint);
    hash = file_hash(cfg.checkpoint);
  }
  py::list epochs;
  for (const EpochLog& e : result.epochs) {
    py::dict d;
    d["epoch"] = e.epoch;
    d["lr"] = e.lr;
    d["train_total"] = e.train.total;
    d["validation_total"] = e.validation.total;
    d["seconds"] = e.seconds;
    epochs.append(d);
  }
  py::dict out;
  out["epochs"] = epochs;
  out["best_epoch"] = result.best_epoch;
  out["diverged"] = result.diverged;
  out["stopped_early"] = result.stopped_early;
  out["checkpoint"] = cfg.checkpoint;
  out["checkpoint_hash"] = hash;
  return out;
}

py::object run_evaluate(const py::dict& settings) {
  const RunConfig cfg = run_config_from(to_kv(settings));
  std::string report;
  {
    py::gil_scoped_release release;
    NtomModel model = load_checkpoint(cfg.checkpoint);
    report = evaluation_report(cfg, model);
  }
  return from_json(report);
}

}  // namespace

PYBIND11_MODULE(_ntom, m) {
  m.doc() = "Neural temporal opinion model";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_ValueError);
  py::register_exception<EmptyResultError>(m, "EmptyResultError", PyExc_RuntimeError);

  m.def("intensity", &tpp::intensity, py::arg("a"), py::arg("w"), py::arg("t"),
        "exp(a + w t) with the exponent capped.");
  m.def("cumulative_intensity", &tpp::cumulative_intensity, py::arg("a"), py::arg("w"), py::arg("tau"));
  m.def("density", &tpp::density, py::arg("a"), py::arg("w"), py::arg("tau"));
  m.def("survival", &tpp::survival, py::arg("a"), py::arg("w"), py::arg("tau"));
  m.def(
      "expected_time",
      [](double a, double w, double horizon) {
        const tpp::Expectation e = tpp::expected_time(a, w, horizon);
        py::dict d;
        d["value"] = e.value;
        d["d_a"] = e.d_a;
        d["d_w"] = e.d_w;
        d["t_max"] = e.t_max;
        d["defective"] = e.defective;
        d["censored_mass"] = e.censored_mass;
        return d;
      },
      py::arg("a"), py::arg("w"), py::arg("horizon") = 1e3,
      "Expected time to the next event with its partial derivatives.");
  m.def("softmax", [](const std::vector<double>& scores) { return softmax(scores); }, py::arg("scores"));

  m.def(
      "simulate",
      [](const py::dict& settings, std::uint64_t seed, const std::filesystem::path& out_dir) {
        const SimConfig cfg = sim_config_from(to_kv(settings));
        SimResult r;
        {
          py::gil_scoped_release release;
          r = simulate_hawkes(cfg, seed);
          if (!out_dir.empty()) write_simulation(r, cfg, seed, out_dir);
        }
        py::list posts;
        for (const Post& p : r.posts) posts.append(post_dict(p));
        return posts;
      },
      py::arg("settings") = py::dict(), py::arg("seed") = 0, py::arg("out_dir") = std::filesystem::path(),
      "Simulates a dataset from simulation config keys; optionally writes it to out_dir.");
  m.def(
      "load_jsonl",
      [](const std::filesystem::path& path) {
        py::list posts;
        for (const Post& p : load_jsonl(path).posts) posts.append(post_dict(p));
        return posts;
      },
      py::arg("path"));

  m.def("train", &run_train, py::arg("settings"),
        "Trains a model from run config keys and writes the checkpoint.");
  m.def("evaluate", &run_evaluate, py::arg("settings"),
        "Scores the configured checkpoint on the held-out posts.");
  m.def(
      "topic_words",
      [](const std::filesystem::path& checkpoint, std::size_t n) {
        NtomModel model = load_checkpoint(checkpoint);
        std::vector<std::vector<std::string>> out;
        for (std::size_t k = 0; k < model.config().topics; ++k)
          out.push_back(model.topic.top_words(k, n, model.vocab()));
        return out;
      },
      py::arg("checkpoint"), py::arg("n") = 10, "Top words of every topic.");
}
