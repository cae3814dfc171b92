#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "cyclefed/checkpoint.hpp"
#include "cyclefed/experiment.hpp"

namespace py = pybind11;
using namespace cyclefed;

namespace {

using ConfigMap = std::map<std::string, std::string>;

exp::ExperimentConfig to_config(const ConfigMap& values, const std::string& preset) {
  exp::ExperimentConfig cfg = preset.empty() ? exp::ExperimentConfig{} : exp::preset(preset);
  for (const auto& [k, v] : values) cfg.set(k, v);
  cfg.validate();
  return cfg;
}

ConfigMap from_config(const exp::ExperimentConfig& cfg) {
  ConfigMap out;
  for (const auto& key : exp::config_keys()) out[key] = cfg.get(key);
  return out;
}

py::tuple to_arrays(const data::LabeledDataset& d) {
  py::array_t<float> pixels({static_cast<py::ssize_t>(d.size()),
                             static_cast<py::ssize_t>(d.rows),
                             static_cast<py::ssize_t>(d.cols)});
  std::copy(d.pixels.begin(), d.pixels.end(), pixels.mutable_data());
  py::array_t<std::uint8_t> labels(static_cast<py::ssize_t>(d.size()));
  std::copy(d.labels.begin(), d.labels.end(), labels.mutable_data());
  return py::make_tuple(pixels, labels);
}

data::Split to_split(const std::string& s) {
  if (s == "train") return data::Split::train;
  if (s == "test") return data::Split::test;
  throw std::invalid_argument("split must be train or test");
}

py::array_t<std::int64_t> to_index_array(const std::vector<std::size_t>& v) {
  py::array_t<std::int64_t> a(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), a.mutable_data());
  return a;
}

py::dict partition(py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast> labels,
                   const std::string& regime, int clients, int shards, int blocks,
                   double alpha, std::uint64_t seed, const std::string& imbalance) {
  data::LabeledDataset d;
  d.labels.assign(labels.data(), labels.data() + labels.size());
  part::PartitionPlan plan;
  plan.regime = part::parse_regime(regime);
  plan.clients = clients;
  plan.shards_per_client = shards;
  plan.blocks = blocks;
  plan.alpha = alpha;
  plan.imbalance = part::parse_imbalance_mode(imbalance);
  plan.seed = seed;
  const auto pop = part::make_population(d, plan);

  py::list out_clients;
  for (const auto& c : pop.clients) {
    py::dict cd;
    cd["id"] = c.id;
    cd["block"] = c.block;
    cd["train"] = to_index_array(c.train);
    cd["label_counts"] = c.label_counts;
    out_clients.append(cd);
  }
  py::dict out;
  out["regime"] = std::string(part::to_string(pop.regime));
  out["blocks"] = pop.blocks;
  out["block_labels"] = pop.block_labels;
  out["block_totals"] = pop.block_totals();
  out["clients"] = out_clients;
  std::ostringstream manifest;
  part::write_manifest(manifest, pop);
  out["manifest"] = manifest.str();
  return out;
}

std::string run(const ConfigMap& values, const std::string& preset, bool write_outputs) {
  const auto cfg = to_config(values, preset);
  exp::RunOptions opts;
  opts.write_outputs = write_outputs;
  exp::ExperimentResult result;
  {
    py::gil_scoped_release release;
    result = exp::run_experiment(cfg, opts);
  }
  std::ostringstream out;
  exp::write_summary_json(out, cfg, result);
  return out.str();
}

py::tuple load_checkpoint(const std::filesystem::path& path) {
  const auto model = nn::load_checkpoint_as<double>(path);
  py::array_t<double> params(static_cast<py::ssize_t>(model.params.size()));
  std::copy(model.params.begin(), model.params.end(), params.mutable_data());
  return py::make_tuple(model.spec.arch, params);
}

}  // namespace

PYBIND11_MODULE(_cyclefed, m) {
  m.doc() = "Federated averaging simulator with block-cyclic client sampling";

  m.def("param_count", [](const std::string& arch) { return nn::make_spec(arch).param_count(); },
        py::arg("arch"));

  m.def(
      "synth_dataset",
      [](int per_class, std::uint64_t seed, const std::string& split, int classes,
         double noise, double jitter) {
        return to_arrays(data::synth_dataset(classes, per_class, seed, to_split(split),
                                             {noise, jitter}));
      },
      py::arg("per_class"), py::arg("seed") = 1, py::arg("split") = "train",
      py::arg("classes") = 10, py::arg("noise") = 0.45, py::arg("jitter") = 0.75);

  m.def(
      "load_mnist",
      [](const std::filesystem::path& dir, const std::string& split) {
        return to_arrays(data::load_mnist(dir, to_split(split)));
      },
      py::arg("data_dir"), py::arg("split") = "train");

  m.def("partition", &partition, py::arg("labels"), py::arg("regime"), py::arg("clients"),
        py::arg("shards") = 2, py::arg("blocks") = 1, py::arg("alpha") = 1.0,
        py::arg("seed") = 0, py::arg("imbalance") = "target-ratio");

  m.def("config_keys", &exp::config_keys);
  m.def(
      "resolve_config",
      [](const ConfigMap& values, const std::string& preset) {
        return from_config(to_config(values, preset));
      },
      py::arg("values") = ConfigMap{}, py::arg("preset") = "");
  m.def(
      "expand_grid",
      [](const ConfigMap& values, const std::string& preset) {
        std::vector<std::string> ids;
        for (const auto& s : exp::expand_grid(to_config(values, preset))) ids.push_back(s.id);
        return ids;
      },
      py::arg("values") = ConfigMap{}, py::arg("preset") = "");
  m.def("run_experiment_json", &run, py::arg("values"), py::arg("preset") = "",
        py::arg("write_outputs") = true);

  m.def(
      "fairness",
      [](const std::vector<double>& acc, const std::vector<int>& blocks) {
        const auto r = metrics::fairness_from_accuracies(acc, blocks);
        py::dict d;
        d["accuracies"] = r.accuracies;
        d["clients"] = r.clients;
        d["mean"] = r.mean;
        d["variance"] = r.variance;
        return d;
      },
      py::arg("accuracies"), py::arg("blocks"));

  m.def("load_checkpoint", &load_checkpoint, py::arg("path"));

  py::register_exception<nn::CheckpointError>(m, "CheckpointError", PyExc_RuntimeError);
  py::register_exception<part::ManifestError>(m, "ManifestError", PyExc_RuntimeError);
}
