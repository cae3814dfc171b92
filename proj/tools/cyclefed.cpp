#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>

#include "cyclefed/checkpoint.hpp"
#include "cyclefed/experiment.hpp"
#include "cyclefed/metrics.hpp"

namespace {

using namespace cyclefed;

struct Common {
  std::string preset;
  std::string config_path;
  std::map<std::string, std::string> overrides;
};

void add_common(CLI::App* app, Common& c, bool config_positional) {
  app->add_option("--preset", c.preset, "Start from a built-in preset")
      ->check(CLI::IsMember({"paper", "desk"}));
  if (config_positional)
    app->add_option("config", c.config_path, "Config file (key = value lines)");
  else
    app->add_option("--config", c.config_path, "Config file (key = value lines)");
  for (const auto& key : exp::config_keys()) {
    std::string names = "--" + key;
    if (key.find('_') != std::string::npos) {
      std::string dashed = key;
      std::replace(dashed.begin(), dashed.end(), '_', '-');
      names += ",--" + dashed;
    }
    app->add_option_function<std::string>(
           names, [&c, key](const std::string& v) { c.overrides[key] = v; },
           "Override config key '" + key + "'")
        ->group("Config keys");
  }
}

exp::ExperimentConfig resolve(const Common& c) {
  exp::ExperimentConfig cfg = c.preset.empty() ? exp::ExperimentConfig{} : exp::preset(c.preset);
  if (!c.config_path.empty()) cfg = exp::load_config(c.config_path, cfg);
  for (const auto& [k, v] : c.overrides) cfg.set(k, v);
  cfg.validate();
  return cfg;
}

int cmd_run(const Common& c) {
  const auto cfg = resolve(c);
  exp::RunOptions opts;
  opts.progress = &std::cerr;
  const auto specs = exp::expand_grid(cfg);
  std::cerr << "running " << specs.size() << " runs into " << cfg.out << '\n';
  const auto result = exp::run_experiment(cfg, opts);
  std::cerr << "done in " << result.seconds << " s, " << result.failures
            << " failed\n";
  return result.failures == 0 ? 0 : 1;
}

int cmd_partition(const Common& c, const std::string& run, const std::string& output) {
  const auto cfg = resolve(c);
  const auto specs = exp::expand_grid(cfg);
  const exp::RunSpec* spec = &specs.front();
  if (!run.empty()) {
    spec = nullptr;
    for (const auto& s : specs)
      if (s.id == run) spec = &s;
    if (!spec) throw std::invalid_argument("no run named '" + run + "' in the grid");
  }
  const auto data = exp::load_datasets(cfg);
  part::PartitionPlan plan;
  plan.regime = spec->regime;
  plan.clients = cfg.clients;
  plan.shards_per_client = cfg.shards;
  plan.blocks = spec->blocks;
  plan.alpha = spec->alpha;
  plan.imbalance = cfg.imbalance_mode;
  plan.seed = derive_seed(spec->seed, Stream::partition);
  auto pop = part::make_population(data.train, plan);
  part::build_holdouts(pop, data.test, cfg.holdout, derive_seed(spec->seed, Stream::holdout));
  pop.metadata["dataset"] = cfg.dataset;
  pop.metadata["run"] = spec->id;
  if (output.empty() || output == "-") {
    part::write_manifest(std::cout, pop);
  } else {
    std::ofstream out(output);
    if (!out) throw std::runtime_error("cannot write " + output);
    part::write_manifest(out, pop);
    std::cerr << "wrote " << output << " (" << spec->id << ")\n";
  }
  return 0;
}

template <class Real>
nlohmann::json evaluate_model(const nn::ModelState<Real>& model,
                              const part::FederatedPopulation& pop,
                              const exp::Datasets& data, int last_block, int threads) {
  for (const auto& cl : pop.clients)
    for (auto i : cl.holdout)
      if (i >= data.test.size())
        throw std::invalid_argument("manifest holdout index outside the test split");
  const auto ev = data::evaluate_on(model, data.test, pop.union_holdout());
  const auto fair = metrics::fairness_report(model, pop, data.test, threads);
  nlohmann::json j = {{"accuracy", ev.accuracy},
                      {"mean_loss", ev.mean_loss},
                      {"fairness_mean", fair.mean},
                      {"fairness_variance", fair.variance},
                      {"client_accuracy", fair.accuracies}};
  if (pop.blocks > 1) {
    const auto f = metrics::forgetting_profile(ev.confusion, pop.block_labels, last_block);
    j["last_block"] = last_block;
    j["block_recall"] = f.recall;
    j["last_block_share"] = f.last_block_share;
  }
  return j;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& manifest,
             int last_block) {
  const auto cfg = resolve(c);
  std::ifstream in(manifest);
  if (!in) throw std::runtime_error("cannot read " + manifest);
  const auto pop = part::read_manifest(in);
  const auto data = exp::load_datasets(cfg);
  if (last_block < 0) last_block = (cfg.rounds - 1) % std::max(pop.blocks, 1);
  const auto model = nn::load_checkpoint(checkpoint);
  const auto j = std::visit(
      [&](const auto& m) { return evaluate_model(m, pop, data, last_block, cfg.threads); },
      model);
  std::cout << j.dump(2) << '\n';
  return 0;
}

int cmd_gridcheck(const Common& c) {
  const auto cfg = resolve(c);
  const auto specs = exp::expand_grid(cfg);
  std::cout << specs.size() << " runs\n";
  for (const auto& s : specs) std::cout << s.id << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated averaging simulator with block-cyclic client sampling"};
  app.require_subcommand(1);

  Common run_opts, part_opts, eval_opts, check_opts;
  auto* run = app.add_subcommand("run", "Run an experiment grid and write the output tree");
  add_common(run, run_opts, true);

  auto* partition = app.add_subcommand("partition", "Write the partition manifest of one run");
  add_common(partition, part_opts, true);
  std::string run_id, manifest_out;
  partition->add_option("--run", run_id, "Run id from the grid (default: first run)");
  partition->add_option("-o,--output", manifest_out, "Manifest path (default: stdout)");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest's holdouts");
  add_common(eval, eval_opts, false);
  std::string checkpoint, manifest;
  int last_block = -1;
  eval->add_option("checkpoint", checkpoint, "Model checkpoint")->required();
  eval->add_option("manifest", manifest, "Partition manifest")->required();
  eval->add_option("--last-block", last_block, "Block trained in the final round");

  auto* gridcheck = app.add_subcommand("gridcheck", "Validate a config and list its runs");
  add_common(gridcheck, check_opts, true);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*run) return cmd_run(run_opts);
    if (*partition) return cmd_partition(part_opts, run_id, manifest_out);
    if (*eval) return cmd_eval(eval_opts, checkpoint, manifest, last_block);
    if (*gridcheck) return cmd_gridcheck(check_opts);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
