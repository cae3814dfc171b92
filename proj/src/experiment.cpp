#include "cyclefed/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "cyclefed/checkpoint.hpp"
#include "cyclefed/rng.hpp"

namespace cyclefed::exp {

namespace {

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string fmt_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double d = 0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty())
    throw std::invalid_argument("bad number for " + key + ": '" + v + "'");
  return d;
}

long long to_int(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  long long i = 0;
  try {
    i = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty())
    throw std::invalid_argument("bad integer for " + key + ": '" + v + "'");
  return i;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  std::uint64_t i = 0;
  try {
    if (!v.empty() && v[0] != '-') i = std::stoull(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty())
    throw std::invalid_argument("bad unsigned integer for " + key + ": '" + v + "'");
  return i;
}

template <class T, class F>
std::vector<T> parse_list(const std::string& key, const std::string& v, F conv) {
  std::vector<T> out;
  for (const auto& item : split_list(v)) out.push_back(static_cast<T>(conv(key, item)));
  if (out.empty()) throw std::invalid_argument(key + " must not be empty");
  return out;
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ",";
    if constexpr (std::is_floating_point_v<T>)
      s += fmt_g(v[i]);
    else
      s += std::to_string(v[i]);
  }
  return s;
}

struct Field {
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define CYCLEFED_INT_FIELD(name, member)                                      \
  {name,                                                                      \
   {[](ExperimentConfig& c, const std::string& v) {                           \
      c.member = static_cast<int>(to_int(name, v));                           \
    },                                                                        \
    [](const ExperimentConfig& c) { return std::to_string(c.member); }}}
#define CYCLEFED_REAL_FIELD(name, member)                                     \
  {name,                                                                      \
   {[](ExperimentConfig& c, const std::string& v) {                           \
      c.member = to_double(name, v);                                          \
    },                                                                        \
    [](const ExperimentConfig& c) { return fmt_g(c.member); }}}
#define CYCLEFED_STR_FIELD(name, member)                                      \
  {name,                                                                      \
   {[](ExperimentConfig& c, const std::string& v) { c.member = v; },          \
    [](const ExperimentConfig& c) { return c.member; }}}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      CYCLEFED_STR_FIELD("dataset", dataset),
      CYCLEFED_STR_FIELD("model", model),
      CYCLEFED_INT_FIELD("K", clients),
      {"C",
       {[](ExperimentConfig& c, const std::string& v) {
          c.fractions = parse_list<double>("C", v, to_double);
        },
        [](const ExperimentConfig& c) { return join(c.fractions); }}},
      {"G",
       {[](ExperimentConfig& c, const std::string& v) {
          c.blocks = parse_list<int>("G", v, to_int);
        },
        [](const ExperimentConfig& c) { return join(c.blocks); }}},
      {"alpha",
       {[](ExperimentConfig& c, const std::string& v) {
          c.alphas = parse_list<double>("alpha", v, to_double);
        },
        [](const ExperimentConfig& c) { return join(c.alphas); }}},
      {"eta",
       {[](ExperimentConfig& c, const std::string& v) {
          c.learning_rates = parse_list<double>("eta", v, to_double);
        },
        [](const ExperimentConfig& c) { return join(c.learning_rates); }}},
      CYCLEFED_INT_FIELD("B", batch_size),
      CYCLEFED_INT_FIELD("E", epochs),
      CYCLEFED_STR_FIELD("budget", budget),
      CYCLEFED_INT_FIELD("T", rounds),
      CYCLEFED_REAL_FIELD("delta", delta),
      CYCLEFED_INT_FIELD("patience", patience),
      CYCLEFED_INT_FIELD("cap", cap),
      CYCLEFED_INT_FIELD("s", shards),
      CYCLEFED_REAL_FIELD("beta", momentum),
      CYCLEFED_INT_FIELD("reps", replicates),
      {"seed",
       {[](ExperimentConfig& c, const std::string& v) { c.seed = to_u64("seed", v); },
        [](const ExperimentConfig& c) { return std::to_string(c.seed); }}},
      CYCLEFED_INT_FIELD("eval_every", eval_every),
      CYCLEFED_STR_FIELD("out", out),
      {"precision",
       {[](ExperimentConfig& c, const std::string& v) {
          c.precision = nn::parse_precision(v);
        },
        [](const ExperimentConfig& c) { return std::string(nn::to_string(c.precision)); }}},
      CYCLEFED_STR_FIELD("data_dir", data_dir),
      CYCLEFED_INT_FIELD("holdout", holdout),
      {"g1_regime",
       {[](ExperimentConfig& c, const std::string& v) {
          c.g1_regime = part::parse_regime(v);
          if (c.g1_regime == part::Regime::block)
            throw std::invalid_argument("g1_regime must be iid or shards");
        },
        [](const ExperimentConfig& c) { return std::string(part::to_string(c.g1_regime)); }}},
      CYCLEFED_INT_FIELD("synth_per_class", synth_per_class),
      CYCLEFED_INT_FIELD("synth_test_per_class", synth_test_per_class),
      CYCLEFED_REAL_FIELD("synth_noise", synth_noise),
      CYCLEFED_REAL_FIELD("synth_jitter", synth_jitter),
      {"data_seed",
       {[](ExperimentConfig& c, const std::string& v) {
          c.data_seed = to_u64("data_seed", v);
        },
        [](const ExperimentConfig& c) { return std::to_string(c.data_seed); }}},
      CYCLEFED_REAL_FIELD("mnist_fraction", mnist_fraction),
      {"imbalance_mode",
       {[](ExperimentConfig& c, const std::string& v) {
          c.imbalance_mode = part::parse_imbalance_mode(v);
        },
        [](const ExperimentConfig& c) {
          return std::string(part::to_string(c.imbalance_mode));
        }}},
      CYCLEFED_INT_FIELD("threads", threads),
      CYCLEFED_INT_FIELD("jobs", jobs),
  };
  return table;
}

#undef CYCLEFED_INT_FIELD
#undef CYCLEFED_REAL_FIELD
#undef CYCLEFED_STR_FIELD

const Field& field(const std::string& key) {
  for (const auto& [name, f] : fields())
    if (name == key) return f;
  throw std::invalid_argument("unknown config key '" + key + "'");
}

std::uint64_t cell_hash(int G, double C, double alpha, double eta) {
  std::uint64_t h = mix64(static_cast<std::uint64_t>(G));
  for (double v : {C, alpha, eta}) h = mix64(h ^ std::bit_cast<std::uint64_t>(v));
  return h;
}

std::string run_id(const RunSpec& s) {
  return "G" + std::to_string(s.blocks) + "_C" + fmt_g(s.fraction) + "_a" +
         fmt_g(s.alpha) + "_lr" + fmt_g(s.learning_rate) + "_r" +
         std::to_string(s.replicate);
}

template <class Real>
RunOutcome run_typed(const RunSpec& spec, const ExperimentConfig& cfg,
                     const Datasets& data,
                     const std::optional<std::filesystem::path>& dir) {
  const auto start = std::chrono::steady_clock::now();
  RunOutcome out;
  out.spec = spec;

  part::PartitionPlan plan;
  plan.regime = spec.regime;
  plan.clients = cfg.clients;
  plan.shards_per_client = cfg.shards;
  plan.blocks = spec.blocks;
  plan.alpha = spec.alpha;
  plan.imbalance = cfg.imbalance_mode;
  plan.seed = derive_seed(spec.seed, Stream::partition);
  auto pop = part::make_population(data.train, plan);
  part::build_holdouts(pop, data.test, cfg.holdout, derive_seed(spec.seed, Stream::holdout));
  pop.metadata["dataset"] = cfg.dataset;
  pop.metadata["run"] = spec.id;
  pop.metadata["train_size"] = std::to_string(data.train.size());
  pop.metadata["test_size"] = std::to_string(data.test.size());
  if (cfg.dataset == "synthetic") {
    pop.metadata["synth_per_class"] = std::to_string(cfg.synth_per_class);
    pop.metadata["synth_test_per_class"] = std::to_string(cfg.synth_test_per_class);
    pop.metadata["data_seed"] = std::to_string(cfg.data_seed);
    pop.metadata["synth_noise"] = fmt_g(cfg.synth_noise);
    pop.metadata["synth_jitter"] = fmt_g(cfg.synth_jitter);
  } else if (cfg.mnist_fraction < 1.0) {
    pop.metadata["mnist_fraction"] = fmt_g(cfg.mnist_fraction);
    pop.metadata["data_seed"] = std::to_string(cfg.data_seed);
  }

  fed::FedRunState<Real> state;
  state.model = nn::build_model<Real>(nn::make_spec(cfg.model),
                                      derive_seed(spec.seed, Stream::init));
  state.schedule = fed::default_schedule(pop, spec.fraction);
  state.population = &pop;
  state.train = &data.train;
  state.test = &data.test;
  state.local = {cfg.epochs, cfg.batch_size, spec.learning_rate, cfg.momentum};
  state.seed = spec.seed;
  state.threads = cfg.threads;

  const auto budget = cfg.budget == "converge"
                          ? fed::Budget::until_convergence(cfg.delta, cfg.patience, cfg.cap)
                          : fed::Budget::fixed_rounds(cfg.rounds);

  std::ofstream rounds_csv;
  if (dir) {
    std::filesystem::create_directories(*dir);
    std::ofstream manifest(*dir / "manifest.txt");
    part::write_manifest(manifest, pop);
    rounds_csv.open(*dir / "rounds.csv");
    fed::write_rounds_header(rounds_csv);
  }
  auto summary = fed::run_rounds(state, budget, cfg.eval_every,
                                 [&](const fed::RoundRecord& r) {
                                   if (rounds_csv.is_open()) fed::write_round(rounds_csv, r);
                                 });

  const auto holdout = pop.union_holdout();
  const auto ev = data::evaluate_on(state.model, data.test, holdout);
  out.accuracy = ev.accuracy;
  out.confusion = ev.confusion;
  out.initial_accuracy = summary.initial_accuracy;
  out.best_accuracy = summary.best_accuracy;
  out.converged = summary.converged;
  out.rounds_run = static_cast<int>(summary.rounds.size());
  out.fairness = metrics::fairness_report(state.model, pop, data.test, cfg.threads);
  if (pop.blocks > 1) {
    out.last_block = summary.rounds.back().block;
    out.forgetting = metrics::forgetting_profile(ev.confusion, pop.block_labels, out.last_block);
  }
  const auto [first, last] = oscillation_window(out.rounds_run);
  if (last > first) out.oscillation = metrics::oscillation_index(summary.rounds, first, last).index;
  out.rounds = std::move(summary.rounds);

  if (dir) {
    nn::save_checkpoint(*dir / "model.ckpt", state.model);
    std::ofstream fairness(*dir / "fairness.csv");
    metrics::write_fairness_csv(fairness, out.fairness);
    std::ofstream confusion(*dir / "confusion.csv");
    metrics::write_confusion_csv(confusion, out.confusion);
  }
  out.ok = true;
  out.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

nlohmann::json marginals_json(const std::vector<metrics::Marginal>& m,
                              const char* key) {
  auto arr = nlohmann::json::array();
  for (const auto& x : m)
    arr.push_back({{"G", x.blocks}, {key, x.key}, {"mean", x.mean}, {"cells", x.cells}});
  return arr;
}

}  // namespace

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  field(key).set(*this, trim(value));
}

std::string ExperimentConfig::get(const std::string& key) const {
  return field(key).get(*this);
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& [name, f] : fields()) k.push_back(name);
    return k;
  }();
  return keys;
}

void ExperimentConfig::validate() const {
  if (dataset != "mnist" && dataset != "synthetic")
    throw std::invalid_argument("dataset must be mnist or synthetic");
  nn::make_spec(model);
  if (clients < 1) throw std::invalid_argument("K must be >= 1");
  for (double c : fractions)
    if (!(c > 0.0 && c <= 1.0)) throw std::invalid_argument("C must lie in (0, 1]");
  for (int g : blocks) {
    if (g < 1) throw std::invalid_argument("G must be >= 1");
    if (clients % g != 0) throw std::invalid_argument("K must be divisible by G");
    if (10 % g != 0) throw std::invalid_argument("G must divide the class count");
  }
  for (double a : alphas)
    if (!(a >= 1.0)) throw std::invalid_argument("alpha must be >= 1");
  if (imbalance_mode == part::ImbalanceMode::target_ratio)
    for (double a : alphas)
      if (a > 5.0)
        throw std::invalid_argument("target-ratio imbalance needs alpha in [1, 5]");
  for (double e : learning_rates)
    if (!(e >= 0.0)) throw std::invalid_argument("eta must be >= 0");
  fed::LocalConfig{epochs, batch_size, 0.0, momentum}.validate();
  if (budget != "fixed" && budget != "converge")
    throw std::invalid_argument("budget must be fixed or converge");
  (budget == "converge" ? fed::Budget::until_convergence(delta, patience, cap)
                        : fed::Budget::fixed_rounds(rounds))
      .validate();
  if (shards < 1) throw std::invalid_argument("s must be >= 1");
  if (replicates < 1) throw std::invalid_argument("reps must be >= 1");
  if (eval_every < 1) throw std::invalid_argument("eval_every must be >= 1");
  if (holdout < 1) throw std::invalid_argument("holdout must be >= 1");
  if (synth_per_class < 1 || synth_test_per_class < 1)
    throw std::invalid_argument("synthetic sizes must be >= 1");
  if (!(synth_noise >= 0.0) || !(synth_jitter >= 0.0))
    throw std::invalid_argument("synthetic noise and jitter must be >= 0");
  if (!(mnist_fraction > 0.0 && mnist_fraction <= 1.0))
    throw std::invalid_argument("mnist_fraction must lie in (0, 1]");
  if (threads < 1 || jobs < 1) throw std::invalid_argument("threads and jobs must be >= 1");
}

ExperimentConfig parse_config(std::istream& in, ExperimentConfig base) {
  int line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(line_no) +
                                  ": expected key = value");
    try {
      base.set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("config line " + std::to_string(line_no) + ": " +
                                  e.what());
    }
  }
  return base;
}

ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path.string());
  return parse_config(in, std::move(base));
}

void write_config(std::ostream& out, const ExperimentConfig& config) {
  for (const auto& key : config_keys()) out << key << " = " << config.get(key) << '\n';
}

ExperimentConfig preset(const std::string& name) {
  ExperimentConfig c;
  if (name == "paper") {
    c.blocks = {2, 5};
    return c;
  }
  if (name == "desk") {
    c.dataset = "synthetic";
    c.model = "mlp-small";
    c.clients = 20;
    c.fractions = {0.2};
    c.blocks = {1, 2, 5};
    c.alphas = {1.0};
    c.learning_rates = {0.07};
    c.batch_size = 15;
    c.epochs = 3;
    c.rounds = 50;
    c.holdout = 50;
    c.out = "out-desk";
    return c;
  }
  throw std::invalid_argument("unknown preset '" + name + "' (paper, desk)");
}

std::vector<RunSpec> expand_grid(const ExperimentConfig& config) {
  config.validate();
  std::vector<RunSpec> out;
  for (int G : config.blocks)
    for (double C : config.fractions)
      for (std::size_t ai = 0; ai < (G == 1 ? 1 : config.alphas.size()); ++ai)
        for (double eta : config.learning_rates)
          for (int r = 0; r < config.replicates; ++r) {
            RunSpec s;
            s.blocks = G;
            s.fraction = C;
            s.alpha = G == 1 ? 1.0 : config.alphas[ai];
            s.learning_rate = eta;
            s.replicate = r;
            s.regime = G == 1 ? config.g1_regime : part::Regime::block;
            s.seed = derive_seed(config.seed, Stream::replicate,
                                 cell_hash(G, C, s.alpha, eta),
                                 static_cast<std::uint64_t>(r));
            s.id = run_id(s);
            out.push_back(std::move(s));
          }
  return out;
}

Datasets load_datasets(const ExperimentConfig& config) {
  Datasets d;
  if (config.dataset == "synthetic") {
    const data::SynthOptions opts{config.synth_noise, config.synth_jitter};
    d.train = data::synth_dataset(10, config.synth_per_class, config.data_seed,
                                  data::Split::train, opts);
    d.test = data::synth_dataset(10, config.synth_test_per_class, config.data_seed,
                                 data::Split::test, opts);
    return d;
  }
  const std::filesystem::path dir =
      config.data_dir.empty() ? data::default_data_dir()
                              : std::filesystem::path(config.data_dir);
  d.train = data::load_mnist(dir, data::Split::train);
  d.test = data::load_mnist(dir, data::Split::test);
  if (config.mnist_fraction < 1.0)
    d.train = data::subsample(d.train, config.mnist_fraction,
                              derive_seed(config.data_seed, Stream::synth, 99));
  return d;
}

std::pair<int, int> oscillation_window(int rounds) {
  return {rounds / 5, (7 * rounds) / 10};
}

RunOutcome run_single(const RunSpec& spec, const ExperimentConfig& config,
                      const Datasets& data,
                      const std::optional<std::filesystem::path>& dir) {
  if (config.precision == nn::Precision::f64)
    return run_typed<double>(spec, config, data, dir);
  return run_typed<float>(spec, config, data, dir);
}

ExperimentResult run_experiment(const ExperimentConfig& config, const Datasets& data,
                                const RunOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  const auto specs = expand_grid(config);
  ExperimentResult result;
  result.runs.resize(specs.size());
  const std::filesystem::path root = config.out;
  if (options.write_outputs) std::filesystem::create_directories(root / "runs");

  std::mutex log_mutex;
  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> done{0};
  auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < specs.size();) {
      auto& slot = result.runs[i];
      try {
        std::optional<std::filesystem::path> dir;
        if (options.write_outputs) dir = root / "runs" / specs[i].id;
        slot = run_single(specs[i], config, data, dir);
      } catch (const std::exception& e) {
        slot = RunOutcome{};
        slot.spec = specs[i];
        slot.error = e.what();
      }
      const auto n = ++done;
      if (options.progress) {
        std::lock_guard lock(log_mutex);
        char line[256];
        std::snprintf(line, sizeof line, "[%zu/%zu] %s %s acc=%.4f (%.1fs)\n", n,
                      specs.size(), specs[i].id.c_str(), slot.ok ? "ok" : "FAILED",
                      slot.accuracy, slot.seconds);
        *options.progress << line;
        if (!slot.ok) *options.progress << "  error: " << slot.error << '\n';
        options.progress->flush();
      }
    }
  };
  const int workers = std::clamp<int>(config.jobs, 1, static_cast<int>(specs.size()));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
  }

  std::vector<metrics::RunAccuracy> accs;
  for (const auto& r : result.runs) {
    if (!r.ok) {
      ++result.failures;
      continue;
    }
    accs.push_back({r.spec.blocks, r.spec.fraction, r.spec.alpha, r.spec.learning_rate,
                    r.spec.replicate, r.accuracy});
  }
  result.grid = metrics::consensus_grid(accs, config.replicates);
  result.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  if (options.write_outputs) {
    std::ofstream grid(root / "grid.csv");
    metrics::write_grid_csv(grid, accs);
    std::ofstream cfg(root / "config.txt");
    write_config(cfg, config);
    std::ofstream summary(root / "summary.json");
    write_summary_json(summary, config, result);
  }
  return result;
}

ExperimentResult run_experiment(const ExperimentConfig& config, const RunOptions& options) {
  return run_experiment(config, load_datasets(config), options);
}

void write_summary_json(std::ostream& out, const ExperimentConfig& config,
                        const ExperimentResult& result) {
  using nlohmann::json;
  json cfg = json::object();
  for (const auto& key : config_keys()) cfg[key] = config.get(key);

  json runs = json::array();
  for (const auto& r : result.runs) {
    json j = {{"id", r.spec.id},
              {"G", r.spec.blocks},
              {"C", r.spec.fraction},
              {"alpha", r.spec.alpha},
              {"eta", r.spec.learning_rate},
              {"rep", r.spec.replicate},
              {"seed", r.spec.seed},
              {"regime", part::to_string(r.spec.regime)},
              {"ok", r.ok}};
    if (!r.ok) {
      j["error"] = r.error;
    } else {
      j["accuracy"] = r.accuracy;
      j["initial_accuracy"] = r.initial_accuracy;
      j["best_accuracy"] = r.best_accuracy;
      j["rounds"] = r.rounds_run;
      j["converged"] = r.converged;
      j["fairness_mean"] = r.fairness.mean;
      j["fairness_variance"] = r.fairness.variance;
      if (r.oscillation) j["oscillation_index"] = *r.oscillation;
      if (r.forgetting) {
        j["last_block"] = r.last_block;
        j["block_recall"] = r.forgetting->recall;
        j["last_block_share"] = r.forgetting->last_block_share;
      }
      j["seconds"] = r.seconds;
    }
    runs.push_back(std::move(j));
  }

  json cells = json::array();
  for (const auto& c : result.grid.cells)
    cells.push_back({{"G", c.blocks},
                     {"C", c.fraction},
                     {"alpha", c.alpha},
                     {"eta", c.learning_rate},
                     {"replicates", c.replicates},
                     {"mean", c.mean},
                     {"min", c.min},
                     {"max", c.max},
                     {"complete", c.complete}});

  json doc = {{"config", cfg},
              {"runs", runs},
              {"cells", cells},
              {"row_means", marginals_json(result.grid.by_fraction, "C")},
              {"column_means", marginals_json(result.grid.by_alpha, "alpha")},
              {"block_means", marginals_json(result.grid.by_blocks, "unused")},
              {"failures", result.failures},
              {"seconds", result.seconds}};
  for (auto& m : doc["block_means"]) m.erase("unused");
  out << doc.dump(2) << '\n';
}

}  // namespace cyclefed::exp
