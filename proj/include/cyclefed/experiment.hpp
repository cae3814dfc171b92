#pragma once

// Sweep configuration, grid expansion and the experiment runner that
// writes the output tree.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "cyclefed/datasets.hpp"
#include "cyclefed/federation.hpp"
#include "cyclefed/metrics.hpp"
#include "cyclefed/partition.hpp"

namespace cyclefed::exp {

struct ExperimentConfig {
  std::string dataset = "mnist";  // mnist | synthetic
  std::string model = "paper-cnn";
  int clients = 100;                                   // K
  std::vector<double> fractions = {0.05, 0.10, 0.20, 1.00};  // C
  std::vector<int> blocks = {1, 2, 5};                 // G
  std::vector<double> alphas = {1.0, 1.5, 2.0, 5.0};
  std::vector<double> learning_rates = {0.01};         // eta
  int batch_size = 64;                                 // B
  int epochs = 3;                                      // E
  std::string budget = "fixed";                        // fixed | converge
  int rounds = 100;                                    // T
  double delta = 0.0;
  int patience = 5;
  int cap = 500;
  int shards = 2;                                      // s
  double momentum = 0.5;                               // beta
  int replicates = 3;                                  // n
  std::uint64_t seed = 0;
  int eval_every = 5;
  std::string out = "out";
  nn::Precision precision = nn::Precision::f32;
  std::string data_dir;  // empty: CYCLEFED_DATA_DIR or ./data
  int holdout = 100;     // per client
  part::Regime g1_regime = part::Regime::shards;
  int synth_per_class = 300;
  int synth_test_per_class = 100;
  double synth_noise = 0.45;
  double synth_jitter = 0.75;
  std::uint64_t data_seed = 1;
  double mnist_fraction = 1.0;
  part::ImbalanceMode imbalance_mode = part::ImbalanceMode::target_ratio;
  int threads = 1;  // per run, across clients
  int jobs = 1;     // concurrent runs

  /// Sets one key from its text form. Throws std::invalid_argument on an
  /// unknown key or a malformed value.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  void validate() const;
};

/// Every key accepted by ExperimentConfig::set, in canonical order.
const std::vector<std::string>& config_keys();

/// "key = value" lines; '#' starts a comment; lists are comma separated.
ExperimentConfig parse_config(std::istream& in, ExperimentConfig base = {});
ExperimentConfig load_config(const std::filesystem::path& path,
                             ExperimentConfig base = {});
void write_config(std::ostream& out, const ExperimentConfig& config);

/// "paper": the full MNIST protocol over G in {2, 5}.
/// "desk": synthetic data, mlp-small, K=20, T=50, B=15, eta=0.07 over
/// G in {1, 2, 5}.
ExperimentConfig preset(const std::string& name);

struct RunSpec {
  std::string id;
  int blocks = 1;
  double fraction = 0.1;
  double alpha = 1.0;
  double learning_rate = 0.01;
  int replicate = 0;
  std::uint64_t seed = 0;  // run master seed
  part::Regime regime = part::Regime::shards;
};

/// |G|*|C|*|alpha|*|eta|*n specs (G=1 cells collapse alpha). Replicate r
/// of a cell runs with derive_seed(master, replicate, hash(cell), r).
std::vector<RunSpec> expand_grid(const ExperimentConfig& config);

struct Datasets {
  data::LabeledDataset train;
  data::LabeledDataset test;
};

Datasets load_datasets(const ExperimentConfig& config);

/// Rounds [T/5, 7T/10] of a fixed budget, the middle of the run.
std::pair<int, int> oscillation_window(int rounds);

struct RunOutcome {
  RunSpec spec;
  bool ok = false;
  std::string error;
  double accuracy = 0.0;  // final consensus accuracy on the union holdout
  double initial_accuracy = 0.0;
  double best_accuracy = 0.0;
  int rounds_run = 0;
  bool converged = false;
  metrics::FairnessReport fairness;
  std::optional<metrics::ForgettingProfile> forgetting;
  int last_block = -1;
  std::optional<double> oscillation;
  nn::ConfusionMatrix confusion;
  std::vector<fed::RoundRecord> rounds;
  double seconds = 0.0;
};

/// Builds the population, trains and evaluates one run. When `dir` is set
/// the run's manifest, rounds.csv, checkpoint, fairness.csv and
/// confusion.csv are written there.
RunOutcome run_single(const RunSpec& spec, const ExperimentConfig& config,
                      const Datasets& data,
                      const std::optional<std::filesystem::path>& dir = {});

struct ExperimentResult {
  std::vector<RunOutcome> runs;  // expand_grid order
  metrics::Grid grid;
  double seconds = 0.0;
  int failures = 0;
};

struct RunOptions {
  bool write_outputs = true;
  std::ostream* progress = nullptr;
};

/// Runs the whole grid, up to config.jobs runs at a time. A failed run is
/// recorded and the rest continue.
ExperimentResult run_experiment(const ExperimentConfig& config,
                                const Datasets& data,
                                const RunOptions& options = {});
ExperimentResult run_experiment(const ExperimentConfig& config,
                                const RunOptions& options = {});

void write_summary_json(std::ostream& out, const ExperimentConfig& config,
                        const ExperimentResult& result);

}  // namespace cyclefed::exp
