#pragma once

// Analysis surfaces over finished runs: accuracy grids, per-client
// fairness, block forgetting and loss oscillation.

#include <iosfwd>
#include <vector>

#include "cyclefed/datasets.hpp"
#include "cyclefed/federation.hpp"
#include "cyclefed/nn.hpp"
#include "cyclefed/partition.hpp"

namespace cyclefed::metrics {

struct RunAccuracy {
  int blocks = 1;  // G
  double fraction = 0.1;  // C
  double alpha = 1.0;
  double learning_rate = 0.01;
  int replicate = 0;
  double accuracy = 0.0;
};

struct GridCell {
  int blocks = 1;
  double fraction = 0.0;
  double alpha = 1.0;
  double learning_rate = 0.0;
  std::vector<double> replicates;  // ordered by replicate index
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
  bool complete = false;
};

/// Mean over the complete cells sharing (G, key).
struct Marginal {
  int blocks = 1;
  double key = 0.0;
  double mean = 0.0;
  int cells = 0;
};

struct Grid {
  std::vector<GridCell> cells;     // sorted by (G, C, alpha, eta)
  std::vector<Marginal> by_fraction;  // row means, participation effect
  std::vector<Marginal> by_alpha;     // column means, imbalance effect
  std::vector<Marginal> by_blocks;    // overall mean per G
};

/// Groups runs into cells. A cell with fewer than `replicates` values is
/// flagged incomplete and left out of every marginal.
Grid consensus_grid(const std::vector<RunAccuracy>& runs, int replicates);

struct QuantilePoint {
  double level = 0.0;      // (i + 0.5) / K
  double empirical = 0.0;  // i-th smallest accuracy
  double reference = 0.0;  // straight line from min to max
};

struct FairnessReport {
  std::vector<double> accuracies;  // ascending
  std::vector<int> clients;        // client id of each sorted entry
  std::vector<int> blocks;         // block of each sorted entry
  double mean = 0.0;
  double variance = 0.0;  // population variance
  std::vector<QuantilePoint> quantiles;
};

/// Builds the report from per-client accuracies indexed by client id.
FairnessReport fairness_from_accuracies(const std::vector<double>& accuracies,
                                        const std::vector<int>& blocks);

/// Evaluates `model` on every client's holdout. Throws on an empty holdout.
template <class Real>
FairnessReport fairness_report(const nn::ModelState<Real>& model,
                               const part::FederatedPopulation& population,
                               const data::LabeledDataset& test,
                               int threads = 1);

struct ForgettingProfile {
  std::vector<double> recall;  // per block, NaN for a block with no samples
  std::vector<double> prior;   // block share of the true labels
  double last_block_share = 0.0;  // predictions landing in the last block
  int argmax_block() const;
};

ForgettingProfile forgetting_profile(const nn::ConfusionMatrix& confusion,
                                     const std::vector<std::vector<int>>& blocks,
                                     int last_block);

struct Oscillation {
  double index = 0.0;              // population std of per-round mean loss
  std::vector<double> envelope;    // per-round max - min loss
};

/// Over rounds with first <= t <= last. Throws when fewer than two rounds
/// fall in the window.
Oscillation oscillation_index(const std::vector<fed::RoundRecord>& rounds,
                              int first, int last);

void write_grid_csv(std::ostream& out, const std::vector<RunAccuracy>& runs);
void write_fairness_csv(std::ostream& out, const FairnessReport& report);
void write_confusion_csv(std::ostream& out, const nn::ConfusionMatrix& confusion);

}  // namespace cyclefed::metrics
