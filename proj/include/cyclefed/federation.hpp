#pragma once

// FedAvg round engine: client selection, local training, weighted
// aggregation and the round loop.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "cyclefed/datasets.hpp"
#include "cyclefed/nn.hpp"
#include "cyclefed/partition.hpp"
#include "cyclefed/rng.hpp"

namespace cyclefed::fed {

enum class ScheduleKind { uniform, block_cyclic };

std::string_view to_string(ScheduleKind k);

struct SamplingSchedule {
  ScheduleKind kind = ScheduleKind::uniform;
  double fraction = 0.1;  // C
  std::vector<int> block_order;  // empty means 0, 1, ..., G-1

  /// m = max(floor(C*K), 1), capped at K/G under block cycling.
  int selection_size(const part::FederatedPopulation& population) const;
  /// Block served in round t, or -1 for the uniform schedule.
  int active_block(int t, const part::FederatedPopulation& population) const;
  void validate(const part::FederatedPopulation& population) const;
};

/// Schedule implied by the population: block-cyclic when G > 1.
SamplingSchedule default_schedule(const part::FederatedPopulation& population,
                                  double fraction);

/// Client ids for round t, ascending, drawn without replacement.
std::vector<int> select_clients(const SamplingSchedule& schedule,
                                const part::FederatedPopulation& population,
                                int t, Rng& rng);

struct LocalConfig {
  int epochs = 3;         // E
  int batch_size = 64;    // B
  double learning_rate = 0.01;
  double momentum = 0.5;  // beta

  void validate() const;
};

/// ceil(n / B).
std::size_t batches_per_epoch(std::size_t samples, int batch_size);

template <class Real>
struct ClientUpdate {
  int client = 0;
  std::size_t samples = 0;
  nn::ModelState<Real> model;
  double loss = 0.0;  // sample-weighted mean over the final epoch
  bool diverged = false;
};

/// Trains a copy of `global` on the client's data for E epochs with fresh
/// momentum. Epoch e is shuffled with derive_seed(client_seed, client, e);
/// batch j of epoch e drops units with derive_seed(client_seed, dropout, e, j).
/// A non-finite loss or parameter marks the update diverged and stops it.
template <class Real>
ClientUpdate<Real> client_update(const nn::ModelState<Real>& global,
                                 const part::ClientDataset& client,
                                 const data::LabeledDataset& train,
                                 const LocalConfig& config,
                                 std::uint64_t client_seed,
                                 nn::Network<Real>* network = nullptr);

class AggregationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Streaming n_k-weighted average. Clients must arrive in ascending id
/// order; sums are carried in double as offsets from the first client.
template <class Real>
class Aggregator {
 public:
  void add(int client, std::size_t samples, std::span<const Real> params);
  std::size_t count() const { return count_; }
  /// Throws AggregationError when nothing was added.
  std::vector<Real> result() const;

 private:
  std::vector<Real> reference_;
  std::vector<double> offset_;
  double total_ = 0.0;
  int last_client_ = -1;
  std::size_t count_ = 0;
};

/// Weighted average of the non-divergent updates, in ascending client id.
template <class Real>
nn::ModelState<Real> aggregate(std::vector<ClientUpdate<Real>> updates);

struct RoundRecord {
  int round = 0;
  int block = -1;
  std::vector<int> selected;
  std::vector<double> losses;  // per selected client, NaN when diverged
  std::vector<bool> diverged;
  std::optional<double> consensus_accuracy;
  double seconds = 0.0;

  /// Over the finite losses; NaN if there are none.
  double loss_min() const;
  double loss_mean() const;
  double loss_max() const;
};

struct Budget {
  enum class Kind { fixed, converge };
  Kind kind = Kind::fixed;
  int rounds = 100;     // T for fixed budgets
  double delta = 0.0;   // minimum improvement
  int patience = 5;     // evaluations without improvement
  int cap = 1000;       // round limit for convergence runs

  static Budget fixed_rounds(int rounds);
  static Budget until_convergence(double delta, int patience, int cap);
  void validate() const;
};

template <class Real>
struct FedRunState {
  nn::ModelState<Real> model;
  int round = 0;
  SamplingSchedule schedule;
  const part::FederatedPopulation* population = nullptr;
  const data::LabeledDataset* train = nullptr;
  const data::LabeledDataset* test = nullptr;
  LocalConfig local;
  std::uint64_t seed = 0;  // master seed of the run
  int threads = 1;
};

using RoundObserver = std::function<void(const RoundRecord&)>;

struct RunSummary {
  std::vector<RoundRecord> rounds;
  double initial_accuracy = 0.0;
  double best_accuracy = 0.0;
  bool converged = false;  // convergence budgets: stopped by patience
};

/// Runs rounds until the budget is spent, evaluating the consensus model
/// on the union holdout when (t+1) % eval_every == 0 and after the last
/// round. Selection in round t uses derive_seed(seed, select, t); client k
/// trains with derive_seed(seed, client, t, k).
template <class Real>
RunSummary run_rounds(FedRunState<Real>& state, const Budget& budget,
                      int eval_every = 5, const RoundObserver& observer = {});

void write_rounds_header(std::ostream& out, bool with_timing = true);
void write_round(std::ostream& out, const RoundRecord& r, bool with_timing = true);
void write_rounds_csv(std::ostream& out, const std::vector<RoundRecord>& rounds,
                      bool with_timing = true);

}  // namespace cyclefed::fed
