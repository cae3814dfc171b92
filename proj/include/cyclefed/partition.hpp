#pragma once

// Builds the K-client federated population under four regimes and the
// per-client holdout sets that mirror each client's label distribution.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "cyclefed/datasets.hpp"

namespace cyclefed::part {

enum class Regime { iid, shards, block };
enum class ImbalanceMode { target_ratio, power };

std::string_view to_string(Regime r);
Regime parse_regime(std::string_view text);
std::string_view to_string(ImbalanceMode m);
ImbalanceMode parse_imbalance_mode(std::string_view text);

struct PartitionPlan {
  Regime regime = Regime::shards;
  int clients = 100;
  int shards_per_client = 2;
  int blocks = 1;
  double alpha = 1.0;
  ImbalanceMode imbalance = ImbalanceMode::target_ratio;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument on s < 1, alpha < 1, or a block regime
  /// with fewer than two blocks.
  void validate() const;
};

struct ClientDataset {
  int id = 0;
  int block = 0;
  std::vector<std::size_t> train;    // indices into the train split
  std::vector<std::size_t> holdout;  // indices into the test split
  std::vector<std::size_t> label_counts;  // train label histogram
  bool holdout_with_replacement = false;

  std::size_t samples() const { return train.size(); }
};

struct FederatedPopulation {
  Regime regime = Regime::iid;
  int blocks = 1;
  int shards_per_client = 0;
  double alpha = 1.0;
  ImbalanceMode imbalance = ImbalanceMode::target_ratio;
  std::uint64_t seed = 0;
  int holdout_size = 0;
  std::vector<std::vector<int>> block_labels;
  std::vector<ClientDataset> clients;
  // Free-form provenance (dataset source and generation parameters)
  // carried through the manifest.
  std::map<std::string, std::string> metadata;

  int size() const { return static_cast<int>(clients.size()); }
  std::size_t total_samples() const;
  std::vector<int> clients_in_block(int block) const;
  std::vector<std::size_t> block_totals() const;
  /// Sorted, deduplicated union of all client holdouts.
  std::vector<std::size_t> union_holdout() const;
};

/// Block weights summing to one. target_ratio pins the two-block
/// majority:minority ratios 1, 2, 3, 11 at alpha 1, 1.5, 2, 5 (linear in
/// between) and uses weight r^-g for more blocks; power uses (g+1)^-(alpha-1).
std::vector<double> imbalance_weights(int blocks, double alpha,
                                      ImbalanceMode mode);

/// Majority:minority ratio of the two-block target table at `alpha`.
double target_ratio(double alpha);

FederatedPopulation partition_iid(const data::LabeledDataset& data,
                                  int clients, std::uint64_t seed);

FederatedPopulation partition_shards(const data::LabeledDataset& data,
                                     int clients, int shards_per_client,
                                     std::uint64_t seed);

FederatedPopulation partition_blocks(
    const data::LabeledDataset& data, int clients, int shards_per_client,
    int blocks, double alpha, std::uint64_t seed,
    ImbalanceMode mode = ImbalanceMode::target_ratio);

FederatedPopulation make_population(const data::LabeledDataset& data,
                                    const PartitionPlan& plan);

/// Fills every client's holdout with `per_client` test indices whose label
/// histogram is the client's train histogram, rounded by largest remainder.
void build_holdouts(FederatedPopulation& population,
                    const data::LabeledDataset& test, int per_client,
                    std::uint64_t seed);

class ManifestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_manifest(std::ostream& out, const FederatedPopulation& population);
FederatedPopulation read_manifest(std::istream& in);

}  // namespace cyclefed::part
