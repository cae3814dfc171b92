#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "cyclefed/partition.hpp"

namespace cyclefed::part {
namespace {

// Partitioning only reads labels, so fixtures carry no pixels.
data::LabeledDataset labels_only(std::vector<std::size_t> per_class,
                                 data::Split split = data::Split::train) {
  data::LabeledDataset d;
  d.classes = static_cast<int>(per_class.size());
  d.split = split;
  for (std::size_t y = 0; y < per_class.size(); ++y)
    for (std::size_t i = 0; i < per_class[y]; ++i)
      d.labels.push_back(static_cast<std::uint8_t>(y));
  return d;
}

data::LabeledDataset uniform_labels(std::size_t per_class, int classes = 10) {
  return labels_only(std::vector<std::size_t>(classes, per_class));
}

// Roughly MNIST-shaped uneven class counts, scaled down.
data::LabeledDataset mnist_like() {
  return labels_only({592, 674, 596, 613, 584, 542, 592, 627, 585, 595});
}

std::set<int> labels_of(const ClientDataset& c, const data::LabeledDataset& d) {
  std::set<int> s;
  for (auto i : c.train) s.insert(d.labels[i]);
  return s;
}

std::vector<std::size_t> all_train(const FederatedPopulation& p) {
  std::vector<std::size_t> v;
  for (const auto& c : p.clients) v.insert(v.end(), c.train.begin(), c.train.end());
  std::sort(v.begin(), v.end());
  return v;
}

bool same_population(const FederatedPopulation& a, const FederatedPopulation& b) {
  if (a.size() != b.size()) return false;
  for (int k = 0; k < a.size(); ++k) {
    const auto& x = a.clients[k];
    const auto& y = b.clients[k];
    if (x.id != y.id || x.block != y.block || x.train != y.train ||
        x.holdout != y.holdout || x.label_counts != y.label_counts ||
        x.holdout_with_replacement != y.holdout_with_replacement)
      return false;
  }
  return a.block_labels == b.block_labels && a.metadata == b.metadata;
}

// Number of maximal runs of equal labels in the client's train order.
int label_runs(const ClientDataset& c, const data::LabeledDataset& d) {
  int runs = 0;
  for (std::size_t i = 0; i < c.train.size(); ++i)
    if (i == 0 || d.labels[c.train[i]] != d.labels[c.train[i - 1]] ||
        c.train[i] != c.train[i - 1] + 1)
      ++runs;
  return runs;
}

double total_variation(const std::vector<std::size_t>& a,
                       const std::vector<std::size_t>& b) {
  const double na = std::accumulate(a.begin(), a.end(), 0.0);
  const double nb = std::accumulate(b.begin(), b.end(), 0.0);
  double tv = 0;
  for (std::size_t i = 0; i < a.size(); ++i) tv += std::abs(a[i] / na - b[i] / nb);
  return tv / 2;
}

std::vector<std::size_t> holdout_hist(const ClientDataset& c,
                                      const data::LabeledDataset& test) {
  std::vector<std::size_t> h(test.classes, 0);
  for (auto i : c.holdout) ++h[test.labels[i]];
  return h;
}

TEST(Imbalance, TargetRatioWeights) {
  auto w = imbalance_weights(2, 1.0, ImbalanceMode::target_ratio);
  EXPECT_DOUBLE_EQ(w[0], 0.5);
  EXPECT_DOUBLE_EQ(w[1], 0.5);
  w = imbalance_weights(2, 5.0, ImbalanceMode::target_ratio);
  EXPECT_NEAR(w[0], 11.0 / 12.0, 1e-15);
  EXPECT_NEAR(w[1], 1.0 / 12.0, 1e-15);
  EXPECT_DOUBLE_EQ(target_ratio(1.5), 2.0);
  EXPECT_DOUBLE_EQ(target_ratio(2.0), 3.0);
  EXPECT_DOUBLE_EQ(target_ratio(3.5), 7.0);
}

TEST(Imbalance, PowerModeUniformAtAlphaOne) {
  for (int g : {1, 2, 5, 7}) {
    const auto w = imbalance_weights(g, 1.0, ImbalanceMode::power);
    for (double v : w) EXPECT_DOUBLE_EQ(v, 1.0 / g);
  }
  const auto w = imbalance_weights(3, 2.0, ImbalanceMode::power);
  EXPECT_NEAR(w[0] / w[1], 2.0, 1e-12);
  EXPECT_NEAR(w[0] / w[2], 3.0, 1e-12);
}

TEST(Imbalance, WeightsSumToOneForManyBlocks) {
  const auto w = imbalance_weights(5, 2.0, ImbalanceMode::target_ratio);
  EXPECT_NEAR(std::accumulate(w.begin(), w.end(), 0.0), 1.0, 1e-12);
  for (int g = 1; g < 5; ++g) EXPECT_NEAR(w[g - 1] / w[g], 3.0, 1e-12);
}

TEST(Imbalance, RejectsOutOfRange) {
  EXPECT_THROW(imbalance_weights(2, 0.5, ImbalanceMode::power), std::invalid_argument);
  EXPECT_THROW(imbalance_weights(2, 5.5, ImbalanceMode::target_ratio),
               std::invalid_argument);
  EXPECT_NO_THROW(imbalance_weights(2, 9.0, ImbalanceMode::power));
}

TEST(Iid, EqualSizesNoDuplicates) {
  const auto d = uniform_labels(600);
  const auto p = partition_iid(d, 100, 7);
  ASSERT_EQ(p.size(), 100);
  for (const auto& c : p.clients) EXPECT_EQ(c.samples(), 60u);
  const auto v = all_train(p);
  EXPECT_EQ(std::adjacent_find(v.begin(), v.end()), v.end());
  EXPECT_EQ(v.size(), d.size());
  EXPECT_EQ(p.blocks, 1);
}

TEST(Iid, RemainderDropped) {
  const auto d = uniform_labels(101);
  const auto p = partition_iid(d, 100, 1);
  EXPECT_EQ(p.total_samples(), 1000u);
}

TEST(Iid, HistogramsNearUniform) {
  const auto d = uniform_labels(6000);
  const auto p = partition_iid(d, 100, 3);
  for (const auto& c : p.clients)
    for (auto n : c.label_counts) {
      EXPECT_GT(n, 60u * 0.5);
      EXPECT_LT(n, 60u * 1.5);
    }
  // Aggregate relative deviation from uniform.
  double dev = 0;
  for (const auto& c : p.clients)
    for (auto n : c.label_counts) dev += std::abs(n / 60.0 - 1.0);
  EXPECT_LT(dev / 1000, 0.2);
}

TEST(Iid, Deterministic) {
  const auto d = uniform_labels(50);
  EXPECT_TRUE(same_population(partition_iid(d, 10, 5), partition_iid(d, 10, 5)));
  EXPECT_FALSE(same_population(partition_iid(d, 10, 5), partition_iid(d, 10, 6)));
}

TEST(Iid, TooManyClients) {
  EXPECT_THROW(partition_iid(uniform_labels(1, 3), 4, 0), std::invalid_argument);
}

TEST(Shards, MnistShapeOnBalancedData) {
  const auto d = uniform_labels(6000);
  const auto p = partition_shards(d, 100, 2, 11);
  for (const auto& c : p.clients) {
    EXPECT_EQ(c.samples(), 600u);
    EXPECT_LE(labels_of(c, d).size(), 2u);
    EXPECT_LE(label_runs(c, d), 2);
  }
  std::vector<std::size_t> all(d.size());
  std::iota(all.begin(), all.end(), 0);
  EXPECT_EQ(all_train(p), all);
}

TEST(Shards, UnevenClassCountsStayLabelPure) {
  const auto d = mnist_like();
  const auto p = partition_shards(d, 100, 2, 2);
  EXPECT_EQ(all_train(p).size(), d.size());
  for (const auto& c : p.clients) {
    EXPECT_LE(labels_of(c, d).size(), 2u);
    EXPECT_NEAR(static_cast<double>(c.samples()), d.size() / 100.0, 10.0);
  }
}

TEST(Shards, EqualSizeFallback) {
  // 3 classes, K*s = 4 does not divide the class count: equal sorted slices.
  const auto d = uniform_labels(40, 3);
  const auto p = partition_shards(d, 2, 2, 0);
  for (const auto& c : p.clients) EXPECT_EQ(c.samples(), 60u);
  EXPECT_THROW(partition_shards(uniform_labels(41, 3), 2, 2, 0),
               std::invalid_argument);
}

TEST(Shards, Errors) {
  const auto d = uniform_labels(10);
  EXPECT_THROW(partition_shards(d, 10, 0, 0), std::invalid_argument);
  EXPECT_THROW(partition_shards(d, 200, 1, 0), std::invalid_argument);
}

TEST(Blocks, LastBlockOfFiveIsEightNine) {
  const auto d = uniform_labels(600);
  const auto p = partition_blocks(d, 100, 2, 5, 1.0, 3);
  ASSERT_EQ(p.block_labels.size(), 5u);
  EXPECT_EQ(p.block_labels[4], (std::vector<int>{8, 9}));
  for (std::size_t g = 0; g < 5; ++g)
    for (std::size_t h = g + 1; h < 5; ++h)
      for (int y : p.block_labels[g])
        EXPECT_EQ(std::count(p.block_labels[h].begin(), p.block_labels[h].end(), y), 0);
}

TEST(Blocks, FifteenClientFiveBlockStructure) {
  const auto d = uniform_labels(300);
  const auto p = partition_blocks(d, 15, 2, 5, 1.0, 9);
  for (int g = 0; g < 5; ++g) {
    const auto members = p.clients_in_block(g);
    EXPECT_EQ(members, (std::vector<int>{3 * g, 3 * g + 1, 3 * g + 2}));
    EXPECT_EQ(p.block_labels[g].size(), 2u);
    for (int k : members)
      for (int y : labels_of(p.clients[k], d))
        EXPECT_TRUE(y == 2 * g || y == 2 * g + 1);
  }
}

TEST(Blocks, BalancedIsWithoutReplacement) {
  for (auto d : {uniform_labels(600), mnist_like()}) {
    for (int G : {2, 5}) {
      const auto p = partition_blocks(d, 100, 2, G, 1.0, 4);
      const auto v = all_train(p);
      EXPECT_EQ(std::adjacent_find(v.begin(), v.end()), v.end());
      EXPECT_EQ(v.size(), d.size());
      const auto totals = p.block_totals();
      if (G == 2) {
        const double ratio = static_cast<double>(totals[0]) / totals[1];
        EXPECT_NEAR(ratio, 1.0, 0.05);
      }
    }
  }
}

TEST(Blocks, ImbalanceRealizedForTwoBlocks) {
  const auto d = uniform_labels(6000);
  for (double alpha : {1.0, 1.5, 2.0, 5.0}) {
    const auto p = partition_blocks(d, 100, 2, 2, alpha, 21);
    const auto totals = p.block_totals();
    const double ratio = static_cast<double>(totals[0]) / totals[1];
    const double want = target_ratio(alpha);
    EXPECT_NEAR(ratio / want, 1.0, 0.10) << "alpha " << alpha;
    for (const auto& c : p.clients)
      for (int y : labels_of(c, d)) EXPECT_EQ(y / 5, c.block);
  }
}

TEST(Blocks, ImbalanceRealizedForFiveBlocksWhereFeasible) {
  const auto d = uniform_labels(6000);
  for (double alpha : {1.5, 2.0}) {
    const auto p = partition_blocks(d, 100, 2, 5, alpha, 8);
    const auto w = imbalance_weights(5, alpha, ImbalanceMode::target_ratio);
    const auto totals = p.block_totals();
    const double n = static_cast<double>(p.total_samples());
    for (int g = 0; g < 5; ++g) EXPECT_NEAR(totals[g] / n / w[g], 1.0, 0.10);
  }
}

TEST(Blocks, ImbalancedDrawsWithReplacement) {
  const auto d = uniform_labels(600);
  const auto p = partition_blocks(d, 100, 2, 2, 5.0, 1);
  const auto v = all_train(p);
  EXPECT_NE(std::adjacent_find(v.begin(), v.end()), v.end());
}

TEST(Blocks, PowerModeUsesPowerWeights) {
  const auto d = uniform_labels(6000);
  const auto p = partition_blocks(d, 100, 2, 2, 2.0, 5, ImbalanceMode::power);
  const auto totals = p.block_totals();
  EXPECT_NEAR(static_cast<double>(totals[0]) / totals[1], 2.0, 0.2);
}

TEST(Blocks, Errors) {
  const auto d = uniform_labels(60);
  EXPECT_THROW(partition_blocks(d, 100, 2, 3, 1.0, 0), std::invalid_argument);
  EXPECT_THROW(partition_blocks(d, 99, 2, 3, 1.0, 0), std::invalid_argument);
  EXPECT_THROW(partition_blocks(d, 100, 2, 2, 0.9, 0), std::invalid_argument);
  EXPECT_THROW(partition_blocks(d, 100, 2, 1, 1.0, 0), std::invalid_argument);
  try {
    partition_blocks(d, 100, 2, 3, 1.0, 0);
  } catch (const std::invalid_argument& e) {
    EXPECT_STREQ(e.what(), "K must be divisible by G");
  }
}

TEST(Blocks, Deterministic) {
  const auto d = uniform_labels(300);
  PartitionPlan plan{Regime::block, 20, 2, 5, 2.0};
  plan.seed = 17;
  EXPECT_TRUE(same_population(make_population(d, plan), make_population(d, plan)));
}

TEST(Holdout, ProportionalToTrainHistogram) {
  auto train = labels_only({0, 0, 0, 300, 0, 0, 0, 300, 0, 0});
  const auto test = uniform_labels(1000);
  auto p = partition_iid(train, 1, 0);
  build_holdouts(p, test, 100, 5);
  const auto h = holdout_hist(p.clients[0], test);
  EXPECT_EQ(h[3], 50u);
  EXPECT_EQ(h[7], 50u);
  EXPECT_EQ(p.clients[0].holdout.size(), 100u);
  EXPECT_FALSE(p.clients[0].holdout_with_replacement);
}

TEST(Holdout, IidClientRoughlyTenPerClass) {
  const auto train = uniform_labels(600);
  const auto test = uniform_labels(1000);
  auto p = partition_iid(train, 10, 2);
  build_holdouts(p, test, 100, 1);
  for (const auto& c : p.clients)
    for (auto n : holdout_hist(c, test)) EXPECT_NEAR(static_cast<double>(n), 10.0, 5.0);
}

TEST(Holdout, MirroringBoundAndHygiene) {
  const auto train = mnist_like();
  const auto test = labels_only({98, 113, 103, 101, 98, 89, 96, 103, 97, 101},
                                data::Split::test);
  for (int G : {2, 5}) {
    auto p = partition_blocks(train, 20, 2, G, 1.0, 3);
    build_holdouts(p, test, 100, 4);
    for (const auto& c : p.clients) {
      ASSERT_EQ(c.holdout.size(), 100u);
      for (auto i : c.holdout) ASSERT_LT(i, test.size());
      const auto h = holdout_hist(c, test);
      for (std::size_t y = 0; y < h.size(); ++y) {
        const double exact = 100.0 * c.label_counts[y] / c.samples();
        EXPECT_LT(std::abs(h[y] - exact), 1.0);
      }
      std::size_t support = 0;
      for (auto n : c.label_counts) support += n > 0;
      EXPECT_LE(total_variation(c.label_counts, h), (1.0 + support / 2.0) / 100.0);
      // Unique unless the pool ran dry.
      if (!c.holdout_with_replacement)
        EXPECT_EQ(std::adjacent_find(c.holdout.begin(), c.holdout.end()),
                  c.holdout.end());
    }
    const auto u = p.union_holdout();
    EXPECT_TRUE(std::is_sorted(u.begin(), u.end()));
    EXPECT_EQ(std::adjacent_find(u.begin(), u.end()), u.end());
  }
}

TEST(Holdout, SmallPoolFallsBackToReplacement) {
  auto train = labels_only({100, 100});
  const auto test = labels_only({5, 5}, data::Split::test);
  auto p = partition_iid(train, 1, 0);
  build_holdouts(p, test, 40, 0);
  EXPECT_TRUE(p.clients[0].holdout_with_replacement);
  EXPECT_EQ(p.clients[0].holdout.size(), 40u);
}

TEST(Holdout, RejectsNonPositiveSize) {
  auto p = partition_iid(uniform_labels(10), 2, 0);
  EXPECT_THROW(build_holdouts(p, uniform_labels(10), 0, 0), std::invalid_argument);
}

TEST(Manifest, RoundTrip) {
  const auto train = uniform_labels(200);
  auto p = partition_blocks(train, 20, 2, 2, 1.5, 99);
  p.metadata["dataset"] = "synthetic";
  p.metadata["note"] = "two words";
  build_holdouts(p, uniform_labels(50), 20, 3);
  std::stringstream ss;
  write_manifest(ss, p);
  const auto q = read_manifest(ss);
  EXPECT_TRUE(same_population(p, q));
  EXPECT_EQ(q.regime, Regime::block);
  EXPECT_EQ(q.blocks, 2);
  EXPECT_EQ(q.alpha, 1.5);
  EXPECT_EQ(q.seed, 99u);
  EXPECT_EQ(q.holdout_size, 20);
  std::stringstream again;
  write_manifest(again, q);
  std::stringstream first;
  write_manifest(first, p);
  EXPECT_EQ(first.str(), again.str());
}

TEST(Manifest, RejectsGarbage) {
  std::stringstream bad("hello\n");
  EXPECT_THROW(read_manifest(bad), ManifestError);
  auto p = partition_iid(uniform_labels(10), 2, 0);
  std::stringstream ss;
  write_manifest(ss, p);
  auto text = ss.str();
  text.resize(text.size() - 4);  // drop "end\n"
  std::stringstream cut(text);
  EXPECT_THROW(read_manifest(cut), ManifestError);
}

}  // namespace
}  // namespace cyclefed::part
