#include "cyclefed/metrics.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <thread>
#include <tuple>

namespace cyclefed::metrics {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

std::vector<Marginal> marginal(const std::vector<GridCell>& cells,
                               double GridCell::*field) {
  std::map<std::pair<int, double>, std::pair<double, int>> acc;
  for (const auto& c : cells) {
    if (!c.complete) continue;
    auto& slot = acc[{c.blocks, field ? c.*field : 0.0}];
    slot.first += c.mean;
    ++slot.second;
  }
  std::vector<Marginal> out;
  for (const auto& [key, v] : acc)
    out.push_back({key.first, key.second, v.first / v.second, v.second});
  return out;
}

}  // namespace

Grid consensus_grid(const std::vector<RunAccuracy>& runs, int replicates) {
  if (replicates < 1) throw std::invalid_argument("replicate count must be >= 1");
  using Key = std::tuple<int, double, double, double>;
  std::map<Key, std::vector<std::pair<int, double>>> groups;
  for (const auto& r : runs)
    groups[{r.blocks, r.fraction, r.alpha, r.learning_rate}].emplace_back(
        r.replicate, r.accuracy);

  Grid g;
  for (auto& [key, reps] : groups) {
    std::sort(reps.begin(), reps.end());
    GridCell c;
    std::tie(c.blocks, c.fraction, c.alpha, c.learning_rate) = key;
    for (const auto& rep : reps) c.replicates.push_back(rep.second);
    c.complete = static_cast<int>(c.replicates.size()) == replicates;
    c.mean = std::accumulate(c.replicates.begin(), c.replicates.end(), 0.0) /
             static_cast<double>(c.replicates.size());
    const auto [lo, hi] = std::minmax_element(c.replicates.begin(), c.replicates.end());
    c.min = *lo;
    c.max = *hi;
    g.cells.push_back(std::move(c));
  }
  g.by_fraction = marginal(g.cells, &GridCell::fraction);
  g.by_alpha = marginal(g.cells, &GridCell::alpha);
  g.by_blocks = marginal(g.cells, nullptr);
  return g;
}

FairnessReport fairness_from_accuracies(const std::vector<double>& accuracies,
                                        const std::vector<int>& blocks) {
  if (accuracies.empty()) throw std::invalid_argument("no client accuracies");
  if (blocks.size() != accuracies.size())
    throw std::invalid_argument("one block id per client is required");
  const std::size_t K = accuracies.size();
  std::vector<int> order(K);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return accuracies[a] < accuracies[b]; });

  FairnessReport r;
  for (int k : order) {
    r.accuracies.push_back(accuracies[k]);
    r.clients.push_back(k);
    r.blocks.push_back(blocks[k]);
  }
  r.mean = std::accumulate(accuracies.begin(), accuracies.end(), 0.0) / K;
  double ss = 0.0;
  for (double a : accuracies) ss += (a - r.mean) * (a - r.mean);
  r.variance = ss / K;
  const double lo = r.accuracies.front();
  const double hi = r.accuracies.back();
  for (std::size_t i = 0; i < K; ++i) {
    const double t = K > 1 ? static_cast<double>(i) / (K - 1) : 0.0;
    r.quantiles.push_back({(i + 0.5) / K, r.accuracies[i], lo + (hi - lo) * t});
  }
  return r;
}

template <class Real>
FairnessReport fairness_report(const nn::ModelState<Real>& model,
                               const part::FederatedPopulation& population,
                               const data::LabeledDataset& test, int threads) {
  const std::size_t K = population.clients.size();
  if (K == 0) throw std::invalid_argument("empty population");
  for (const auto& c : population.clients)
    if (c.holdout.empty())
      throw std::invalid_argument("client " + std::to_string(c.id) +
                                  " has an empty holdout");
  std::vector<double> acc(K);
  std::vector<int> blocks(K);
  for (std::size_t k = 0; k < K; ++k) blocks[k] = population.clients[k].block;

  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t k; (k = next.fetch_add(1)) < K;)
      acc[k] = data::evaluate_on(model, test, population.clients[k].holdout).accuracy;
  };
  const int workers = std::clamp<int>(threads, 1, static_cast<int>(K));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
  }
  return fairness_from_accuracies(acc, blocks);
}

int ForgettingProfile::argmax_block() const {
  int best = -1;
  for (std::size_t g = 0; g < recall.size(); ++g)
    if (!std::isnan(recall[g]) && (best < 0 || recall[g] > recall[best]))
      best = static_cast<int>(g);
  return best;
}

ForgettingProfile forgetting_profile(const nn::ConfusionMatrix& confusion,
                                     const std::vector<std::vector<int>>& blocks,
                                     int last_block) {
  const int classes = confusion.classes;
  if (confusion.counts.size() != static_cast<std::size_t>(classes) * classes)
    throw std::invalid_argument("confusion matrix is not square");
  std::vector<int> owner(classes, -1);
  for (std::size_t g = 0; g < blocks.size(); ++g)
    for (int y : blocks[g]) {
      if (y < 0 || y >= classes || owner[y] >= 0)
        throw std::invalid_argument("block label sets must partition the classes");
      owner[y] = static_cast<int>(g);
    }
  if (std::count(owner.begin(), owner.end(), -1) > 0)
    throw std::invalid_argument("block label sets must partition the classes");
  if (last_block < 0 || last_block >= static_cast<int>(blocks.size()))
    throw std::invalid_argument("last block out of range");

  const double total = static_cast<double>(confusion.total());
  ForgettingProfile p;
  std::int64_t last_predicted = 0;
  for (const auto& labels : blocks) {
    std::int64_t hits = 0, rows = 0;
    for (int y : labels) {
      hits += confusion.at(y, y);
      rows += confusion.row_sum(y);
    }
    p.recall.push_back(rows ? static_cast<double>(hits) / rows : kNaN);
    p.prior.push_back(total > 0 ? rows / total : 0.0);
  }
  for (int t = 0; t < classes; ++t)
    for (int y : blocks[last_block]) last_predicted += confusion.at(t, y);
  p.last_block_share = total > 0 ? last_predicted / total : 0.0;
  return p;
}

Oscillation oscillation_index(const std::vector<fed::RoundRecord>& rounds,
                              int first, int last) {
  std::vector<double> means;
  Oscillation o;
  for (const auto& r : rounds) {
    if (r.round < first || r.round > last) continue;
    means.push_back(r.loss_mean());
    o.envelope.push_back(r.loss_max() - r.loss_min());
  }
  if (means.size() < 2)
    throw std::invalid_argument("oscillation window covers fewer than 2 rounds");
  const double mean = std::accumulate(means.begin(), means.end(), 0.0) / means.size();
  double ss = 0.0;
  for (double m : means) ss += (m - mean) * (m - mean);
  o.index = std::sqrt(ss / means.size());
  return o;
}

void write_grid_csv(std::ostream& out, const std::vector<RunAccuracy>& runs) {
  out << "G,C,alpha,eta,rep,accuracy\n";
  for (const auto& r : runs)
    out << r.blocks << ',' << fmt("%g", r.fraction) << ',' << fmt("%g", r.alpha)
        << ',' << fmt("%g", r.learning_rate) << ',' << r.replicate << ','
        << fmt("%.6f", r.accuracy) << '\n';
}

void write_fairness_csv(std::ostream& out, const FairnessReport& report) {
  out << "client,block,accuracy\n";
  std::vector<std::size_t> order(report.clients.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](auto a, auto b) { return report.clients[a] < report.clients[b]; });
  for (auto i : order)
    out << report.clients[i] << ',' << report.blocks[i] << ','
        << fmt("%.6f", report.accuracies[i]) << '\n';
}

void write_confusion_csv(std::ostream& out, const nn::ConfusionMatrix& confusion) {
  out << "true,pred,count\n";
  for (int t = 0; t < confusion.classes; ++t)
    for (int p = 0; p < confusion.classes; ++p)
      out << t << ',' << p << ',' << confusion.at(t, p) << '\n';
}

template FairnessReport fairness_report<float>(const nn::ModelState<float>&,
                                               const part::FederatedPopulation&,
                                               const data::LabeledDataset&, int);
template FairnessReport fairness_report<double>(const nn::ModelState<double>&,
                                                const part::FederatedPopulation&,
                                                const data::LabeledDataset&, int);

}  // namespace cyclefed::metrics
