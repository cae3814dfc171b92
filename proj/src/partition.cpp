#include "cyclefed/partition.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "cyclefed/rng.hpp"

namespace cyclefed::part {

namespace {

using Indices = std::vector<std::size_t>;

std::vector<Indices> indices_by_label(const data::LabeledDataset& d) {
  std::vector<Indices> out(d.classes);
  for (std::size_t i = 0; i < d.size(); ++i) out[d.labels[i]].push_back(i);
  return out;
}

// `count` contiguous pieces whose sizes differ by at most one.
std::vector<Indices> split_even(const Indices& run, std::size_t count) {
  std::vector<Indices> out;
  const std::size_t base = run.size() / count;
  const std::size_t extra = run.size() % count;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t len = base + (i < extra ? 1 : 0);
    out.emplace_back(run.begin() + pos, run.begin() + pos + len);
    pos += len;
  }
  return out;
}

// As many contiguous pieces of exactly `size` as fit; the tail is dropped.
std::vector<Indices> split_fixed(const Indices& run, std::size_t size) {
  std::vector<Indices> out;
  for (std::size_t pos = 0; pos + size <= run.size(); pos += size)
    out.emplace_back(run.begin() + pos, run.begin() + pos + size);
  return out;
}

FederatedPopulation empty_population(Regime regime, int clients,
                                     std::uint64_t seed) {
  FederatedPopulation p;
  p.regime = regime;
  p.seed = seed;
  p.clients.resize(clients);
  for (int k = 0; k < clients; ++k) p.clients[k].id = k;
  return p;
}

std::vector<int> all_labels(int classes) {
  std::vector<int> v(classes);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

void deal_shards(std::vector<Indices>& shards, std::span<ClientDataset> clients,
                 int per_client, Rng& rng) {
  std::vector<std::size_t> order(shards.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(std::span<std::size_t>(order));
  std::size_t next = 0;
  for (auto& c : clients)
    for (int j = 0; j < per_client; ++j) {
      const auto& s = shards[order[next++]];
      c.train.insert(c.train.end(), s.begin(), s.end());
    }
}

void count_labels(FederatedPopulation& pop, const data::LabeledDataset& d) {
  for (auto& c : pop.clients) {
    c.label_counts.assign(d.classes, 0);
    for (auto i : c.train) ++c.label_counts[d.labels[i]];
  }
}

}  // namespace

std::string_view to_string(Regime r) {
  switch (r) {
    case Regime::iid: return "iid";
    case Regime::shards: return "shards";
    case Regime::block: return "block";
  }
  return "?";
}

Regime parse_regime(std::string_view text) {
  if (text == "iid") return Regime::iid;
  if (text == "shards") return Regime::shards;
  if (text == "block") return Regime::block;
  throw std::invalid_argument("unknown regime '" + std::string(text) + "'");
}

std::string_view to_string(ImbalanceMode m) {
  return m == ImbalanceMode::target_ratio ? "target-ratio" : "power";
}

ImbalanceMode parse_imbalance_mode(std::string_view text) {
  if (text == "target-ratio") return ImbalanceMode::target_ratio;
  if (text == "power") return ImbalanceMode::power;
  throw std::invalid_argument("unknown imbalance mode '" + std::string(text) +
                              "'");
}

void PartitionPlan::validate() const {
  if (clients < 1) throw std::invalid_argument("K must be positive");
  if (shards_per_client < 1) throw std::invalid_argument("s must be >= 1");
  if (!(alpha >= 1.0)) throw std::invalid_argument("alpha must be >= 1");
  if (regime == Regime::block && blocks < 2)
    throw std::invalid_argument("block regime requires G > 1");
  if (regime != Regime::block && blocks != 1)
    throw std::invalid_argument("non-block regimes use G = 1");
}

std::size_t FederatedPopulation::total_samples() const {
  std::size_t n = 0;
  for (const auto& c : clients) n += c.samples();
  return n;
}

std::vector<int> FederatedPopulation::clients_in_block(int block) const {
  std::vector<int> out;
  for (const auto& c : clients)
    if (c.block == block) out.push_back(c.id);
  return out;
}

std::vector<std::size_t> FederatedPopulation::block_totals() const {
  std::vector<std::size_t> out(blocks, 0);
  for (const auto& c : clients) out.at(c.block) += c.samples();
  return out;
}

std::vector<std::size_t> FederatedPopulation::union_holdout() const {
  std::vector<std::size_t> out;
  for (const auto& c : clients)
    out.insert(out.end(), c.holdout.begin(), c.holdout.end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

double target_ratio(double alpha) {
  static constexpr double kAlpha[] = {1.0, 1.5, 2.0, 5.0};
  static constexpr double kRatio[] = {1.0, 2.0, 3.0, 11.0};
  if (!(alpha >= 1.0 && alpha <= 5.0))
    throw std::invalid_argument(
        "target-ratio imbalance needs alpha in [1, 5]");
  for (int i = 0; i < 3; ++i)
    if (alpha <= kAlpha[i + 1]) {
      const double t = (alpha - kAlpha[i]) / (kAlpha[i + 1] - kAlpha[i]);
      return kRatio[i] + t * (kRatio[i + 1] - kRatio[i]);
    }
  return kRatio[3];
}

std::vector<double> imbalance_weights(int blocks, double alpha,
                                      ImbalanceMode mode) {
  if (blocks < 1) throw std::invalid_argument("imbalance_weights: G < 1");
  if (!(alpha >= 1.0)) throw std::invalid_argument("alpha must be >= 1");
  std::vector<double> w(blocks);
  if (mode == ImbalanceMode::target_ratio) {
    const double r = target_ratio(alpha);
    for (int g = 0; g < blocks; ++g) w[g] = std::pow(r, -g);
  } else {
    for (int g = 0; g < blocks; ++g) w[g] = std::pow(g + 1.0, -(alpha - 1.0));
  }
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  for (auto& v : w) v /= total;
  return w;
}

FederatedPopulation partition_iid(const data::LabeledDataset& data,
                                  int clients, std::uint64_t seed) {
  if (clients < 1) throw std::invalid_argument("K must be positive");
  if (static_cast<std::size_t>(clients) > data.size())
    throw std::invalid_argument("K exceeds the number of samples");
  auto pop = empty_population(Regime::iid, clients, seed);
  pop.block_labels = {all_labels(data.classes)};
  Indices order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));
  const std::size_t per = data.size() / clients;
  for (int k = 0; k < clients; ++k)
    pop.clients[k].train.assign(order.begin() + k * per,
                                order.begin() + (k + 1) * per);
  count_labels(pop, data);
  return pop;
}

FederatedPopulation partition_shards(const data::LabeledDataset& data,
                                     int clients, int shards_per_client,
                                     std::uint64_t seed) {
  PartitionPlan{Regime::shards, clients, shards_per_client}.validate();
  const std::size_t total = static_cast<std::size_t>(clients) * shards_per_client;
  if (total > data.size())
    throw std::invalid_argument("more shards than samples");
  auto pop = empty_population(Regime::shards, clients, seed);
  pop.shards_per_client = shards_per_client;
  pop.block_labels = {all_labels(data.classes)};

  const auto by_label = indices_by_label(data);
  std::vector<Indices> shards;
  if (total % data.classes == 0) {
    // Label-pure shards: every label is cut into the same number of pieces.
    const std::size_t per_label = total / data.classes;
    for (const auto& run : by_label) {
      if (run.size() < per_label)
        throw std::invalid_argument("a label has fewer samples than shards");
      auto pieces = split_even(run, per_label);
      shards.insert(shards.end(), pieces.begin(), pieces.end());
    }
  } else {
    if (data.size() % total != 0)
      throw std::invalid_argument(
          "K*s shards must divide the sorted data evenly");
    Indices sorted;
    for (const auto& run : by_label) sorted.insert(sorted.end(), run.begin(), run.end());
    shards = split_fixed(sorted, data.size() / total);
  }
  Rng rng(seed);
  deal_shards(shards, pop.clients, shards_per_client, rng);
  count_labels(pop, data);
  return pop;
}

FederatedPopulation partition_blocks(const data::LabeledDataset& data,
                                     int clients, int shards_per_client,
                                     int blocks, double alpha,
                                     std::uint64_t seed, ImbalanceMode mode) {
  PartitionPlan{Regime::block, clients, shards_per_client, blocks, alpha, mode}
      .validate();
  if (clients % blocks != 0)
    throw std::invalid_argument("K must be divisible by G");
  if (data.classes % blocks != 0)
    throw std::invalid_argument("the class count must be divisible by G");

  auto pop = empty_population(Regime::block, clients, seed);
  pop.blocks = blocks;
  pop.shards_per_client = shards_per_client;
  pop.alpha = alpha;
  pop.imbalance = mode;
  const int labels_per_block = data.classes / blocks;
  const int per_block = clients / blocks;
  const std::size_t draws = static_cast<std::size_t>(per_block) * shards_per_client;
  const auto by_label = indices_by_label(data);
  const std::vector<double> weights =
      alpha > 1.0 ? imbalance_weights(blocks, alpha, mode)
                  : std::vector<double>(blocks, 1.0 / blocks);
  Rng rng(seed);

  for (int g = 0; g < blocks; ++g) {
    std::vector<int> labels(labels_per_block);
    std::iota(labels.begin(), labels.end(), g * labels_per_block);
    pop.block_labels.push_back(labels);
    auto members = std::span(pop.clients).subspan(g * per_block, per_block);
    for (auto& c : members) c.block = g;

    std::size_t min_label = data.size();
    for (int y : labels) min_label = std::min(min_label, by_label[y].size());

    if (alpha == 1.0) {
      // Balanced: the block's data is cut into exactly `draws` shards and
      // dealt without replacement.
      std::vector<Indices> shards;
      if (draws % labels_per_block == 0) {
        const std::size_t per_label = draws / labels_per_block;
        if (min_label < per_label)
          throw std::invalid_argument("a label has fewer samples than shards");
        for (int y : labels) {
          auto pieces = split_even(by_label[y], per_label);
          shards.insert(shards.end(), pieces.begin(), pieces.end());
        }
      } else {
        Indices run;
        for (int y : labels) run.insert(run.end(), by_label[y].begin(), by_label[y].end());
        if (run.size() < draws)
          throw std::invalid_argument("block has fewer samples than shards");
        shards = split_even(run, draws);
      }
      deal_shards(shards, members, shards_per_client, rng);
      continue;
    }

    // Imbalanced: shard size is set so the block's expected total follows
    // its weight; shards are drawn with replacement from a label-pure pool.
    const double target = weights[g] * static_cast<double>(data.size());
    std::size_t size = static_cast<std::size_t>(
        std::floor(target / static_cast<double>(draws)));
    size = std::clamp<std::size_t>(size, 1, std::max<std::size_t>(min_label, 1));
    std::vector<Indices> pool;
    for (int y : labels) {
      auto pieces = split_fixed(by_label[y], size);
      pool.insert(pool.end(), pieces.begin(), pieces.end());
    }
    if (pool.empty()) throw std::invalid_argument("block has no samples");
    for (auto& c : members)
      for (int j = 0; j < shards_per_client; ++j) {
        const auto& s = pool[rng.below(pool.size())];
        c.train.insert(c.train.end(), s.begin(), s.end());
      }
  }
  count_labels(pop, data);
  return pop;
}

FederatedPopulation make_population(const data::LabeledDataset& data,
                                    const PartitionPlan& plan) {
  plan.validate();
  switch (plan.regime) {
    case Regime::iid:
      return partition_iid(data, plan.clients, plan.seed);
    case Regime::shards:
      return partition_shards(data, plan.clients, plan.shards_per_client,
                              plan.seed);
    case Regime::block:
      return partition_blocks(data, plan.clients, plan.shards_per_client,
                              plan.blocks, plan.alpha, plan.seed,
                              plan.imbalance);
  }
  throw std::invalid_argument("unknown regime");
}

void build_holdouts(FederatedPopulation& population,
                    const data::LabeledDataset& test, int per_client,
                    std::uint64_t seed) {
  if (per_client < 1)
    throw std::invalid_argument("holdout size per client must be >= 1");
  population.holdout_size = per_client;
  const auto pools = indices_by_label(test);

  for (auto& c : population.clients) {
    if (c.label_counts.empty() || c.samples() == 0)
      throw std::invalid_argument("client without train labels");
    const std::size_t classes = c.label_counts.size();
    if (classes > pools.size())
      throw std::invalid_argument("test split has fewer classes than train");

    // Largest-remainder apportionment of per_client over the histogram.
    std::vector<std::size_t> quota(classes, 0);
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t y = 0; y < classes; ++y) {
      const double exact = static_cast<double>(per_client) *
                           static_cast<double>(c.label_counts[y]) /
                           static_cast<double>(c.samples());
      quota[y] = static_cast<std::size_t>(std::floor(exact));
      assigned += quota[y];
      remainders.emplace_back(exact - std::floor(exact), y);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t i = 0; assigned < static_cast<std::size_t>(per_client); ++i) {
      ++quota[remainders[i % classes].second];
      ++assigned;
    }

    Rng rng(derive_seed(seed, Stream::holdout, static_cast<std::uint64_t>(c.id)));
    c.holdout.clear();
    c.holdout_with_replacement = false;
    for (std::size_t y = 0; y < classes; ++y) {
      if (quota[y] == 0) continue;
      Indices pool = pools[y];
      if (pool.empty())
        throw std::invalid_argument("test split lacks label " + std::to_string(y));
      if (quota[y] <= pool.size()) {
        for (std::size_t i = 0; i < quota[y]; ++i) {
          const std::size_t j = i + rng.below(pool.size() - i);
          std::swap(pool[i], pool[j]);
          c.holdout.push_back(pool[i]);
        }
      } else {
        c.holdout_with_replacement = true;
        for (std::size_t i = 0; i < quota[y]; ++i)
          c.holdout.push_back(pool[rng.below(pool.size())]);
      }
    }
    std::sort(c.holdout.begin(), c.holdout.end());
  }
}

namespace {

constexpr std::string_view kManifestHeader = "cyclefed-manifest 1";

template <class T>
void write_list(std::ostream& out, std::string_view tag, const std::vector<T>& v) {
  out << tag << ' ' << v.size();
  for (const auto& x : v) out << ' ' << x;
  out << '\n';
}

class LineReader {
 public:
  explicit LineReader(std::istream& in) : in_(in) {}

  std::istringstream next(std::string_view expected) {
    std::string line;
    do {
      if (!std::getline(in_, line))
        throw ManifestError("manifest truncated: expected '" +
                            std::string(expected) + "'");
      ++number_;
    } while (line.empty());
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag != expected)
      fail("expected '" + std::string(expected) + "', found '" + tag + "'");
    return ss;
  }

  std::string peek_tag() {
    const auto pos = in_.tellg();
    std::string tag;
    in_ >> tag;
    in_.seekg(pos);
    return tag;
  }

  template <class T>
  T value(std::istringstream& ss, std::string_view what) {
    T v{};
    if (!(ss >> v)) fail("bad value for " + std::string(what));
    return v;
  }

  template <class T>
  std::vector<T> list(std::string_view tag) {
    auto ss = next(tag);
    const auto n = value<std::size_t>(ss, tag);
    std::vector<T> v(n);
    for (auto& x : v) x = value<T>(ss, tag);
    std::string extra;
    if (ss >> extra) fail("trailing data after " + std::string(tag));
    return v;
  }

  [[noreturn]] void fail(const std::string& what) const {
    throw ManifestError("manifest line " + std::to_string(number_) + ": " + what);
  }

 private:
  std::istream& in_;
  int number_ = 0;
};

}  // namespace

void write_manifest(std::ostream& out, const FederatedPopulation& population) {
  char alpha[32];
  std::snprintf(alpha, sizeof alpha, "%.17g", population.alpha);
  out << kManifestHeader << '\n'
      << "regime " << to_string(population.regime) << '\n'
      << "blocks " << population.blocks << '\n'
      << "shards_per_client " << population.shards_per_client << '\n'
      << "alpha " << alpha << '\n'
      << "imbalance " << to_string(population.imbalance) << '\n'
      << "seed " << population.seed << '\n'
      << "holdout_size " << population.holdout_size << '\n';
  for (const auto& [k, v] : population.metadata) {
    if (k.find_first_of(" \t\n") != std::string::npos ||
        v.find('\n') != std::string::npos)
      throw ManifestError("metadata key or value not representable: " + k);
    out << "meta " << k << ' ' << v << '\n';
  }
  for (std::size_t g = 0; g < population.block_labels.size(); ++g) {
    out << "block " << g;
    for (int y : population.block_labels[g]) out << ' ' << y;
    out << '\n';
  }
  out << "clients " << population.clients.size() << '\n';
  for (const auto& c : population.clients) {
    out << "client " << c.id << " block " << c.block << " holdout_replacement "
        << (c.holdout_with_replacement ? 1 : 0) << '\n';
    write_list(out, "train", c.train);
    write_list(out, "holdout", c.holdout);
    write_list(out, "label_counts", c.label_counts);
  }
  out << "end\n";
}

FederatedPopulation read_manifest(std::istream& in) {
  LineReader r(in);
  FederatedPopulation p;
  {
    std::string line;
    while (std::getline(in, line) && line.empty()) {}
    if (line != kManifestHeader)
      throw ManifestError("not a cyclefed manifest (header '" + line + "')");
  }
  auto scalar = [&](std::string_view key) {
    auto ss = r.next(key);
    std::string v;
    if (!(ss >> v)) r.fail("missing value for " + std::string(key));
    return v;
  };
  try {
    p.regime = parse_regime(scalar("regime"));
    p.blocks = std::stoi(scalar("blocks"));
    p.shards_per_client = std::stoi(scalar("shards_per_client"));
    p.alpha = std::stod(scalar("alpha"));
    p.imbalance = parse_imbalance_mode(scalar("imbalance"));
    p.seed = std::stoull(scalar("seed"));
    p.holdout_size = std::stoi(scalar("holdout_size"));
  } catch (const ManifestError&) {
    throw;
  } catch (const std::exception& e) {
    throw ManifestError(std::string("bad manifest header value: ") + e.what());
  }

  while (r.peek_tag() == "meta") {
    auto ss = r.next("meta");
    std::string key, value;
    ss >> key;
    std::getline(ss >> std::ws, value);
    p.metadata[key] = value;
  }
  for (int g = 0; g < p.blocks; ++g) {
    auto ss = r.next("block");
    if (r.value<int>(ss, "block") != g) r.fail("blocks out of order");
    std::vector<int> labels;
    for (int y; ss >> y;) labels.push_back(y);
    p.block_labels.push_back(std::move(labels));
  }
  auto cs = r.next("clients");
  const auto count = r.value<std::size_t>(cs, "clients");
  p.clients.resize(count);
  for (std::size_t k = 0; k < count; ++k) {
    auto& c = p.clients[k];
    auto ss = r.next("client");
    c.id = r.value<int>(ss, "client id");
    std::string tag;
    if (!(ss >> tag) || tag != "block") r.fail("expected block after client id");
    c.block = r.value<int>(ss, "client block");
    if (c.block < 0 || c.block >= p.blocks) r.fail("client block out of range");
    if (!(ss >> tag) || tag != "holdout_replacement")
      r.fail("expected holdout_replacement");
    c.holdout_with_replacement = r.value<int>(ss, "holdout_replacement") != 0;
    c.train = r.list<std::size_t>("train");
    c.holdout = r.list<std::size_t>("holdout");
    c.label_counts = r.list<std::size_t>("label_counts");
  }
  r.next("end");
  return p;
}

}  // namespace cyclefed::part
