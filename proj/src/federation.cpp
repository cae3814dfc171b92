#include "cyclefed/federation.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <limits>
#include <mutex>
#include <numeric>
#include <optional>
#include <ostream>
#include <thread>

namespace cyclefed::fed {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

template <class Real>
bool all_finite(const std::vector<Real>& v) {
  for (Real x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

}  // namespace

std::string_view to_string(ScheduleKind k) {
  return k == ScheduleKind::uniform ? "uniform" : "block-cyclic";
}

int SamplingSchedule::selection_size(
    const part::FederatedPopulation& population) const {
  const int K = population.size();
  const int m = std::max(static_cast<int>(std::floor(fraction * K + 1e-9)), 1);
  if (kind == ScheduleKind::uniform) return std::min(m, K);
  return std::min(m, K / population.blocks);
}

int SamplingSchedule::active_block(
    int t, const part::FederatedPopulation& population) const {
  if (kind == ScheduleKind::uniform) return -1;
  const int G = population.blocks;
  const int slot = t % G;
  return block_order.empty() ? slot : block_order[slot];
}

void SamplingSchedule::validate(
    const part::FederatedPopulation& population) const {
  if (population.size() == 0) throw std::invalid_argument("empty population");
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw std::invalid_argument("C must lie in (0, 1]");
  if (kind == ScheduleKind::block_cyclic) {
    const int G = population.blocks;
    if (G < 1 || population.size() % G != 0)
      throw std::invalid_argument("K must be divisible by G");
    if (!block_order.empty()) {
      std::vector<int> sorted = block_order;
      std::sort(sorted.begin(), sorted.end());
      std::vector<int> ids(G);
      std::iota(ids.begin(), ids.end(), 0);
      if (sorted != ids)
        throw std::invalid_argument("block order must permute 0..G-1");
    }
  }
}

SamplingSchedule default_schedule(const part::FederatedPopulation& population,
                                  double fraction) {
  SamplingSchedule s;
  s.kind = population.blocks > 1 ? ScheduleKind::block_cyclic
                                 : ScheduleKind::uniform;
  s.fraction = fraction;
  return s;
}

std::vector<int> select_clients(const SamplingSchedule& schedule,
                                const part::FederatedPopulation& population,
                                int t, Rng& rng) {
  schedule.validate(population);
  std::vector<int> pool;
  const int block = schedule.active_block(t, population);
  if (block < 0) {
    pool.resize(population.size());
    std::iota(pool.begin(), pool.end(), 0);
  } else {
    pool = population.clients_in_block(block);
  }
  const std::size_t m = static_cast<std::size_t>(schedule.selection_size(population));
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = i + rng.below(pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(m);
  std::sort(pool.begin(), pool.end());
  return pool;
}

void LocalConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("E must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("B must be >= 1");
  if (!(learning_rate >= 0.0)) throw std::invalid_argument("eta must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0))
    throw std::invalid_argument("beta must lie in [0, 1)");
}

std::size_t batches_per_epoch(std::size_t samples, int batch_size) {
  if (batch_size < 1) throw std::invalid_argument("B must be >= 1");
  return (samples + batch_size - 1) / batch_size;
}

template <class Real>
ClientUpdate<Real> client_update(const nn::ModelState<Real>& global,
                                 const part::ClientDataset& client,
                                 const data::LabeledDataset& train,
                                 const LocalConfig& config,
                                 std::uint64_t client_seed,
                                 nn::Network<Real>* network) {
  config.validate();
  if (client.train.empty())
    throw std::invalid_argument("client " + std::to_string(client.id) +
                                " has no training data");
  std::optional<nn::Network<Real>> own;
  if (!network) network = &own.emplace(global.spec);

  ClientUpdate<Real> out;
  out.client = client.id;
  out.samples = client.samples();
  out.model = global;
  nn::OptimizerState<Real> opt(config.learning_rate, config.momentum,
                               global.params.size());
  std::vector<Real> grad(global.params.size());
  std::vector<std::size_t> order = client.train;
  const std::size_t B = static_cast<std::size_t>(config.batch_size);

  try {
    for (int e = 0; e < config.epochs; ++e) {
      order = client.train;
      Rng rng(derive_seed(client_seed, Stream::client, static_cast<std::uint64_t>(e)));
      rng.shuffle(std::span<std::size_t>(order));
      double loss_sum = 0.0;
      std::size_t j = 0;
      for (std::size_t start = 0; start < order.size(); start += B, ++j) {
        const std::size_t n = std::min(B, order.size() - start);
        const auto batch = data::make_batch<Real>(
            train, std::span<const std::size_t>(order).subspan(start, n));
        const double loss = network->gradient(
            out.model.params, batch,
            derive_seed(client_seed, Stream::dropout, static_cast<std::uint64_t>(e), j),
            grad);
        nn::sgd_step(out.model, opt, grad);
        loss_sum += loss * static_cast<double>(n);
      }
      out.loss = loss_sum / static_cast<double>(order.size());
    }
    if (!all_finite(out.model.params))
      throw nn::DivergenceError("non-finite parameters after local training");
  } catch (const nn::DivergenceError&) {
    out.diverged = true;
    out.loss = kNaN;
  }
  return out;
}

template <class Real>
void Aggregator<Real>::add(int client, std::size_t samples,
                           std::span<const Real> params) {
  if (client <= last_client_)
    throw std::invalid_argument("aggregation must run in ascending client id");
  if (samples == 0) throw std::invalid_argument("client with zero samples");
  if (count_ == 0) {
    reference_.assign(params.begin(), params.end());
    offset_.assign(params.size(), 0.0);
  } else if (params.size() != reference_.size()) {
    throw nn::ShapeError("aggregate: parameter length mismatch");
  } else {
    const double w = static_cast<double>(samples);
    for (std::size_t i = 0; i < params.size(); ++i)
      offset_[i] += w * (static_cast<double>(params[i]) -
                         static_cast<double>(reference_[i]));
  }
  total_ += static_cast<double>(samples);
  last_client_ = client;
  ++count_;
}

template <class Real>
std::vector<Real> Aggregator<Real>::result() const {
  if (count_ == 0)
    throw AggregationError("no client update to aggregate (all diverged?)");
  std::vector<Real> out(reference_.size());
  if (count_ == 1) return reference_;
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<Real>(static_cast<double>(reference_[i]) +
                               offset_[i] / total_);
  return out;
}

template <class Real>
nn::ModelState<Real> aggregate(std::vector<ClientUpdate<Real>> updates) {
  std::sort(updates.begin(), updates.end(),
            [](const auto& a, const auto& b) { return a.client < b.client; });
  Aggregator<Real> agg;
  const nn::ModelSpec* spec = nullptr;
  for (const auto& u : updates) {
    if (u.diverged) continue;
    agg.add(u.client, u.samples, u.model.params);
    spec = &u.model.spec;
  }
  if (!spec) throw AggregationError("every selected client diverged");
  return {*spec, agg.result()};
}

double RoundRecord::loss_min() const {
  double v = kNaN;
  for (double l : losses)
    if (std::isfinite(l) && !(v <= l)) v = l;
  return v;
}

double RoundRecord::loss_max() const {
  double v = kNaN;
  for (double l : losses)
    if (std::isfinite(l) && !(v >= l)) v = l;
  return v;
}

double RoundRecord::loss_mean() const {
  double s = 0.0;
  int n = 0;
  for (double l : losses)
    if (std::isfinite(l)) s += l, ++n;
  return n ? s / n : kNaN;
}

Budget Budget::fixed_rounds(int rounds) {
  Budget b;
  b.kind = Kind::fixed;
  b.rounds = rounds;
  return b;
}

Budget Budget::until_convergence(double delta, int patience, int cap) {
  Budget b;
  b.kind = Kind::converge;
  b.delta = delta;
  b.patience = patience;
  b.cap = cap;
  return b;
}

void Budget::validate() const {
  if (kind == Kind::fixed && rounds < 1) throw std::invalid_argument("T must be >= 1");
  if (kind == Kind::converge) {
    if (!(delta >= 0.0)) throw std::invalid_argument("delta must be >= 0");
    if (patience < 1) throw std::invalid_argument("patience must be >= 1");
    if (cap < 1) throw std::invalid_argument("round cap must be >= 1");
  }
}

template <class Real>
RunSummary run_rounds(FedRunState<Real>& state, const Budget& budget,
                      int eval_every, const RoundObserver& observer) {
  budget.validate();
  state.local.validate();
  if (eval_every < 1) throw std::invalid_argument("eval_every must be >= 1");
  if (!state.population || !state.train || !state.test)
    throw std::invalid_argument("run state lacks population or data");
  const auto& pop = *state.population;
  state.schedule.validate(pop);
  const auto holdout = pop.union_holdout();
  if (holdout.empty()) throw std::invalid_argument("population has no holdout");

  const int threads = std::max(1, state.threads);
  std::vector<nn::Network<Real>> networks;
  for (int i = 0; i < threads; ++i) networks.emplace_back(state.model.spec);

  auto consensus = [&] {
    return data::evaluate_on(state.model, *state.test, holdout).accuracy;
  };

  RunSummary summary;
  summary.initial_accuracy = consensus();
  summary.best_accuracy = summary.initial_accuracy;
  const bool fixed = budget.kind == Budget::Kind::fixed;
  const int last = fixed ? budget.rounds : budget.cap;
  int stale = 0;

  for (int t = 0; t < last; ++t) {
    const auto start = std::chrono::steady_clock::now();
    RoundRecord rec;
    rec.round = state.round;
    rec.block = state.schedule.active_block(state.round, pop);
    Rng select_rng(derive_seed(state.seed, Stream::select,
                               static_cast<std::uint64_t>(state.round)));
    rec.selected = select_clients(state.schedule, pop, state.round, select_rng);

    std::vector<ClientUpdate<Real>> updates(rec.selected.size());
    auto train_one = [&](std::size_t i, nn::Network<Real>& net) {
      const int k = rec.selected[i];
      updates[i] = client_update(
          state.model, pop.clients[k], *state.train, state.local,
          derive_seed(state.seed, Stream::client,
                      static_cast<std::uint64_t>(state.round),
                      static_cast<std::uint64_t>(k)),
          &net);
    };
    const int workers = std::min<int>(threads, static_cast<int>(updates.size()));
    if (workers <= 1) {
      for (std::size_t i = 0; i < updates.size(); ++i) train_one(i, networks[0]);
    } else {
      std::atomic<std::size_t> next{0};
      std::exception_ptr failure;
      std::mutex failure_mutex;
      std::vector<std::jthread> pool;
      for (int w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
          for (std::size_t i; (i = next.fetch_add(1)) < updates.size();) {
            try {
              train_one(i, networks[w]);
            } catch (...) {
              std::lock_guard lock(failure_mutex);
              if (!failure) failure = std::current_exception();
            }
          }
        });
      pool.clear();
      if (failure) std::rethrow_exception(failure);
    }

    for (const auto& u : updates) {
      rec.losses.push_back(u.loss);
      rec.diverged.push_back(u.diverged);
    }
    state.model = aggregate(std::move(updates));
    ++state.round;

    const bool final_round = t + 1 == last;
    if ((t + 1) % eval_every == 0 || final_round) {
      const double acc = consensus();
      rec.consensus_accuracy = acc;
      if (acc > summary.best_accuracy && acc - summary.best_accuracy >= budget.delta) {
        summary.best_accuracy = acc;
        stale = 0;
      } else {
        summary.best_accuracy = std::max(summary.best_accuracy, acc);
        ++stale;
      }
    }
    rec.seconds = std::chrono::duration<double>(
                      std::chrono::steady_clock::now() - start)
                      .count();
    if (observer) observer(rec);
    summary.rounds.push_back(std::move(rec));

    if (!fixed && stale >= budget.patience) {
      summary.converged = true;
      break;
    }
  }
  return summary;
}

void write_rounds_header(std::ostream& out, bool with_timing) {
  out << "t,block,n_selected,loss_min,loss_mean,loss_max,consensus_acc";
  if (with_timing) out << ",seconds";
  out << '\n';
}

void write_round(std::ostream& out, const RoundRecord& r, bool with_timing) {
  auto loss = [](double v) { return std::isfinite(v) ? fmt("%.9g", v) : "nan"; };
  out << r.round << ',';
  if (r.block >= 0) out << r.block;
  out << ',' << r.selected.size() << ',' << loss(r.loss_min()) << ','
      << loss(r.loss_mean()) << ',' << loss(r.loss_max()) << ',';
  if (r.consensus_accuracy) out << fmt("%.6f", *r.consensus_accuracy);
  if (with_timing) out << ',' << fmt("%.4f", r.seconds);
  out << '\n';
}

void write_rounds_csv(std::ostream& out, const std::vector<RoundRecord>& rounds,
                      bool with_timing) {
  write_rounds_header(out, with_timing);
  for (const auto& r : rounds) write_round(out, r, with_timing);
}

#define CYCLEFED_INSTANTIATE(Real)                                             \
  template ClientUpdate<Real> client_update<Real>(                             \
      const nn::ModelState<Real>&, const part::ClientDataset&,                 \
      const data::LabeledDataset&, const LocalConfig&, std::uint64_t,          \
      nn::Network<Real>*);                                                     \
  template class Aggregator<Real>;                                             \
  template nn::ModelState<Real> aggregate<Real>(std::vector<ClientUpdate<Real>>); \
  template RunSummary run_rounds<Real>(FedRunState<Real>&, const Budget&, int, \
                                       const RoundObserver&);

CYCLEFED_INSTANTIATE(float)
CYCLEFED_INSTANTIATE(double)

#undef CYCLEFED_INSTANTIATE

}  // namespace cyclefed::fed
