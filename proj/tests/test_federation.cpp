#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "cyclefed/checkpoint.hpp"
#include "cyclefed/federation.hpp"
#include "support/sgd_oracle.hpp"

namespace cyclefed::fed {
namespace {

part::FederatedPopulation labels_population(int clients, int blocks) {
  data::LabeledDataset d;
  d.classes = 10;
  for (int i = 0; i < 20 * clients; ++i) d.labels.push_back(i % 10);
  if (blocks == 1) return part::partition_iid(d, clients, 1);
  return part::partition_blocks(d, clients, 2, blocks, 1.0, 1);
}

template <class Real>
bool bit_equal(const std::vector<Real>& a, const std::vector<Real>& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(Real)) == 0;
}

struct Fixture {
  data::LabeledDataset train = data::synth_dataset(10, 12, 5, data::Split::train);
  data::LabeledDataset test = data::synth_dataset(10, 6, 5, data::Split::test);
  part::FederatedPopulation pop;

  explicit Fixture(int clients = 4, int blocks = 1) {
    pop = blocks == 1 ? part::partition_iid(train, clients, 3)
                      : part::partition_blocks(train, clients, 2, blocks, 1.0, 3);
    part::build_holdouts(pop, test, 10, 4);
  }

  template <class Real>
  FedRunState<Real> state(double fraction, std::uint64_t seed = 42) const {
    FedRunState<Real> s;
    s.model = nn::build_model<Real>(nn::make_spec("mlp-small"),
                                    derive_seed(seed, Stream::init));
    s.schedule = default_schedule(pop, fraction);
    s.population = &pop;
    s.train = &train;
    s.test = &test;
    s.local = {1, 10, 0.05, 0.5};
    s.seed = seed;
    return s;
  }
};

TEST(Selection, UniformFivePercent) {
  const auto pop = labels_population(100, 1);
  SamplingSchedule s{ScheduleKind::uniform, 0.05, {}};
  Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    const auto S = select_clients(s, pop, t, rng);
    ASSERT_EQ(S.size(), 5u);
    EXPECT_TRUE(std::is_sorted(S.begin(), S.end()));
    EXPECT_EQ(std::set<int>(S.begin(), S.end()).size(), 5u);
    for (int k : S) EXPECT_TRUE(k >= 0 && k < 100);
  }
  for (double C : {0.1, 0.2, 1.0})
    EXPECT_EQ((SamplingSchedule{ScheduleKind::uniform, C, {}}.selection_size(pop)),
              static_cast<int>(C * 100 + 0.5));
  EXPECT_EQ((SamplingSchedule{ScheduleKind::uniform, 0.001, {}}.selection_size(pop)), 1);
}

TEST(Selection, BlockCyclicFullParticipationCaps) {
  const auto pop = labels_population(100, 5);
  SamplingSchedule s{ScheduleKind::block_cyclic, 1.0, {}};
  Rng rng(2);
  for (int t = 0; t < 10; ++t) {
    const auto S = select_clients(s, pop, t, rng);
    ASSERT_EQ(S.size(), 20u);
    for (int k : S) EXPECT_EQ(pop.clients[k].block, t % 5);
  }
  for (double C : {0.05, 0.1, 0.2, 1.0}) {
    SamplingSchedule c{ScheduleKind::block_cyclic, C, {}};
    EXPECT_EQ(c.selection_size(pop),
              std::min(static_cast<int>(std::floor(C * 100 + 1e-9)), 20));
  }
}

TEST(Selection, TwoBlocksAlternate) {
  const auto pop = labels_population(100, 2);
  const auto s = default_schedule(pop, 0.1);
  EXPECT_EQ(s.kind, ScheduleKind::block_cyclic);
  std::vector<int> seq;
  for (int t = 0; t < 4; ++t) seq.push_back(s.active_block(t, pop));
  EXPECT_EQ(seq, (std::vector<int>{0, 1, 0, 1}));
}

TEST(Selection, PeriodIsExactlyG) {
  const auto pop = labels_population(100, 5);
  SamplingSchedule s{ScheduleKind::block_cyclic, 0.2, {3, 1, 4, 0, 2}};
  for (int t = 0; t < 50; ++t) {
    EXPECT_EQ(s.active_block(t, pop), s.active_block(t + 5, pop));
    for (int p = 1; p < 5; ++p)
      EXPECT_NE(s.active_block(t, pop), s.active_block(t + p, pop));
  }
  SamplingSchedule bad{ScheduleKind::block_cyclic, 0.2, {0, 0, 1, 2, 3}};
  Rng rng(0);
  EXPECT_THROW(select_clients(bad, pop, 0, rng), std::invalid_argument);
}

TEST(Selection, SameSeedSameClients) {
  const auto pop = labels_population(100, 1);
  SamplingSchedule s{ScheduleKind::uniform, 0.1, {}};
  Rng a(9), b(9);
  EXPECT_EQ(select_clients(s, pop, 0, a), select_clients(s, pop, 0, b));
}

TEST(Local, BatchesPerEpoch) {
  EXPECT_EQ(batches_per_epoch(600, 64), 10u);
  EXPECT_EQ(600 - 9 * 64, 24);
  EXPECT_EQ(batches_per_epoch(64, 64), 1u);
  EXPECT_EQ(batches_per_epoch(65, 64), 2u);
}

TEST(Local, ZeroEpochsRejected) {
  Fixture f;
  const auto g = nn::build_model<float>(nn::make_spec("mlp-small"), 1);
  try {
    client_update(g, f.pop.clients[0], f.train, LocalConfig{0, 10, 0.01, 0.5}, 1);
    FAIL() << "expected an error";
  } catch (const std::invalid_argument& e) {
    EXPECT_STREQ(e.what(), "E must be >= 1");
  }
}

TEST(Local, GlobalUntouchedAndDeterministic) {
  Fixture f;
  const auto g = nn::build_model<float>(nn::make_spec("mlp-small"), 1);
  const auto copy = g.params;
  const LocalConfig cfg{2, 8, 0.05, 0.5};
  const auto a = client_update(g, f.pop.clients[1], f.train, cfg, 77);
  const auto b = client_update(g, f.pop.clients[1], f.train, cfg, 77);
  EXPECT_TRUE(bit_equal(g.params, copy));
  EXPECT_TRUE(bit_equal(a.model.params, b.model.params));
  EXPECT_FALSE(bit_equal(a.model.params, g.params));
  EXPECT_EQ(a.samples, f.pop.clients[1].samples());
  EXPECT_TRUE(std::isfinite(a.loss));
  EXPECT_FALSE(a.diverged);
  const auto c = client_update(g, f.pop.clients[1], f.train, cfg, 78);
  EXPECT_FALSE(bit_equal(a.model.params, c.model.params));
}

TEST(Local, ZeroLearningRateKeepsParams) {
  Fixture f;
  const auto g = nn::build_model<double>(nn::make_spec("mlp-small"), 3);
  const auto u = client_update(g, f.pop.clients[0], f.train, LocalConfig{2, 7, 0.0, 0.5}, 5);
  EXPECT_TRUE(bit_equal(u.model.params, g.params));
}

TEST(Local, DivergenceIsFlagged) {
  Fixture f;
  const auto g = nn::build_model<float>(nn::make_spec("mlp-small"), 1);
  const auto u = client_update(g, f.pop.clients[0], f.train, LocalConfig{3, 5, 1e30, 0.9}, 5);
  EXPECT_TRUE(u.diverged);
  EXPECT_TRUE(std::isnan(u.loss));
}

ClientUpdate<float> fake(int id, std::size_t n, std::vector<float> p) {
  ClientUpdate<float> u;
  u.client = id;
  u.samples = n;
  u.model.spec = nn::make_spec("mlp-small");
  u.model.params = std::move(p);
  return u;
}

TEST(Aggregate, EqualWeightsAverage) {
  const auto m = aggregate<float>({fake(0, 10, {1, 2, 3}), fake(1, 10, {3, 2, -1})});
  EXPECT_EQ(m.params, (std::vector<float>{2, 2, 1}));
}

TEST(Aggregate, SingleClientIdentity) {
  const std::vector<float> p = {1e10f, 1e-30f, -3.25f};
  EXPECT_TRUE(bit_equal(aggregate<float>({fake(4, 17, p)}).params, p));
}

TEST(Aggregate, WeightedByClientSize) {
  const auto m = aggregate<float>({fake(0, 300, {0, 0}), fake(1, 600, {1, 1})});
  for (float v : m.params) EXPECT_FLOAT_EQ(v, 2.0f / 3.0f);
  const auto r = aggregate<float>({fake(1, 300, {0, 0}), fake(0, 600, {1, 1})});
  for (float v : r.params) EXPECT_FLOAT_EQ(v, 2.0f / 3.0f);
}

TEST(Aggregate, ConservesIdenticalUpdates) {
  Rng rng(3);
  std::vector<float> p(1000);
  for (auto& v : p) v = static_cast<float>(rng.normal() * 1e3);
  std::vector<ClientUpdate<float>> ups;
  for (int k = 0; k < 7; ++k) ups.push_back(fake(k * 3, 100 + 37 * k, p));
  EXPECT_TRUE(bit_equal(aggregate(ups).params, p));
}

TEST(Aggregate, OrderIndependent) {
  std::vector<ClientUpdate<float>> ups = {fake(2, 5, {0.1f, 7.f}), fake(0, 9, {0.3f, -1.f}),
                                          fake(1, 4, {2.f, 0.5f})};
  auto shuffled = ups;
  std::swap(shuffled[0], shuffled[2]);
  EXPECT_TRUE(bit_equal(aggregate(ups).params, aggregate(shuffled).params));
}

TEST(Aggregate, DivergentDroppedAndAllDivergedAborts) {
  auto bad = fake(1, 100, {1e9f, 1e9f});
  bad.diverged = true;
  const auto m = aggregate<float>({fake(0, 10, {1, 2}), bad});
  EXPECT_EQ(m.params, (std::vector<float>{1, 2}));
  EXPECT_THROW(aggregate<float>({bad}), AggregationError);
  EXPECT_THROW(aggregate<float>({}), AggregationError);
}

TEST(Aggregate, StreamingRequiresAscendingIds) {
  Aggregator<float> agg;
  std::vector<float> p = {1, 2};
  agg.add(3, 1, p);
  EXPECT_THROW(agg.add(3, 1, p), std::invalid_argument);
  EXPECT_THROW(agg.add(1, 1, p), std::invalid_argument);
  EXPECT_THROW(Aggregator<float>().result(), AggregationError);
}

TEST(Rounds, FixedBudgetRecordsAndEvaluations) {
  Fixture f;
  auto s = f.state<float>(0.25);
  int observed = 0;
  const auto out = run_rounds(s, Budget::fixed_rounds(100), 5,
                              [&](const RoundRecord&) { ++observed; });
  ASSERT_EQ(out.rounds.size(), 100u);
  EXPECT_EQ(observed, 100);
  int evals = 0;
  for (const auto& r : out.rounds) {
    evals += r.consensus_accuracy.has_value();
    EXPECT_EQ(r.selected.size(), 1u);
    EXPECT_LE(r.loss_min(), r.loss_max());
  }
  EXPECT_EQ(evals, 20);
  EXPECT_TRUE(out.rounds.back().consensus_accuracy.has_value());
  EXPECT_EQ(s.round, 100);
}

TEST(Rounds, FinalRoundAlwaysEvaluated) {
  Fixture f;
  auto s = f.state<float>(0.5);
  const auto out = run_rounds(s, Budget::fixed_rounds(7), 5);
  EXPECT_TRUE(out.rounds[4].consensus_accuracy.has_value());
  EXPECT_TRUE(out.rounds[6].consensus_accuracy.has_value());
  EXPECT_FALSE(out.rounds[5].consensus_accuracy.has_value());
}

TEST(Rounds, FrozenModelStopsAfterPatience) {
  Fixture f;
  auto s = f.state<float>(0.5);
  s.local.learning_rate = 0.0;
  const auto out = run_rounds(s, Budget::until_convergence(0.0, 3, 1000), 2);
  EXPECT_TRUE(out.converged);
  EXPECT_EQ(out.rounds.size(), 6u);
  EXPECT_EQ(out.best_accuracy, out.initial_accuracy);
}

TEST(Rounds, ConvergenceCap) {
  Fixture f;
  auto s = f.state<float>(0.5);
  const auto out = run_rounds(s, Budget::until_convergence(0.0, 1000, 7), 3);
  EXPECT_EQ(out.rounds.size(), 7u);
  EXPECT_FALSE(out.converged);
  EXPECT_TRUE(out.rounds.back().consensus_accuracy.has_value());
}

TEST(Rounds, BlockCyclicRecordsActiveBlock) {
  Fixture f(10, 5);
  auto s = f.state<float>(1.0);
  const auto out = run_rounds(s, Budget::fixed_rounds(6), 5);
  for (const auto& r : out.rounds) {
    EXPECT_EQ(r.block, r.round % 5);
    EXPECT_EQ(r.selected.size(), 2u);
    for (int k : r.selected) EXPECT_EQ(f.pop.clients[k].block, r.block);
  }
}

std::string csv(const std::vector<RoundRecord>& r) {
  std::ostringstream ss;
  write_rounds_csv(ss, r, false);
  return ss.str();
}

TEST(Rounds, SameSeedSameRecords) {
  Fixture f;
  auto a = f.state<float>(0.5, 11);
  auto b = f.state<float>(0.5, 11);
  const auto ra = run_rounds(a, Budget::fixed_rounds(6), 2);
  const auto rb = run_rounds(b, Budget::fixed_rounds(6), 2);
  EXPECT_EQ(csv(ra.rounds), csv(rb.rounds));
  EXPECT_TRUE(bit_equal(a.model.params, b.model.params));
  auto c = f.state<float>(0.5, 12);
  run_rounds(c, Budget::fixed_rounds(6), 2);
  EXPECT_FALSE(bit_equal(a.model.params, c.model.params));
}

TEST(Rounds, ParallelEqualsSerial) {
  Fixture f(8, 1);
  auto serial = f.state<float>(1.0, 5);
  auto parallel = f.state<float>(1.0, 5);
  parallel.threads = 3;
  const auto rs = run_rounds(serial, Budget::fixed_rounds(3), 1);
  const auto rp = run_rounds(parallel, Budget::fixed_rounds(3), 1);
  EXPECT_TRUE(bit_equal(serial.model.params, parallel.model.params));
  EXPECT_EQ(csv(rs.rounds), csv(rp.rounds));
}

TEST(Rounds, AllDivergedAborts) {
  Fixture f;
  auto s = f.state<float>(0.5);
  s.local = {2, 5, 1e30, 0.9};
  EXPECT_THROW(run_rounds(s, Budget::fixed_rounds(3), 1), AggregationError);
}

TEST(Rounds, CsvLayout) {
  RoundRecord r;
  r.round = 3;
  r.block = 1;
  r.selected = {2, 5};
  r.losses = {0.5, std::numeric_limits<double>::quiet_NaN()};
  r.diverged = {false, true};
  std::ostringstream ss;
  write_rounds_csv(ss, {r}, true);
  EXPECT_EQ(ss.str(),
            "t,block,n_selected,loss_min,loss_mean,loss_max,consensus_acc,seconds\n"
            "3,1,2,0.5,0.5,0.5,,0.0000\n");
}

TEST(Oracle, SingleClientFedAvgIsCentralizedSgd) {
  Fixture f(1, 1);
  auto s = f.state<float>(1.0, 8);
  s.local = {2, 16, 0.05, 0.5};
  const auto init = s.model;
  run_rounds(s, Budget::fixed_rounds(3), 1);
  const auto ref =
      oracle::centralized_sgd(init, f.pop.clients[0].train, f.train, s.local, 8, 3);
  EXPECT_TRUE(bit_equal(s.model.params, ref.params));
}

TEST(Checkpoint, RoundTripBothPrecisions) {
  const auto dir = std::filesystem::temp_directory_path() / "cyclefed_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto f32 = nn::build_model<float>(nn::make_spec("mlp-small"), 1);
  const auto f64 = nn::build_model<double>(nn::make_spec("mlp-small"), 2);
  nn::save_checkpoint(dir / "a.ckpt", f32);
  nn::save_checkpoint(dir / "b.ckpt", f64);
  const auto a = nn::load_checkpoint(dir / "a.ckpt");
  const auto b = nn::load_checkpoint(dir / "b.ckpt");
  ASSERT_TRUE(std::holds_alternative<nn::ModelState<float>>(a));
  ASSERT_TRUE(std::holds_alternative<nn::ModelState<double>>(b));
  EXPECT_TRUE(bit_equal(std::get<nn::ModelState<float>>(a).params, f32.params));
  EXPECT_TRUE(bit_equal(std::get<nn::ModelState<double>>(b).params, f64.params));
  EXPECT_EQ(std::get<nn::ModelState<float>>(a).spec.arch, "mlp-small");
  const auto widened = nn::load_checkpoint_as<double>(dir / "a.ckpt");
  EXPECT_EQ(widened.params[5], static_cast<double>(f32.params[5]));

  {
    std::ofstream bad(dir / "bad.ckpt", std::ios::binary);
    bad << "NOTACKPT....";
  }
  EXPECT_THROW(nn::load_checkpoint(dir / "bad.ckpt"), nn::CheckpointError);
  std::filesystem::resize_file(dir / "a.ckpt", 100);
  EXPECT_THROW(nn::load_checkpoint(dir / "a.ckpt"), nn::CheckpointError);
  EXPECT_THROW(nn::load_checkpoint(dir / "missing.ckpt"), nn::CheckpointError);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace cyclefed::fed
