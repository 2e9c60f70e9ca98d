// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "sum/error.hpp"
#include "sum/trainer.hpp"

namespace sum {
namespace {

DriftConfig world_config() {
  DriftConfig c;
  c.num_users = 300;
  c.requests_per_day = 1500;
  return c;
}

// Desk tower with narrower widths to keep the tests quick.
TowerConfig small_tower() {
  TowerConfig t = TowerConfig::desk_default();
  t.sparse.resize(world_config().num_sparse());
  t.mlp_hidden = 16;
  t.dc_hidden = 16;
  t.mix_hidden = 16;
  return t;
}

TrainConfig train_config(double lr = 1e-3) {
  TrainConfig c;
  c.learning_rate = lr;
  return c;
}

std::vector<Tensorf> weights(const UserModel<float>& m) {
  std::vector<Tensorf> out;
  for (const auto& p : m.parameters()) out.push_back(p.value);
  return out;
}

double max_abs_diff(const std::vector<Tensorf>& a, const std::vector<Tensorf>& b) {
  double d = 0;
  for (std::size_t k = 0; k < a.size(); ++k)
    for (std::size_t i = 0; i < a[k].size(); ++i) d = std::max(d, double(std::abs(a[k][i] - b[k][i])));
  return d;
}

class TrainerTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    world_ = new SyntheticWorld(world_config());
    for (int d = 0; d < 5; ++d) days_.push_back(world_->generate_day(d));
  }
  static void TearDownTestSuite() {
    delete world_;
    days_.clear();
  }
  static std::vector<const DayData*> span(int first, int last) {
    std::vector<const DayData*> out;
    for (int d = first; d <= last; ++d) out.push_back(&days_[d]);
    return out;
  }

  static SyntheticWorld* world_;
  static std::vector<DayData> days_;
};

SyntheticWorld* TrainerTest::world_ = nullptr;
std::vector<DayData> TrainerTest::days_;

TEST_F(TrainerTest, InitialTrainingReducesHeldOutLoss) {
  Trainer t(small_tower(), train_config(2e-3));
  const double before = t.mean_loss(days_[3]);
  SnapshotStore store;
  auto s = t.train_initial(span(0, 2), store);
  EXPECT_EQ(s->version, 1u);
  EXPECT_EQ(s->trained_through_day, 2);
  const double after = t.mean_loss(days_[3]);
  EXPECT_LT(after, before - 0.05);
  const auto ne = evaluate(*s, span(3, 3));
  ASSERT_EQ(ne.size(), 2u);
  EXPECT_LT(ne[0], 0.99);
}

TEST_F(TrainerTest, DeterministicGivenSeeds) {
  SnapshotStore a, b;
  Trainer ta(small_tower(), train_config()), tb(small_tower(), train_config());
  auto sa = ta.train_initial(span(0, 0), a);
  auto sb = tb.train_initial(span(0, 0), b);
  EXPECT_EQ(encode_snapshot(*sa), encode_snapshot(*sb));
}

TEST_F(TrainerTest, ZeroLearningRateKeepsInitialWeights) {
  Trainer t(small_tower(), train_config(0.0));
  const auto init = weights(t.model());
  SnapshotStore store;
  auto s = t.train_initial(span(0, 0), store);
  EXPECT_EQ(max_abs_diff(init, weights(*s->model)), 0.0);
}

TEST_F(TrainerTest, SgdStepIsNegativeScaledGradient) {
  TrainConfig c = train_config(0.05);
  c.optimizer = OptimizerKind::Sgd;
  c.batch_size = 1;
  DayData one{0, {days_[0].requests[0]}};
  Trainer t(small_tower(), c);
  // Independent route: gradient of the same request on a copy of the model.
  UserModel<float> copy = t.model();
  copy.zero_grad();
  const std::vector<float> tw = {1.f, 1.f};
  request_loss(copy, one.requests[0], tw, true);
  SnapshotStore store;
  auto s = t.train_initial(std::vector<const DayData*>{&one}, store);
  const auto& after = s->model->parameters();
  const auto& before = copy.parameters();
  double worst = 0;
  for (std::size_t k = 0; k < before.size(); ++k)
    for (std::size_t i = 0; i < before[k].value.size(); ++i) {
      const double expect = before[k].value[i] - 0.05 * before[k].grad[i];
      worst = std::max(worst, std::abs(expect - after[k].value[i]));
    }
  EXPECT_LT(worst, 1e-6);
}

TEST_F(TrainerTest, AdamFirstStepMovesEachWeightByAtMostLearningRate) {
  TrainConfig c = train_config(1e-2);
  c.batch_size = 1;
  DayData one{0, {days_[0].requests[0]}};
  Trainer t(small_tower(), c);
  UserModel<float> copy = t.model();
  copy.zero_grad();
  request_loss(copy, one.requests[0], std::vector<float>{1.f, 1.f}, true);
  SnapshotStore store;
  auto s = t.train_initial(std::vector<const DayData*>{&one}, store);
  const auto& after = s->model->parameters();
  const auto& before = copy.parameters();
  std::size_t moved = 0;
  for (std::size_t k = 0; k < before.size(); ++k)
    for (std::size_t i = 0; i < before[k].value.size(); ++i) {
      const double step = after[k].value[i] - before[k].value[i];
      const double g = before[k].grad[i];
      EXPECT_LE(std::abs(step), 1e-2 * (1 + 1e-4));
      if (std::abs(g) > 1e-5) {
        // Bias-corrected first step is lr * g / (|g| + eps).
        EXPECT_NEAR(step, -1e-2 * g / (std::abs(g) + 1e-8), 1e-5);
        ++moved;
      }
    }
  EXPECT_GT(moved, 100u);
}

TEST_F(TrainerTest, RecurringUpdatesAdvanceLineage) {
  Trainer t(small_tower(), train_config());
  SnapshotStore store;
  t.train_initial(span(0, 2), store);
  const auto v1 = weights(*store.latest()->model);
  auto s2 = t.recurring_update(store, days_[3]);
  EXPECT_EQ(s2->version, 2u);
  EXPECT_EQ(s2->trained_through_day, 3);
  EXPECT_GT(max_abs_diff(v1, weights(*s2->model)), 0.0);
  // The published snapshot is independent of further training.
  const auto frozen = weights(*s2->model);
  auto s3 = t.recurring_update(store, days_[4]);
  EXPECT_EQ(s3->version, 3u);
  EXPECT_EQ(max_abs_diff(frozen, weights(*s2->model)), 0.0);
  EXPECT_EQ(store.versions(), (std::vector<std::uint64_t>{1, 2, 3}));
}

TEST_F(TrainerTest, StaleOrSkippedDaysAreRejected) {
  Trainer t(small_tower(), train_config());
  SnapshotStore store;
  EXPECT_THROW(t.recurring_update(store, days_[3]), StalenessError);
  t.train_initial(span(0, 2), store);
  EXPECT_THROW(t.recurring_update(store, days_[2]), StalenessError);
  EXPECT_THROW(t.recurring_update(store, days_[4]), StalenessError);
  EXPECT_EQ(store.versions(), (std::vector<std::uint64_t>{1}));
  EXPECT_NO_THROW(t.recurring_update(store, days_[3]));
}

TEST_F(TrainerTest, FreshTrainerContinuesFromStore) {
  // A second trainer that never trained adopts the latest snapshot.
  Trainer a(small_tower(), train_config());
  SnapshotStore store;
  a.train_initial(span(0, 1), store);
  Trainer b(small_tower(), train_config());
  auto s = b.recurring_update(store, days_[2]);
  EXPECT_EQ(s->version, 2u);
}

TEST_F(TrainerTest, EmptyStreamRejected) {
  Trainer t(small_tower(), train_config());
  SnapshotStore store;
  EXPECT_THROW(t.train_initial({}, store), Error);
  DayData empty{0, {}};
  EXPECT_THROW(t.train_initial(std::vector<const DayData*>{&empty}, store), Error);
}

TEST_F(TrainerTest, SchemaMismatchRejected) {
  TowerConfig wrong = small_tower();
  wrong.ad_dim = 5;
  Trainer t(wrong, train_config());
  SnapshotStore store;
  EXPECT_THROW(t.train_initial(span(0, 0), store), ConfigError);
}

TEST(TrainConfig, JsonRoundTripAndValidation) {
  TrainConfig c;
  c.learning_rate = 0.01;
  c.optimizer = OptimizerKind::Sgd;
  c.batch_size = 3;
  const TrainConfig back = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_THROW(train_config_from_json({{"lr", 1}}), ConfigError);
  EXPECT_THROW(train_config_from_json({{"optimizer", "rmsprop"}}), ConfigError);
  EXPECT_THROW(train_config_from_json({{"batch_size", 0}}), ConfigError);
  EXPECT_THROW(train_config_from_json({{"task_weights", {1.0, 0.0}}}), ConfigError);
  TrainConfig bad;
  bad.task_weights = {1.0};
  EXPECT_THROW(Trainer(TowerConfig::tiny(), bad), ConfigError);
}

SnapshotPtr tiny_snapshot(std::uint64_t version, std::uint64_t seed = 1) {
  UserModel<float> m(TowerConfig::tiny(), seed);
  return publish_snapshot(m, version, std::int64_t(version));
}

TEST(SnapshotStore, VersionsMustBeGapFree) {
  SnapshotStore s;
  EXPECT_EQ(s.latest(), nullptr);
  EXPECT_THROW(s.publish(tiny_snapshot(2)), VersionError);
  s.publish(tiny_snapshot(1));
  EXPECT_THROW(s.publish(tiny_snapshot(1)), VersionError);
  EXPECT_THROW(s.publish(tiny_snapshot(3)), VersionError);
  s.publish(tiny_snapshot(2));
  EXPECT_EQ(s.latest()->version, 2u);
  EXPECT_EQ(s.find(1)->version, 1u);
  EXPECT_EQ(s.find(7), nullptr);
}

TEST(SnapshotStore, RetentionEvictsOldest) {
  SnapshotStore s(3);
  for (std::uint64_t v = 1; v <= 5; ++v) s.publish(tiny_snapshot(v));
  EXPECT_EQ(s.versions(), (std::vector<std::uint64_t>{3, 4, 5}));
  EXPECT_EQ(s.find(2), nullptr);
}

TEST(SnapshotStore, DirectoryManifestRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "sum_snapstore_test";
  std::filesystem::remove_all(dir);
  {
    SnapshotStore s(2, dir);
    for (std::uint64_t v = 1; v <= 3; ++v) s.publish(tiny_snapshot(v, v));
  }
  EXPECT_FALSE(std::filesystem::exists(dir / snapshot_file_name(1)));
  SnapshotStore back = SnapshotStore::open(dir, 2);
  EXPECT_EQ(back.versions(), (std::vector<std::uint64_t>{2, 3}));
  EXPECT_EQ(encode_snapshot(*back.latest()), encode_snapshot(*tiny_snapshot(3, 3)));
  back.publish(tiny_snapshot(4));
  EXPECT_EQ(SnapshotStore::open(dir, 2).versions(), (std::vector<std::uint64_t>{3, 4}));

  // Corrupt a payload byte.
  const auto path = dir / snapshot_file_name(4);
  std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(100);
  f.put('\x7f');
  f.close();
  EXPECT_THROW(SnapshotStore::open(dir, 2), FormatError);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace sum
