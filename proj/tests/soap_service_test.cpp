// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <thread>

#include "extractor_fixtures.hpp"
#include "sum/error.hpp"
#include "sum/fp16.hpp"
#include "sum/soap_service.hpp"

namespace sum {
namespace {

SnapshotPtr make_snapshot(std::uint64_t version, std::uint64_t seed) {
  UserModel<float> m(TowerConfig::tiny(), seed);
  return publish_snapshot(m, version, std::int64_t(version));
}

std::shared_ptr<FeatureStore> make_store(std::size_t pool = 3, std::size_t history = 4) {
  StoreConfig sc;
  sc.num_embeddings = TowerConfig::tiny().num_embeddings;
  sc.dim = TowerConfig::tiny().dim;
  sc.history = history;
  sc.pool_window = pool;
  return std::make_shared<FeatureStore>(sc);
}

ServiceConfig simulated(ModeKind kind) {
  ServiceConfig c;
  c.mode.kind = kind;
  c.compute_workers = 0;
  return c;
}

ServeRequest request(std::uint64_t id, std::uint64_t user, std::int64_t t, std::uint64_t feature_seed = 0) {
  std::mt19937_64 rng(feature_seed ? feature_seed : user * 7919 + 1);
  return ServeRequest{id, user, fixtures::random_features(TowerConfig::tiny(), rng), t};
}

// fp16 round trip of a tensor, the store's storage precision.
Tensorf through_fp16(const Tensorf& t) {
  Tensorf out(t.rows(), t.cols());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = half_to_float(float_to_half(t[i], nullptr));
  return out;
}

void expect_close(const Tensorf& a, const Tensorf& b, float tol) {
  ASSERT_EQ(a.rows(), b.rows());
  ASSERT_EQ(a.cols(), b.cols());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "at " << i;
}

TEST(Soap, RequiresStart) {
  SoapService s(simulated(ModeKind::Async), make_store(), make_snapshot(1, 1));
  EXPECT_THROW(s.serve(request(1, 1, 0)), Error);
  s.start();
  EXPECT_NO_THROW(s.serve(request(1, 1, 0)));
}

TEST(Soap, RejectsMismatchedStore) {
  StoreConfig sc;
  sc.dim = 5;
  EXPECT_THROW(SoapService(simulated(ModeKind::Async), std::make_shared<FeatureStore>(sc), make_snapshot(1, 1)),
               ConfigError);
}

TEST(Soap, AsyncColdStartIsZero) {
  SoapService s(simulated(ModeKind::Async), make_store(), make_snapshot(1, 1));
  s.start();
  const auto r = s.serve(request(7, 42, 0));
  EXPECT_EQ(r.request_id, 7u);
  EXPECT_EQ(r.provenance, Provenance::AsyncCached);
  EXPECT_TRUE(r.versions.empty());
  EXPECT_EQ(r.embedding, Tensorf(2, 8));
}

TEST(Soap, AsyncServesPreviouslyComputedVersion) {
  auto snap = make_snapshot(1, 3);
  SoapService s(simulated(ModeKind::Async), make_store(), snap);
  s.start();
  const auto req = request(1, 5, 0);
  s.serve(req);
  // The compute finishes 2 ms (virtual) later; a request 1 ms later still sees nothing.
  EXPECT_TRUE(s.serve(request(2, 5, 1'000)).versions.empty());
  const auto r = s.serve(request(3, 5, 10'000));
  EXPECT_EQ(r.versions, (std::vector<std::uint64_t>{1}));
  expect_close(r.embedding, through_fp16(snap->model->embed(req.features)), 0.f);
}

TEST(Soap, AsyncPoolsTwoCachedVersions) {
  auto v1 = make_snapshot(1, 3), v2 = make_snapshot(2, 4);
  SoapService s(simulated(ModeKind::Async), make_store(), v1);
  s.start();
  const auto req = request(1, 9, 0);
  s.serve(req);
  s.drain();
  s.swap_snapshot(v2);
  s.serve(request(2, 9, 100'000));
  s.drain();
  const auto r = s.serve(request(3, 9, 200'000));
  EXPECT_EQ(r.versions, (std::vector<std::uint64_t>{2, 1}));
  const Tensorf a = through_fp16(v1->model->embed(req.features)), b = through_fp16(v2->model->embed(req.features));
  Tensorf mean(2, 8);
  for (std::size_t i = 0; i < mean.size(); ++i) mean[i] = (a[i] + b[i]) / 2;
  expect_close(r.embedding, mean, 1e-6f);
}

TEST(Soap, RealtimePoolsCurrentWithCache) {
  auto snap = make_snapshot(1, 3);
  auto store = make_store();
  SoapService s(simulated(ModeKind::Realtime), store, snap);
  s.start();
  const auto req = request(1, 11, 0);
  const Tensorf cur = snap->model->embed(req.features);
  const auto first = s.serve(req);
  EXPECT_EQ(first.provenance, Provenance::Realtime);
  EXPECT_EQ(first.versions, (std::vector<std::uint64_t>{1}));
  expect_close(first.embedding, cur, 0.f);
  ASSERT_EQ(store->read_latest(11, 4).size(), 1u);
  const auto second = s.serve(request(2, 11, 1'000));
  EXPECT_EQ(second.versions, (std::vector<std::uint64_t>{1, 1}));
  const Tensorf q = through_fp16(cur);
  Tensorf mean(2, 8);
  for (std::size_t i = 0; i < mean.size(); ++i) mean[i] = (cur[i] + q[i]) / 2;
  expect_close(second.embedding, mean, 1e-6f);
}

TEST(Soap, RealtimeOverBudgetFallsBack) {
  ServiceConfig c = simulated(ModeKind::Realtime);
  c.injected_compute_delay_ms = 100;
  auto store = make_store();
  SoapService s(c, store, make_snapshot(1, 3));
  s.start();
  for (int i = 0; i < 20; ++i) EXPECT_EQ(s.serve(request(i, 1 + i % 3, i * 1000)).provenance, Provenance::FallbackDefault);
  EXPECT_EQ(s.metrics().fallbacks, 20u);
  EXPECT_EQ(store->write_count(), 0u);
}

TEST(Soap, RealtimeOverBudgetFallsBackOnRealClock) {
  ServiceConfig c;
  c.mode.kind = ModeKind::Realtime;
  c.mode.budget_ms = 5;
  c.injected_compute_delay_ms = 40;
  SoapService s(c, make_store(), make_snapshot(1, 3));
  s.start();
  for (int i = 0; i < 5; ++i) {
    const auto r = s.serve(request(i, 3, 0));
    EXPECT_EQ(r.provenance, Provenance::FallbackDefault);
    EXPECT_LT(r.service_time_us, 40'000);
  }
  c.injected_compute_delay_ms = 0;
  c.mode.budget_ms = 1000;
  SoapService fast(c, make_store(), make_snapshot(1, 3));
  fast.start();
  EXPECT_EQ(fast.serve(request(1, 3, 0)).provenance, Provenance::Realtime);
}

TEST(Soap, BatchServesOnlyTheLastJob) {
  auto v1 = make_snapshot(1, 3), v2 = make_snapshot(2, 4);
  SoapService s(simulated(ModeKind::OfflineBatch), make_store(), v2);
  s.start();
  const auto a = request(1, 1, 0), b = request(2, 2, 0);
  EXPECT_EQ(s.serve(a).embedding, Tensorf(2, 8));
  EXPECT_THROW(s.run_batch_job(*v1, {}), Error);
  s.run_batch_job(*v1, {{1, a.features}});
  auto r = s.serve(a);
  EXPECT_EQ(r.provenance, Provenance::Batch);
  EXPECT_EQ(r.versions, (std::vector<std::uint64_t>{1}));
  EXPECT_EQ(r.embedding, v1->model->embed(a.features));
  // User 2 appeared after the job.
  r = s.serve(b);
  EXPECT_TRUE(r.versions.empty());
  EXPECT_EQ(r.embedding, Tensorf(2, 8));
  s.run_batch_job(*v2, {{2, b.features}});
  EXPECT_EQ(s.serve(b).embedding, v2->model->embed(b.features));
  EXPECT_TRUE(s.serve(a).versions.empty());
}

TEST(Soap, FrozenIgnoresSwaps) {
  auto v1 = make_snapshot(1, 3);
  SoapService s(simulated(ModeKind::Frozen), make_store(), v1);
  s.start();
  s.swap_snapshot(make_snapshot(2, 4));
  const auto req = request(1, 1, 0);
  const auto r = s.serve(req);
  EXPECT_EQ(r.provenance, Provenance::Frozen);
  EXPECT_EQ(r.versions, (std::vector<std::uint64_t>{1}));
  EXPECT_EQ(r.embedding, v1->model->embed(req.features));
}

TEST(Soap, SwapRejectsRegressionAndRepeats) {
  SoapService s(simulated(ModeKind::Async), make_store(), make_snapshot(2, 1));
  EXPECT_THROW(s.swap_snapshot(make_snapshot(1, 1)), VersionError);
  EXPECT_THROW(s.swap_snapshot(make_snapshot(2, 1)), VersionError);
  s.swap_snapshot(make_snapshot(3, 1));
  EXPECT_THROW(s.swap_snapshot(make_snapshot(3, 1)), VersionError);
  EXPECT_EQ(s.current_snapshot()->version, 3u);
  EXPECT_EQ(s.metrics().swaps, 1u);
}

TEST(Soap, TasksStartedAfterSwapUseNewSnapshot) {
  SoapService s(simulated(ModeKind::Async), make_store(8, 8), make_snapshot(1, 1));
  s.start();
  // Queued before the swap but started after it.
  s.serve(request(1, 1, 0));
  s.swap_snapshot(make_snapshot(2, 2));
  s.drain();
  s.serve(request(2, 1, 10'000));
  s.run_ready(20'000);
  s.serve(request(3, 1, 30'000));
  s.swap_snapshot(make_snapshot(3, 3));
  s.drain();
  const auto recs = s.store().read_latest(1, 8);
  std::vector<std::uint64_t> versions;
  for (const auto& r : recs) versions.push_back(r.snapshot_version);
  EXPECT_EQ(versions, (std::vector<std::uint64_t>{3, 2, 2}));
}

TEST(Soap, CoalescingAndDropsAreCounted) {
  ServiceConfig c = simulated(ModeKind::Async);
  c.queue_capacity = 2;
  auto store = make_store();
  SoapService s(c, store, make_snapshot(1, 1));
  s.start();
  s.serve(request(1, 1, 0));
  s.serve(request(2, 1, 0));  // coalesced
  s.serve(request(3, 2, 0));
  s.serve(request(4, 3, 0));  // dropped, queue full
  auto m = s.metrics();
  EXPECT_EQ(m.enqueued, 4u);
  EXPECT_EQ(m.coalesced, 1u);
  EXPECT_EQ(m.dropped, 1u);
  EXPECT_EQ(m.queue_depth, 2u);
  s.drain();
  m = s.metrics();
  EXPECT_EQ(m.compute_writes, m.enqueued - m.coalesced - m.dropped);
  EXPECT_EQ(store->write_count(), 2u);
  EXPECT_TRUE(store->read_latest(3, 1).empty());
}

TEST(Soap, MetricsStartAtZeroAndConserveRequests) {
  SoapService s(simulated(ModeKind::Realtime), make_store(), make_snapshot(1, 1));
  const auto m0 = s.metrics();
  EXPECT_EQ(m0.requests, 0u);
  EXPECT_EQ(m0.read_p99_us, 0.0);
  for (auto v : m0.by_provenance) EXPECT_EQ(v, 0u);
  s.start();
  for (int i = 0; i < 25; ++i) s.serve(request(i, i % 4, i * 100));
  const auto m = s.metrics();
  std::uint64_t total = 0;
  for (auto v : m.by_provenance) total += v;
  EXPECT_EQ(m.requests, 25u);
  EXPECT_EQ(total, 25u);
  EXPECT_NE(m.to_text().find("requests 25"), std::string::npos);
}

TEST(Soap, ResponsesAreDeterministicGivenStoreContents) {
  auto snap = make_snapshot(1, 1);
  std::vector<Tensorf> outs;
  for (int run = 0; run < 2; ++run) {
    SoapService s(simulated(ModeKind::Async), make_store(), snap);
    s.start();
    for (int i = 0; i < 40; ++i) s.serve(request(i, i % 5, i * 3'000));
    s.drain();
    outs.push_back(s.serve(request(99, 2, 1'000'000)).embedding);
  }
  EXPECT_EQ(outs[0], outs[1]);
}

TEST(Soap, ThreadedConservationUnderSwaps) {
  ServiceConfig c;
  c.mode.kind = ModeKind::Async;
  c.compute_workers = 2;
  c.queue_capacity = 16;
  auto store = make_store();
  SoapService s(c, store, make_snapshot(1, 1));
  s.start();
  std::atomic<std::uint64_t> served{0};
  std::vector<std::thread> clients;
  for (int t = 0; t < 3; ++t)
    clients.emplace_back([&, t] {
      for (int i = 0; i < 400; ++i) {
        const auto r = s.serve(request(t * 1000 + i, (i * 7 + t) % 50, 0));
        if (r.embedding.all_finite()) served.fetch_add(1);
      }
    });
  for (std::uint64_t v = 2; v <= 6; ++v) {
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
    s.swap_snapshot(make_snapshot(v, v));
  }
  for (auto& t : clients) t.join();
  s.drain();
  const auto m = s.metrics();
  EXPECT_EQ(served.load(), 1200u);
  EXPECT_EQ(m.requests, 1200u);
  EXPECT_EQ(m.compute_writes, m.enqueued - m.coalesced - m.dropped);
  EXPECT_EQ(store->write_count(), m.compute_writes);
  s.stop();
}

TEST(LatencyHistogram, PercentilesTrackExactQuantiles) {
  LatencyHistogram h;
  std::mt19937_64 rng(5);
  std::lognormal_distribution<double> d(5.0, 1.5);
  std::vector<std::int64_t> xs;
  for (int i = 0; i < 20000; ++i) {
    xs.push_back(static_cast<std::int64_t>(d(rng)));
    h.record(xs.back());
  }
  std::sort(xs.begin(), xs.end());
  for (double q : {0.5, 0.9, 0.99}) {
    const double exact = double(xs[static_cast<std::size_t>(std::ceil(q * xs.size())) - 1]);
    EXPECT_GE(h.percentile(q), exact);
    EXPECT_LE(h.percentile(q), exact * (1 + 1.0 / 32) + 1);
  }
  EXPECT_EQ(h.max(), double(xs.back()));
  h.reset();
  EXPECT_EQ(h.percentile(0.99), 0.0);
}

TEST(Wire, RequestAndResponseRoundTrip) {
  const auto req = request(12, 34, 0);
  const ServeRequest back = decode_request(encode_request(req));
  EXPECT_EQ(back.request_id, 12u);
  EXPECT_EQ(back.user_id, 34u);
  EXPECT_EQ(back.features, req.features);
  ServeResponse r;
  r.request_id = 12;
  r.embedding = Tensorf::from_rows({{1, 2}, {3, 4}});
  r.provenance = Provenance::FallbackDefault;
  r.versions = {4, 3};
  r.service_time_us = 77;
  const ServeResponse rb = decode_response(encode_response(r));
  EXPECT_EQ(rb.embedding, r.embedding);
  EXPECT_EQ(rb.provenance, r.provenance);
  EXPECT_EQ(rb.versions, r.versions);
  EXPECT_EQ(rb.service_time_us, 77);
  EXPECT_THROW(decode_response(encode_error(5, "boom")), Error);
  auto bad = encode_request(req);
  bad[0] = 9;
  EXPECT_THROW(decode_request(bad), FormatError);
  bad = encode_request(req);
  bad.push_back(0);
  EXPECT_THROW(decode_request(bad), FormatError);
}

TEST(Wire, ServerAnswersClient) {
  auto snap = make_snapshot(1, 3);
  ServiceConfig c;
  c.mode.kind = ModeKind::Frozen;
  SoapService s(c, make_store(), snap);
  s.start();
  WireServer server(s, 0);
  WireClient client("127.0.0.1", server.port());
  const auto req = request(5, 6, 0);
  const auto r = client.call(req);
  EXPECT_EQ(r.request_id, 5u);
  EXPECT_EQ(r.provenance, Provenance::Frozen);
  EXPECT_EQ(r.embedding, snap->model->embed(req.features));
  // Schema errors come back as error responses on the same connection.
  ServeRequest bad = req;
  bad.features.sparse.pop_back();
  EXPECT_THROW(client.call(bad), Error);
  EXPECT_EQ(client.call(req).request_id, 5u);
  server.stop();
}

}  // namespace
}  // namespace sum
