// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <boost/multiprecision/cpp_dec_float.hpp>

#include "fedemoji/fedsim.hpp"
#include "fedemoji/optim.hpp"
#include "test_support.hpp"

using namespace fedemoji;
using namespace fedemoji::testing;

namespace {

ClientDataset make_client(std::size_t id, std::vector<Example> examples) {
  ClientDataset d;
  d.client_id = id;
  d.examples = std::move(examples);
  return d;
}

ClientUpdate make_update(std::size_t id, std::vector<double> delta, std::size_t n) {
  ClientUpdate u;
  u.client_id = id;
  u.delta = std::move(delta);
  u.num_examples = n;
  return u;
}

}  // namespace

TEST(ClientUpdate, ZeroLearningRateGivesZeroDelta) {
  const auto c = small_config();
  const auto p = random_params(c, 1);
  const auto up = client_update(p, make_client(3, random_examples(c, 7, 2)), {0.0, 3, 2, 5.0}, 9);
  EXPECT_EQ(up.client_id, 3u);
  EXPECT_EQ(up.num_examples, 7u);
  for (double v : up.delta) EXPECT_EQ(v, 0.0);
}

TEST(ClientUpdate, SingleBatchIsOneClippedGradientStep) {
  const auto c = small_config();
  const auto p = random_params(c, 1);
  const auto ex = random_examples(c, 5, 3);
  for (double clip : {1e9, 0.05}) {
    const ClientOptConfig cfg{0.3, 5, 1, clip};
    const auto up = client_update(p, make_client(0, ex), cfg, 4);
    auto g = loss_and_grads(p, ex).grads.flatten();
    double norm = 0.0;
    for (double v : g) norm += v * v;
    norm = std::sqrt(norm);
    const double scale = norm > clip ? clip / norm : 1.0;
    for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(up.delta[i], -0.3 * scale * g[i], 1e-12);
  }
}

TEST(ClientUpdate, TwoEpochsComposeTwoSingleEpochs) {
  const auto c = small_config();
  const auto p = random_params(c, 5);
  const auto ex = random_examples(c, 9, 6);
  const ClientOptConfig two{0.2, 4, 2, 5.0};
  const auto up = client_update(p, make_client(0, ex), two, 77);
  Parameters w = p;
  for (std::size_t e = 0; e < 2; ++e) run_local_epoch(w, ex, two, derive_seed(77, Stream::kShuffle, {e}));
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_NEAR(up.delta[i], w.values()[i] - p.values()[i], 1e-12);
}

TEST(ClientUpdate, NoEffectiveExamplesIsSkipped) {
  const auto c = small_config();
  auto ex = random_examples(c, 3, 1);
  for (auto &e : ex) e.weight = 0.0;
  const auto up = client_update(random_params(c, 1), make_client(2, ex), {}, 1);
  EXPECT_TRUE(up.skipped);
  EXPECT_TRUE(up.delta.empty());
}

TEST(Aggregate, IdenticalDeltasAverageToThemselves) {
  const std::vector<double> d{0.5, -1.25, 3.0};
  const std::vector<ClientUpdate> ups{make_update(0, d, 3), make_update(1, d, 11), make_update(2, d, 1)};
  const auto agg = aggregate(ups);
  EXPECT_EQ(agg.total_n, 15u);
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_NEAR(agg.mean_delta[i], d[i], 1e-15);
}

TEST(Aggregate, OneNonzeroClientOfFourEqualSizes) {
  const std::vector<ClientUpdate> ups{make_update(0, {4.0, -8.0}, 10), make_update(1, {0.0, 0.0}, 10),
                                      make_update(2, {0.0, 0.0}, 10), make_update(3, {0.0, 0.0}, 10)};
  const auto agg = aggregate(ups);
  EXPECT_DOUBLE_EQ(agg.mean_delta[0], 1.0);
  EXPECT_DOUBLE_EQ(agg.mean_delta[1], -2.0);
}

TEST(Aggregate, MatchesHighPrecisionOracle) {
  using big = boost::multiprecision::cpp_dec_float_50;
  Rng rng(42);
  std::vector<ClientUpdate> ups;
  for (std::size_t k = 0; k < 25; ++k) {
    std::vector<double> d(40);
    for (auto &v : d) v = uniform_real(rng, -1.0, 1.0) * std::pow(10.0, uniform_real(rng, -3, 3));
    ups.push_back(make_update(k, d, 1 + uniform_index(rng, 500)));
  }
  const auto agg = aggregate(ups);
  for (std::size_t i = 0; i < 40; ++i) {
    big num = 0, den = 0;
    for (const auto &u : ups) {
      num += big(u.delta[i]) * big(u.num_examples);
      den += big(u.num_examples);
    }
    const double exact = static_cast<double>(num / den);
    EXPECT_NEAR(agg.mean_delta[i], exact, 1e-12 * std::max(1.0, std::abs(exact)));
  }
}

TEST(Aggregate, ArrivalOrderDoesNotChangeBits) {
  Rng rng(8);
  std::vector<ClientUpdate> ups;
  for (std::size_t k = 0; k < 12; ++k) {
    std::vector<double> d(30);
    for (auto &v : d) v = standard_normal(rng) * 1e3;
    ups.push_back(make_update(k * 7 + 1, d, 1 + uniform_index(rng, 90)));
  }
  const auto ref = aggregate(ups).mean_delta;
  for (int trial = 0; trial < 10; ++trial) {
    shuffle(ups, rng);
    EXPECT_EQ(aggregate(ups).mean_delta, ref);
  }
}

TEST(Aggregate, ScalingAllCountsLeavesMeanUnchanged) {
  std::vector<ClientUpdate> a{make_update(0, {1.0, 2.0}, 3), make_update(1, {-3.0, 0.5}, 5)};
  auto b = a;
  for (auto &u : b) u.num_examples *= 7;
  const auto x = aggregate(a), y = aggregate(b);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(x.mean_delta[i], y.mean_delta[i], 1e-15);
}

TEST(Aggregate, SkippedClientsAreIgnoredAndAllSkippedIsAnError) {
  auto skipped = make_update(5, {}, 0);
  skipped.skipped = true;
  const std::vector<ClientUpdate> ups{make_update(0, {2.0}, 2), skipped};
  EXPECT_DOUBLE_EQ(aggregate(ups).mean_delta[0], 2.0);
  const std::vector<ClientUpdate> none{skipped};
  try {
    aggregate(none);
    FAIL();
  } catch (const Error &e) {
    EXPECT_STREQ(e.what(), "no updates this round");
  }
  EXPECT_THROW(aggregate(std::span<const ClientUpdate>{}), Error);
}

TEST(ServerApply, SgdAddsScaledMean) {
  const ModelConfig c{1, 1, 1, 1, 1};
  Parameters w(c);
  for (std::size_t i = 0; i < w.size(); ++i) w.values()[i] = static_cast<double>(i);
  std::vector<double> u(w.size(), 0.25);
  auto opt = ServerOptimizer::sgd(2.0);
  const auto next = server_apply(w, u, opt);
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_DOUBLE_EQ(next.values()[i], static_cast<double>(i) + 0.5);
}

TEST(ServerApply, NesterovWithZeroMomentumIsSgd) {
  const auto c = small_config();
  const auto w = random_params(c, 1);
  const auto u = random_params(c, 2).flatten();
  auto a = ServerOptimizer::sgd(0.7);
  auto b = ServerOptimizer::nesterov(0.7, 0.0);
  EXPECT_EQ(server_apply(w, u, a), server_apply(w, u, b));
}

TEST(ServerApply, NesterovConstantUpdateFollowsClosedForm) {
  const ModelConfig c{1, 1, 1, 1, 1};
  Parameters w(c);
  const double eta = 0.5, mu = 0.9, u = 0.01;
  std::vector<double> upd(w.size(), u);
  auto opt = ServerOptimizer::nesterov(eta, mu);
  double expected = 0.0;
  for (int t = 1; t <= 50; ++t) {
    w = server_apply(w, upd, opt);
    // v_t = u (1 - mu^t) / (1 - mu); step = eta (mu v_t + u)
    const double v = u * (1.0 - std::pow(mu, t)) / (1.0 - mu);
    expected += eta * (mu * v + u);
    EXPECT_NEAR(w.values()[0], expected, 1e-12);
    EXPECT_NEAR(opt.velocity[0], v, 1e-14);
  }
  // per-round step tends to eta * u / (1 - mu)
  for (int t = 0; t < 400; ++t) w = server_apply(w, upd, opt);
  const double before = w.values()[0];
  w = server_apply(w, upd, opt);
  EXPECT_NEAR(w.values()[0] - before, 10.0 * eta * u, 1e-12);
}

TEST(ServerApply, ZeroUpdateLeavesSgdWeightsUnchanged) {
  const auto c = small_config();
  const auto w = random_params(c, 3);
  std::vector<double> zero(w.size(), 0.0);
  auto opt = ServerOptimizer::sgd(1.0);
  EXPECT_EQ(server_apply(w, zero, opt), w);
}

TEST(ServerApply, NonFiniteUpdateIsADivergedRound) {
  const auto c = small_config();
  const auto w = random_params(c, 3);
  std::vector<double> bad(w.size(), 0.0);
  bad[17] = std::numeric_limits<double>::infinity();
  auto opt = ServerOptimizer::nesterov(1.0);
  try {
    server_apply(w, bad, opt);
    FAIL();
  } catch (const Error &e) {
    EXPECT_STREQ(e.what(), "diverged round");
  }
  EXPECT_TRUE(opt.velocity.empty());
}

TEST(ServerOptimizer, ValidationNamesTheKey) {
  EXPECT_THROW(ServerOptimizer::sgd(0.0).validate(), ConfigError);
  EXPECT_THROW(ServerOptimizer::nesterov(1.0, 1.0).validate(), ConfigError);
  EXPECT_NO_THROW(ServerOptimizer::nesterov(1.0, 0.9).validate());
}

TEST(Round, SingleClientFullBatchEqualsCentralStep) {
  const auto c = small_config();
  const auto w0 = random_params(c, 11);
  const auto ex = random_examples(c, 6, 12);
  std::vector<ClientDataset> pop{make_client(0, ex)};
  FederationState state{w0, ServerOptimizer::sgd(1.0), 0, pop, pop};
  FederationConfig fed;
  fed.devices_per_round = 1;
  const ClientOptConfig cfg{0.4, 6, 1, 1e9};
  run_round(state, cfg, fed);
  const auto g = loss_and_grads(w0, ex).grads;
  for (std::size_t i = 0; i < w0.size(); ++i)
    EXPECT_NEAR(state.global.values()[i], w0.values()[i] - 0.4 * g.values()[i], 1e-12);
}
