#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "bclab/kmc.hpp"
#include "bclab/potential.hpp"

using namespace bclab;

TEST_SUITE("slow") {
  TEST_CASE("long run occupation matches the Gibbs measure at L=3") {
    const ModelParams p(0.9, 1.0, 3);
    const auto minus = SpinConfiguration::uniform(p.lattice(), Spin::Minus);
    const auto cc = enumerate_closure({minus}, [](const SpinConfiguration&) { return true; }, p);
    const std::size_t n = cc.chain.size();
    REQUIRE(n == 19683);

    std::vector<double> mu(n);
    double log_z = -INFINITY;
    for (std::size_t i = 0; i < n; ++i) {
      const double l = cc.chain.log_mu(i);
      log_z = std::max(log_z, l) + std::log1p(std::exp(-std::abs(log_z - l)));
    }
    for (std::size_t i = 0; i < n; ++i) mu[i] = std::exp(cc.chain.log_mu(i) - log_z);

    constexpr std::uint64_t kEvents = 10'000'000;
    constexpr std::size_t kBatches = 100;
    constexpr std::uint64_t kPerBatch = kEvents / kBatches;
    std::vector<std::size_t> top(n);
    std::iota(top.begin(), top.end(), std::size_t{0});
    std::partial_sort(top.begin(), top.begin() + 50, top.end(), [&](auto a, auto b) { return mu[a] > mu[b]; });
    top.resize(50);
    std::vector<std::size_t> slot(n, 50);
    for (std::size_t k = 0; k < 50; ++k) slot[top[k]] = k;

    std::vector<std::vector<double>> batch(kBatches, std::vector<double>(51, 0.0));
    std::vector<double> batch_len(kBatches, 0.0);
    std::size_t current = *cc.find(minus);
    double last = 0.0;
    std::uint64_t events = 0;
    RunOptions opts;
    opts.record_events = false;
    opts.observer = [&](const SpinConfiguration& s, double t) {
      const std::size_t b = std::min<std::size_t>(events / kPerBatch, kBatches - 1);
      batch[b][slot[current]] += t - last;
      batch_len[b] += t - last;
      last = t;
      current = *cc.find(s);
      ++events;
    };
    StopCondition stop;
    stop.event_cap = kEvents;
    RngStream rng(8080, 0);
    const auto traj = run_until(minus, stop, p, rng, opts);
    REQUIRE(traj.event_count == kEvents);

    int outside = 0;
    for (std::size_t k = 0; k < 50; ++k) {
      std::vector<double> f(kBatches);
      for (std::size_t b = 0; b < kBatches; ++b) f[b] = batch[b][k] / batch_len[b];
      const double mean = std::accumulate(f.begin(), f.end(), 0.0) / kBatches;
      double var = 0.0;
      for (double v : f) var += (v - mean) * (v - mean);
      const double se = std::sqrt(var / (kBatches - 1) / kBatches);
      const double target = mu[top[k]];
      CAPTURE(k);
      CAPTURE(mean);
      CAPTURE(target);
      CAPTURE(se);
      if (std::abs(mean - target) > 4.0 * se) ++outside;
    }
    CHECK(outside == 0);
  }

  TEST_CASE("exact theta approaches the asymptotic formula at L=5") {
    std::vector<double> ratio;
    for (double beta : {4.0, 5.0, 6.0}) {
      const ModelParams p(0.9, beta, 5);
      const auto chain = lumped_binary_chain(p);
      const auto zero = chain.find(std::to_string((std::uint64_t{1} << 25) - 1));
      REQUIRE(zero);
      const auto t = theta_beta(chain, 0, {*zero});
      ratio.push_back(std::exp(t.log_value - log_theta_beta_asymptotic(p)));
    }
    CAPTURE(ratio[0]);
    CAPTURE(ratio[1]);
    CAPTURE(ratio[2]);
    CHECK(ratio[0] > ratio[1]);
    CHECK(ratio[1] > ratio[2]);
    CHECK(ratio[2] > 1.0);
    CHECK(ratio[2] < 1.5);
  }
}
