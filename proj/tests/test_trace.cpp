#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "bclab/kmc.hpp"
#include "bclab/potential.hpp"
#include "bclab/stats.hpp"
#include "bclab/trace.hpp"

using namespace bclab;

namespace {

Trajectory synthetic(const SpinConfiguration& init, std::vector<Event> events, double total) {
  Trajectory t;
  t.initial = init;
  t.events = std::move(events);
  t.event_count = t.events.size();
  t.total_time = total;
  t.reason = StopReason::TimeCap;
  return t;
}

// Samples traces of the limit chain on {-1, 0, +1} with r(-1,0) = r(0,1) = 1
// and all other rates 0, run until absorption at +1.
TraceTrajectory limit_chain_trace(std::mt19937_64& rng) {
  std::exponential_distribution<double> exp1(1.0);
  TraceTrajectory t;
  t.visits.push_back({Projection::Minus, exp1(rng)});
  t.visits.push_back({Projection::Zero, exp1(rng)});
  t.visits.push_back({Projection::Plus, 0.0});
  t.total_time = t.visits[0].sojourn + t.visits[1].sojourn;
  return t;
}

}  // namespace

TEST_SUITE("trace") {
  TEST_CASE("projection onto M and d") {
    const ModelParams p(0.9, 1.0, 4);
    const auto& lat = p.lattice();
    CHECK(project_psi(SpinConfiguration::uniform(lat, Spin::Minus)) == Projection::Minus);
    CHECK(project_psi(SpinConfiguration::uniform(lat, Spin::Zero)) == Projection::Zero);
    CHECK(project_psi(SpinConfiguration::uniform(lat, Spin::Plus)) == Projection::Plus);
    auto mixed = SpinConfiguration::uniform(lat, Spin::Plus);
    mixed.set(3, Spin::Zero);
    CHECK(project_psi(mixed) == Projection::Dagger);
    CHECK(std::string(token(Projection::Dagger)) == "d");
  }

  TEST_CASE("trace of synthetic paths") {
    const ModelParams p(0.9, 1.0, 2);
    const auto& lat = p.lattice();
    const auto minus = SpinConfiguration::uniform(lat, Spin::Minus);

    const auto pinned = synthetic(minus, {}, 7.5);
    const auto t0 = trace_on_M(pinned, lat);
    REQUIRE(t0.visits.size() == 1);
    CHECK(t0.visits[0].state == Projection::Minus);
    CHECK(t0.visits[0].sojourn == 7.5);
    CHECK(time_fraction_outside(pinned, 7.5, lat) == 0.0);

    // -1 for 1, excursion for 2, -1 for 3, excursion for 4: trace is all -1.
    const auto alt = synthetic(minus,
                               {{1.0, {0, Direction::Up}},
                                {2.0, {0, Direction::Down}},
                                {3.0, {1, Direction::Up}},
                                {4.0, {1, Direction::Down}}},
                               10.0);
    const auto t1 = trace_on_M(alt, lat);
    REQUIRE(t1.visits.size() == 1);
    CHECK(t1.visits[0].sojourn == doctest::Approx(4.0));
    CHECK(t1.outside_time == doctest::Approx(6.0));
    CHECK(time_fraction_outside(alt, 10.0, lat) == doctest::Approx(0.6));
    // Window [0, 2]: one unit at -1, one outside.
    CHECK(time_fraction_outside(alt, 2.0, lat) == doctest::Approx(0.5));

    // -1, then all four sites up to reach 0.
    const auto up = synthetic(minus,
                              {{1.5, {0, Direction::Up}},
                               {0.5, {1, Direction::Up}},
                               {0.5, {2, Direction::Up}},
                               {0.5, {3, Direction::Up}}},
                              5.0);
    const auto t2 = trace_on_M(up, lat);
    REQUIRE(t2.visits.size() == 2);
    CHECK(t2.visits[0].state == Projection::Minus);
    CHECK(t2.visits[0].sojourn == doctest::Approx(1.5));
    CHECK(t2.visits[1].state == Projection::Zero);
    CHECK(t2.visits[1].sojourn == doctest::Approx(2.0));
    CHECK(t2.duration() + t2.outside_time == doctest::Approx(5.0));
    CHECK_THROWS(time_fraction_outside(up, 6.0, lat));
  }

  TEST_CASE("online trace matches the recorded trace and conserves time") {
    const ModelParams p(0.9, 1.0, 3);
    const auto minus = SpinConfiguration::uniform(p.lattice(), Spin::Minus);
    for (std::uint64_t s = 0; s < 5; ++s) {
      RngStream rng(17, s);
      OnlineTrace online(minus);
      StopCondition stop;
      stop.time_cap = 200.0;
      RunOptions opts;
      opts.observer = online.observer();
      const auto traj = run_until(minus, stop, p, rng, opts);
      const auto live = online.finish(traj.total_time);
      const auto rec = trace_on_M(traj, p.lattice());
      REQUIRE(live.visits.size() == rec.visits.size());
      for (std::size_t k = 0; k < rec.visits.size(); ++k) {
        CHECK(live.visits[k].state == rec.visits[k].state);
        CHECK(live.visits[k].sojourn == doctest::Approx(rec.visits[k].sojourn).epsilon(1e-12));
      }
      CHECK(std::abs(rec.duration() + rec.outside_time - traj.total_time) <= 1e-12 * traj.total_time);
      CHECK(std::abs(live.duration() + live.outside_time - traj.total_time) <= 1e-12 * traj.total_time);
      CHECK(live.outside_time == doctest::Approx(time_fraction_outside(traj, traj.total_time, p.lattice()) *
                                                 traj.total_time)
                                     .epsilon(1e-10));
    }
  }

  TEST_CASE("rate arithmetic and intervals") {
    TraceTrajectory t;
    t.visits = {{Projection::Minus, 3.0}, {Projection::Zero, 0.0}};
    const auto r = empirical_jump_rates({t}, 3.0);
    REQUIRE(r.size() == 6);
    CHECK(r[0].from == Projection::Minus);
    CHECK(r[0].to == Projection::Zero);
    CHECK(r[0].count == 1);
    CHECK(r[0].rate == doctest::Approx(1.0));
    CHECK(r[0].ci_lo < 1.0);
    CHECK(r[0].ci_hi > 1.0);
    CHECK_FALSE(r[4].defined);  // +1 never visited

    // Zero counts: the upper bound shrinks like 3.69 / exposure.
    double prev = 1e300;
    for (double exposure : {1.0, 10.0, 100.0, 1000.0}) {
      TraceTrajectory z;
      z.visits = {{Projection::Zero, exposure}};
      const auto e = empirical_jump_rates({z}, 1.0);
      CHECK(e[2].count == 0);
      CHECK(e[2].ci_lo == 0.0);
      CHECK(e[2].ci_hi == doctest::Approx(3.688879 / exposure).epsilon(1e-6));
      CHECK(e[2].ci_hi < prev);
      prev = e[2].ci_hi;
    }

    const auto w = wilson_interval(5, 10);
    CHECK(w.lo == doctest::Approx(0.236593).epsilon(1e-5));
    CHECK(w.hi == doctest::Approx(0.763407).epsilon(1e-5));
    const auto g = poisson_interval(1);
    CHECK(g.lo == doctest::Approx(0.0253178).epsilon(1e-5));
    CHECK(g.hi == doctest::Approx(5.571643).epsilon(1e-6));
    CHECK(chi_square_sf(3.841459, 1.0) == doctest::Approx(0.05).epsilon(1e-5));
    CHECK(median({3.0, 1.0, 2.0, 10.0}) == 2.5);

    std::ostringstream os;
    write_rate_csv(os, r);
    CHECK(os.str().rfind("from,to,count,sojourn_over_theta,rate,ci_lo,ci_hi\n", 0) == 0);
  }

  TEST_CASE("estimates recover the limit chain") {
    std::mt19937_64 rng(123);
    std::vector<TraceTrajectory> traces;
    for (int k = 0; k < 1000; ++k) traces.push_back(limit_chain_trace(rng));
    const auto r = empirical_jump_rates(traces, 1.0);
    for (const auto& e : r) {
      const bool one = (e.from == Projection::Minus && e.to == Projection::Zero) ||
                       (e.from == Projection::Zero && e.to == Projection::Plus);
      if (!e.defined) continue;
      CHECK(e.ci_lo <= (one ? 1.0 : 0.0));
      CHECK(e.ci_hi >= (one ? 1.0 : 0.0));
    }
  }

  TEST_CASE("simulated trace rates match the exact reduction at L=3") {
    const ModelParams p(0.9, 1.0, 3);
    const auto& lat = p.lattice();
    const auto minus = SpinConfiguration::uniform(lat, Spin::Minus);
    const auto zero = SpinConfiguration::uniform(lat, Spin::Zero);
    const auto plus = SpinConfiguration::uniform(lat, Spin::Plus);
    const auto cc = enumerate_closure({minus}, [](const SpinConfiguration&) { return true; }, p);
    REQUIRE(cc.chain.size() == 19683);
    const StateSet F{*cc.find(minus), *cc.find(zero), *cc.find(plus)};
    const auto exact = trace_rates_exact(cc.chain, F);

    RateAccumulator acc;
    for (std::uint64_t s = 0; s < 3000; ++s) {
      RngStream rng(2718, s);
      OnlineTrace online(minus);
      StopCondition stop;
      stop.targets = {{"+1", [](const SpinConfiguration& c) { return c.is_uniform(Spin::Plus); }}};
      RunOptions opts;
      opts.record_events = false;
      opts.observer = online.observer();
      const auto traj = run_until(minus, stop, p, rng, opts);
      acc.add(online.finish(traj.total_time));
    }
    const auto est = acc.estimates(1.0, 0.999);
    for (const auto& e : est) {
      if (e.from == Projection::Plus) continue;
      const double r = exact[static_cast<std::size_t>(m_index(e.from))][static_cast<std::size_t>(m_index(e.to))];
      CAPTURE(token(e.from));
      CAPTURE(token(e.to));
      CAPTURE(e.count);
      CHECK(e.ci_lo <= r);
      CHECK(e.ci_hi >= r);
    }
    CHECK(acc.count(Projection::Minus, Projection::Zero) > 100);
    CHECK(acc.count(Projection::Zero, Projection::Plus) > 100);
  }
}
