#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "bclab/droplet.hpp"
#include "bclab/potential.hpp"
#include "oracles.hpp"

using namespace bclab;

namespace {

EnumeratedChain series(double c1, double c2, double mu0 = 1.0, double mu1 = 0.5, double mu2 = 2.0) {
  ChainBuilder b;
  b.add_state("a", std::log(mu0));
  b.add_state("m", std::log(mu1));
  b.add_state("b", std::log(mu2));
  b.add_conductance(0, 1, c1);
  b.add_conductance(1, 2, c2);
  return b.build();
}

// Random connected reversible chain: a spanning path plus extra edges, with
// weights and conductances spread over several orders of magnitude.
EnumeratedChain random_chain(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> lw(-4.0, 4.0);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  ChainBuilder b;
  for (std::size_t i = 0; i < n; ++i) b.add_state("s" + std::to_string(i), lw(rng));
  std::vector<std::vector<char>> used(n, std::vector<char>(n, 0));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  auto connect = [&](std::size_t i, std::size_t j) {
    if (i == j || used[i][j]) return;
    used[i][j] = used[j][i] = 1;
    b.add_conductance(i, j, std::exp(lw(rng)));
  };
  for (std::size_t k = 1; k < n; ++k) connect(order[k - 1], order[k]);
  for (std::size_t k = 0; k < 2 * n; ++k) connect(pick(rng), pick(rng));
  return b.build();
}

double rel(double a, double b) {
  if (a == b) return 0.0;
  return std::abs(a - b) / std::max(std::abs(a), std::abs(b));
}

}  // namespace

TEST_SUITE("potential") {
  TEST_CASE("chain construction validates reversibility and support") {
    ChainBuilder b;
    b.add_state("x", 0.0);
    b.add_state("y", std::log(2.0));
    b.add_edge(0, 1, 1.0);
    CHECK_THROWS_AS(b.build(), std::invalid_argument);  // no reverse edge
    b.add_edge(1, 0, 0.25);
    CHECK_THROWS_AS(b.build(), std::invalid_argument);  // 1 * 1 != 2 * 0.25
    ChainBuilder ok;
    ok.add_state("x", 0.0);
    ok.add_state("y", std::log(2.0));
    ok.add_edge(0, 1, 1.0);
    ok.add_edge(1, 0, 0.5);
    const auto c = ok.build();
    CHECK(c.size() == 2);
    CHECK(c.edge_count() == 2);
    CHECK(c.reversibility_defect() < 1e-15);
    CHECK(c.find("y") == std::optional<std::size_t>(1));
    CHECK(c.holding_rate(1) == doctest::Approx(0.5));
  }

  TEST_CASE("chain text round trip") {
    std::mt19937_64 rng(5);
    const auto c = random_chain(rng, 12);
    std::stringstream ss;
    write_chain(ss, c);
    const auto d = read_chain(ss);
    REQUIRE(d.size() == c.size());
    REQUIRE(d.edge_count() == c.edge_count());
    for (std::size_t i = 0; i < c.size(); ++i) {
      CHECK(d.key(i) == c.key(i));
      CHECK(d.log_mu(i) == c.log_mu(i));
    }
    for (std::size_t e = 0; e < c.edge_count(); ++e) {
      CHECK(d.target(e) == c.target(e));
      CHECK(d.rate(e) == c.rate(e));
    }
  }

  TEST_CASE("two-state and series capacities") {
    ChainBuilder b;
    b.add_state("x", std::log(3.0));
    b.add_state("y", 0.0);
    b.add_edge(0, 1, 0.2);
    b.add_edge(1, 0, 0.6);
    const auto two = b.build();
    CHECK(capacity_exact(two, {0}, {1}).value == doctest::Approx(0.6).epsilon(1e-12));

    const double c1 = 0.3;
    const double c2 = 1.7;
    const auto s = series(c1, c2);
    const auto cap = capacity_exact(s, {0}, {2});
    CHECK(rel(cap.value, 1.0 / (1.0 / c1 + 1.0 / c2)) < 1e-12);
    CHECK(hitting_probability(s, 1, {0}, {2}) == doctest::Approx(c1 / (c1 + c2)).epsilon(1e-12));
    CHECK(cap.flux_mismatch < 1e-12);

    const auto eq = series(1.0, 1.0);
    CHECK(hitting_probability(eq, 1, {0}, {2}) == doctest::Approx(0.5).epsilon(1e-14));
  }

  TEST_CASE("interior state attached only to A") {
    ChainBuilder b;
    b.add_state("a", 0.0);
    b.add_state("x", 0.0);
    b.add_state("b", 0.0);
    b.add_state("z", 0.0);
    b.add_conductance(0, 1, 1.0);
    b.add_conductance(0, 2, 1.0);
    const auto c = b.build();
    const auto h = harmonic_solve(c, {0}, {2});
    CHECK(h.value[1] == 1.0);
    CHECK(h.undetermined[3] == 1);  // isolated state touches neither set
    CHECK(std::isnan(h.value[3]));
    CHECK(h.report.undetermined == 1);
  }

  TEST_CASE("gambler's ruin chain of droplet growth") {
    // X on {0..m}: k -> k+1 at rate 2, k+1 -> k at rate 2 e^{-beta h},
    // started from 2 n0; compare P[H_{n0} < H_m] with the closed form.
    const int n0 = 2;
    const int m = 14;
    for (double beta : {0.5, 1.0, 2.0, 4.0}) {
      const double h = 0.9;
      const double up = 2.0;
      const double down = 2.0 * std::exp(-beta * h);
      ChainBuilder b;
      for (int k = 0; k <= m; ++k) b.add_state(std::to_string(k), k * std::log(up / down));
      for (int k = 0; k < m; ++k) {
        b.add_edge(static_cast<std::size_t>(k), static_cast<std::size_t>(k + 1), up);
        b.add_edge(static_cast<std::size_t>(k + 1), static_cast<std::size_t>(k), down);
      }
      const auto c = b.build();
      const double p = hitting_probability(c, 2 * n0, {static_cast<std::size_t>(n0)}, {static_cast<std::size_t>(m)});
      const double exact = oracle::ruin_hit_low(n0, m, 2 * n0, up, down);
      CHECK(rel(p, exact) < 1e-9);
      CHECK(p <= 2.0 * std::exp(-n0 * h * beta));

      // E_{2n0}[H_m] from the telescoping sum of single-level passage times.
      double t = 1.0 / up;
      double total = 0.0;
      for (int k = 0; k < m; ++k) {
        if (k > 0) t = 1.0 / up + (down / up) * t;
        if (k >= 2 * n0) total += t;
      }
      CHECK(rel(mean_hitting_time(c, 2 * n0, {static_cast<std::size_t>(m)}), total) < 1e-9);
    }
  }

  TEST_CASE("mean hitting time examples") {
    ChainBuilder b;
    b.add_state("x", 0.0);
    b.add_state("a", 0.0);
    b.add_edge(0, 1, 0.25);
    b.add_edge(1, 0, 0.25);
    const auto one = b.build();
    CHECK(mean_hitting_time(one, 0, {1}) == doctest::Approx(4.0).epsilon(1e-12));

    // Path x - y - a with symmetric rates.
    ChainBuilder s;
    s.add_state("x", 0.0);
    s.add_state("y", 0.0);
    s.add_state("a", 0.0);
    s.add_edge(0, 1, 2.0);
    s.add_edge(1, 0, 2.0);
    s.add_edge(1, 2, 3.0);
    s.add_edge(2, 1, 3.0);
    const auto c = s.build();
    // From x: t_x = 1/2 + t_y, t_y = 1/5 + (2/5) t_x  ->  t_x = (1/2 + 1/5) / (3/5).
    CHECK(mean_hitting_time(c, 0, {2}) == doctest::Approx((0.5 + 0.2) / 0.6).epsilon(1e-12));

    ChainBuilder u;
    u.add_state("x", 0.0);
    u.add_state("y", 0.0);
    u.add_state("a", 0.0);
    u.add_conductance(0, 1, 1.0);
    CHECK(std::isinf(mean_hitting_time(u.build(), 0, {2})));
  }

  TEST_CASE("capacity sandwich, symmetry and exactness on random chains") {
    std::mt19937_64 rng(2024);
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t n = 5 + static_cast<std::size_t>(trial) * 4;
      const auto c = random_chain(rng, n);
      const StateSet A{0, 1};
      const StateSet B{n - 1};
      const auto cap = capacity_exact(c, A, B);
      const auto back = capacity_exact(c, B, A);
      CHECK(rel(cap.value, back.value) < 1e-10);

      const auto h = harmonic_solve(c, A, B);
      CHECK(h.report.residual <= 1e-10);
      CHECK(rel(dirichlet_form(c, h.value), cap.value) < 1e-9);
      const auto opt = harmonic_flow(c, A, B, h.value);
      CHECK(rel(thomson_lower(c, opt), cap.value) < 1e-9);

      // Test function: indicator of A, and a random interpolation.
      std::vector<double> f(n, 0.0);
      std::uniform_real_distribution<double> uni(0.0, 1.0);
      for (std::size_t i = 0; i < n; ++i) f[i] = uni(rng);
      f[0] = f[1] = 1.0;
      f[n - 1] = 0.0;
      CHECK(dirichlet_upper(c, A, B, f) >= cap.value * (1 - 1e-9));
      std::vector<double> ind(n, 0.0);
      ind[0] = ind[1] = 1.0;
      CHECK(dirichlet_upper(c, A, B, ind) >= cap.value * (1 - 1e-9));

      // Unit flow along a breadth-first path from 0 to n-1.
      std::vector<std::int64_t> parent(n, -1);
      std::vector<std::size_t> queue{0};
      parent[0] = 0;
      for (std::size_t q = 0; q < queue.size(); ++q) {
        const auto i = queue[q];
        for (std::size_t e = c.row_begin(i); e < c.row_end(i); ++e) {
          const auto j = c.target(e);
          if (parent[j] < 0) {
            parent[j] = static_cast<std::int64_t>(i);
            queue.push_back(j);
          }
        }
      }
      UnitFlow path(c, {0}, B);
      for (std::size_t v = n - 1; v != 0; v = static_cast<std::size_t>(parent[v])) {
        path.add(static_cast<std::size_t>(parent[v]), v, 1.0);
      }
      // A path flow from 0 is also a unit flow from A = {0,1} provided it
      // avoids 1 or passes through it; divergence at 1 is then legal.
      UnitFlow pathA(c, A, B);
      for (std::size_t v = n - 1; v != 0; v = static_cast<std::size_t>(parent[v])) {
        pathA.add(static_cast<std::size_t>(parent[v]), v, 1.0);
      }
      CHECK(thomson_lower(c, pathA) <= cap.value * (1 + 1e-9));
      CHECK(thomson_lower(c, path) <= capacity_exact(c, {0}, B).value * (1 + 1e-9));
    }
  }

  TEST_CASE("series chain sandwich") {
    const double c1 = 0.4;
    const double c2 = 2.5;
    const auto s = series(c1, c2);
    const double exact = 1.0 / (1.0 / c1 + 1.0 / c2);
    const std::vector<double> ind{1.0, 0.0, 0.0};
    CHECK(dirichlet_upper(s, {0}, {2}, ind) == doctest::Approx(c1).epsilon(1e-14));
    CHECK(dirichlet_upper(s, {0}, {2}, ind) >= exact);
    UnitFlow f(s, {0}, {2});
    f.add(0, 1, 1.0);
    f.add(1, 2, 1.0);
    CHECK(rel(thomson_lower(s, f), exact) < 1e-12);
    CHECK(f.divergence(0) == doctest::Approx(1.0));
    CHECK(f.divergence(2) == doctest::Approx(-1.0));
    UnitFlow bad(s, {0}, {2});
    bad.add(0, 1, 1.0);
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    CHECK_THROWS_AS(dirichlet_upper(s, {0}, {2}, {0.5, 0.2, 0.0}), std::invalid_argument);
  }

  TEST_CASE("hitting identities on random chains") {
    std::mt19937_64 rng(99);
    for (int trial = 0; trial < 40; ++trial) {
      const std::size_t n = 6 + static_cast<std::size_t>(trial % 10) * 3;
      const auto c = random_chain(rng, n);
      const std::size_t x = 0;
      const StateSet A{1, 2};
      const StateSet B{n - 1, n - 2};
      StateSet AB = A;
      AB.insert(AB.end(), B.begin(), B.end());

      const double hab = hitting_probability(c, x, A, B);
      const double esc = escape_probability(c, x, AB);
      // P_x[H_A < H^+_{B u {x}}] by one jump from x and an independent solve.
      StateSet Bx = B;
      Bx.push_back(x);
      const auto g = harmonic_solve(c, A, Bx);
      double rhs = 0.0;
      const double lam = c.holding_rate(x);
      for (std::size_t e = c.row_begin(x); e < c.row_end(x); ++e) rhs += c.rate(e) / lam * g.value[c.target(e)];
      CHECK(rel(hab * esc, rhs) < 1e-9);

      const double capA = capacity_exact(c, {x}, A).value;
      const double capB = capacity_exact(c, {x}, B).value;
      CHECK(hab <= capA / capB * (1 + 1e-12));
      CHECK(capacity_exact(c, {x}, AB).value >= capA * (1 - 1e-12));
    }
  }

  TEST_CASE("exit distribution sums to one and matches hitting probabilities") {
    std::mt19937_64 rng(7);
    const auto c = random_chain(rng, 30);
    const StateSet B{20, 25, 29};
    const auto cap = capacity_exact(c, {0}, B);
    const auto law = exit_distribution(c, 0, B, cap);
    double sum = 0.0;
    for (double v : law) sum += v;
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-10));
    for (std::size_t k = 0; k < B.size(); ++k) {
      StateSet others;
      for (std::size_t j = 0; j < B.size(); ++j) {
        if (j != k) others.push_back(B[j]);
      }
      // P_0[X(H_B) = b] = P_0[H_b < H_{B \ b}].
      CHECK(rel(law[k], hitting_probability(c, 0, {B[k]}, others)) < 1e-9);
    }
  }

  TEST_CASE("dense and iterative solvers agree") {
    std::mt19937_64 rng(11);
    const auto c = random_chain(rng, 400);
    SolveOptions dense;
    SolveOptions sparse;
    sparse.dense_limit = 0;
    const auto a = capacity_exact(c, {0}, {399}, dense);
    const auto b = capacity_exact(c, {0}, {399}, sparse);
    CHECK(a.escape.report.dense);
    CHECK_FALSE(b.escape.report.dense);
    CHECK(b.escape.report.iterations > 0);
    CHECK(rel(a.value, b.value) < 1e-10);
  }

  TEST_CASE("laplace functional of the birth-death walk") {
    for (int n = 1; n <= 6; ++n) {
      for (double eps : {0.5, 0.1, 0.01}) {
        for (double theta : {0.1, 1.0}) {
          const double f = laplace_functional(n, eps, theta);
          CHECK(f > 0.0);
          CHECK(f <= 1.0);
          CHECK(f <= std::pow(eps, n) / theta);
          CHECK(rel(f, oracle::laplace_product(n, eps, theta)) < 1e-12);
          if (n == 1) CHECK(std::abs(f - eps / (eps + theta)) < 1e-12);
        }
      }
    }
    CHECK(laplace_functional(4, 0.3, 1e-12) == doctest::Approx(1.0).epsilon(1e-9));
  }

  TEST_CASE("closure enumeration counts") {
    const ModelParams p(0.9, 2.0, 4);
    const auto minus = SpinConfiguration::uniform(p.lattice(), Spin::Minus);
    auto single = minus;
    single.set(5, Spin::Zero);
    const auto pair = enumerate_closure({minus}, [&](const SpinConfiguration& s) { return s == minus || s == single; }, p);
    CHECK(pair.chain.size() == 2);
    CHECK(pair.chain.edge_count() == 2);
    CHECK(pair.chain.log_mu(1) == doctest::Approx(-2.0 * (4 - 0.9)));

    const auto small = enumerate_closure(
        {minus}, [](const SpinConfiguration& s) { return s.count(Spin::Plus) == 0 && s.non_minus() <= 2; }, p);
    CHECK(small.chain.size() == 137);
    // Metropolis conductances are min(mu, mu') and the chain is reversible.
    CHECK(small.chain.reversibility_defect() < 1e-10);
    for (std::size_t i = 0; i < small.chain.size(); ++i) {
      for (std::size_t e = small.chain.row_begin(i); e < small.chain.row_end(i); ++e) {
        const double lm = std::min(small.chain.log_mu(i), small.chain.log_mu(small.chain.target(e)));
        CHECK(small.chain.log_conductance(e) == lm);
      }
    }
    CHECK_THROWS_AS(enumerate_closure({minus}, [](const SpinConfiguration&) { return true; }, p, 1000),
                    ClosureOverflow);
    CHECK_THROWS_AS(enumerate_closure({single}, [&](const SpinConfiguration& s) { return s == minus; }, p),
                    std::invalid_argument);
  }

  TEST_CASE("lumped binary chain agrees with the full chain") {
    const ModelParams p(0.9, 1.5, 4);
    const auto minus = SpinConfiguration::uniform(p.lattice(), Spin::Minus);
    const auto zero = SpinConfiguration::uniform(p.lattice(), Spin::Zero);
    const auto full = enumerate_closure({minus}, [](const SpinConfiguration& s) { return s.count(Spin::Plus) == 0; }, p);
    CHECK(full.chain.size() == 65536);
    const auto lumped = lumped_binary_chain(p);
    CHECK(lumped.size() < 65536 / 20);
    const auto zl = lumped.find(std::to_string((std::uint64_t{1} << 16) - 1));
    REQUIRE(zl);
    const auto cf = capacity_exact(full.chain, {*full.find(minus)}, {*full.find(zero)});
    const auto cl = capacity_exact(lumped, {0}, {*zl});
    CHECK(rel(cf.value, cl.value) < 1e-9);
    CHECK(lumped.log_mu(*zl) == doctest::Approx(full.chain.log_mu(*full.find(zero))));
    CHECK(canonical_mask(0b10, 4) == 1);
  }

  TEST_CASE("theta definitions") {
    const ModelParams p(0.9, 5.0, 5);
    CHECK(3.0 / (4.0 * (2 * p.critical_side() + 1)) == doctest::Approx(0.15));
    CHECK(theta_beta_asymptotic(p) == doctest::Approx(0.15 / 25 * std::exp(5.7 * 5.0)).epsilon(1e-12));
    const auto s = series(0.3, 0.2);
    const auto t = theta_beta(s, 0, {2});
    CHECK(t.value * t.capacity.value / std::exp(s.log_mu(0)) == doctest::Approx(1.0).epsilon(1e-14));
  }

  TEST_CASE("spiral flow on a small valley") {
    // Valley closure at L=5 restricted to N <= 7 without +1 spins.
    const ModelParams p(0.9, 5.0, 5);
    const auto minus = SpinConfiguration::uniform(p.lattice(), Spin::Minus);
    const auto cc = enumerate_closure(
        {minus}, [&](const SpinConfiguration& s) { return s.count(Spin::Plus) == 0 && in_valley_minus(s, p); }, p);
    CHECK(cc.chain.size() == 246456);
    const auto flow = spiral_flow(cc, p);
    flow.validate();
    CHECK(flow.divergence(0) == doctest::Approx(1.0));
    for (std::size_t e = 0; e < cc.chain.edge_count(); ++e) {
      const double v = std::abs(flow.value(e));
      if (v != 0.0) CHECK(v == doctest::Approx(1.0 / 25).epsilon(1e-12));
    }
    const auto ra = cc.select([&](const SpinConfiguration& s) { return is_attached(classify(s, p).label); });
    CHECK(ra.size() == 4 * 5 * 25);
    const auto cap = capacity_exact(cc.chain, {0}, ra);
    const double lower = thomson_lower(cc.chain, flow);
    CHECK(lower <= cap.value * (1 + 1e-9));
    CHECK(lower > 0.0);
  }
}
