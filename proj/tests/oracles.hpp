#pragma once

// Reference computations written independently of the library: plain int
// grids, explicit coordinate loops, no shared helpers.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "bclab/lattice.hpp"

namespace oracle {

using Grid = std::vector<int>;  // row-major, values in {-1, 0, 1}

inline Grid to_grid(const bclab::SpinConfiguration& s) {
  Grid g(static_cast<std::size_t>(s.size()));
  for (int i = 0; i < s.size(); ++i) g[static_cast<std::size_t>(i)] = bclab::value(s[i]);
  return g;
}

inline bclab::SpinConfiguration from_grid(const Grid& g) {
  bclab::SpinConfiguration s(static_cast<int>(g.size()), bclab::Spin::Minus);
  for (std::size_t i = 0; i < g.size(); ++i) s.set(static_cast<int>(i), static_cast<bclab::Spin>(g[i]));
  return s;
}

inline int at(const Grid& g, int L, int c, int r) {
  c = ((c % L) + L) % L;
  r = ((r % L) + L) % L;
  return g[static_cast<std::size_t>(r * L + c)];
}

inline double energy(const Grid& g, int L, double h) {
  double bonds = 0.0;
  double mag = 0.0;
  for (int r = 0; r < L; ++r) {
    for (int c = 0; c < L; ++c) {
      const int s = at(g, L, c, r);
      const int dr = at(g, L, c + 1, r) - s;
      const int du = at(g, L, c, r + 1) - s;
      bonds += dr * dr + du * du;
      mag += s;
    }
  }
  return bonds - h * mag;
}

inline int cyclic(int s, bool up) {
  // -1 -> 0 -> 1 -> -1 for up.
  if (up) return s == 1 ? -1 : s + 1;
  return s == -1 ? 1 : s - 1;
}

inline double rate(const Grid& g, int L, double h, double beta, int site, bool up) {
  Grid t = g;
  t[static_cast<std::size_t>(site)] = cyclic(t[static_cast<std::size_t>(site)], up);
  const double d = energy(t, L, h) - energy(g, L, h);
  return d > 0 ? std::exp(-beta * d) : 1.0;
}

inline double holding(const Grid& g, int L, double h, double beta) {
  double s = 0.0;
  for (int x = 0; x < L * L; ++x) s += rate(g, L, h, beta, x, true) + rate(g, L, h, beta, x, false);
  return s;
}

inline Grid random_grid(int L, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(-1, 1);
  Grid g(static_cast<std::size_t>(L * L));
  for (auto& v : g) v = d(rng);
  return g;
}

// Number of unordered nearest-neighbour pairs with values {a, b}.
inline int interfaces(const Grid& g, int L, int a, int b) {
  int n = 0;
  for (int r = 0; r < L; ++r) {
    for (int c = 0; c < L; ++c) {
      const int s = at(g, L, c, r);
      for (int t : {at(g, L, c + 1, r), at(g, L, c, r + 1)}) {
        if ((s == a && t == b) || (s == b && t == a)) ++n;
      }
    }
  }
  return n;
}

// Closed-form P_k[hit a before b] for a birth-death walk with constant
// up-rate u and down-rate d (gambler's ruin), a < k < b.
inline double ruin_hit_low(int a, int b, int k, double u, double d) {
  const double rho = d / u;
  if (std::abs(rho - 1.0) < 1e-15) return static_cast<double>(b - k) / (b - a);
  // P[hit b first] = (1 - rho^{k-a}) / (1 - rho^{b-a}) with rho = d/u.
  const double up = (1.0 - std::pow(rho, k - a)) / (1.0 - std::pow(rho, b - a));
  return 1.0 - up;
}

// f(0) = E_0[exp(-theta H_n)] for the walk with up-rate eps, down-rate 1
// (reflected at 0), computed as a product of one-step factors phi_k, where
// phi_k = E_k[exp(-theta H_{k+1})] solves phi_k = eps / (eps + theta + d_k (1 - phi_{k-1})).
inline double laplace_product(int n, double eps, double theta) {
  double prev = 0.0;
  double f = 1.0;
  for (int k = 0; k < n; ++k) {
    const double d = k >= 1 ? 1.0 : 0.0;
    const double phi = eps / (eps + theta + d * (1.0 - prev));
    f *= phi;
    prev = phi;
  }
  return f;
}

}  // namespace oracle
