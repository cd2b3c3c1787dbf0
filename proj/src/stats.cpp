#include "bclab/stats.hpp"

#include <boost/math/special_functions/gamma.hpp>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace bclab {

Interval wilson_interval(std::uint64_t k, std::uint64_t n, double z) {
  if (n == 0) throw std::invalid_argument("Wilson interval needs n > 0");
  if (k > n) throw std::invalid_argument("Wilson interval needs k <= n");
  const double nn = static_cast<double>(n);
  const double p = static_cast<double>(k) / nn;
  const double z2 = z * z;
  const double centre = (p + z2 / (2 * nn)) / (1 + z2 / nn);
  const double half = z / (1 + z2 / nn) * std::sqrt(p * (1 - p) / nn + z2 / (4 * nn * nn));
  return {std::max(0.0, centre - half), std::min(1.0, centre + half)};
}

Interval poisson_interval(std::uint64_t k, double confidence) {
  if (!(confidence > 0.0 && confidence < 1.0)) throw std::invalid_argument("confidence must be in (0,1)");
  const double tail = 0.5 * (1.0 - confidence);
  // chi2 quantiles expressed through the regularized incomplete gamma.
  const double kk = static_cast<double>(k);
  const double lo = k == 0 ? 0.0 : boost::math::gamma_p_inv(kk, tail);
  const double hi = boost::math::gamma_p_inv(kk + 1.0, 1.0 - tail);
  return {lo, hi};
}

double chi_square_sf(double x, double dof) {
  if (!(dof > 0.0)) throw std::invalid_argument("chi-square needs dof > 0");
  if (x <= 0.0) return 1.0;
  return boost::math::gamma_q(0.5 * dof, 0.5 * x);
}

double chi_square_pvalue(const std::vector<double>& observed, const std::vector<double>& expected) {
  if (observed.size() != expected.size() || observed.empty()) throw std::invalid_argument("cell count mismatch");
  std::vector<double> o;
  std::vector<double> e;
  double po = 0.0;
  double pe = 0.0;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    po += observed[i];
    pe += expected[i];
    if (pe >= 5.0) {
      o.push_back(po);
      e.push_back(pe);
      po = pe = 0.0;
    }
  }
  if (pe > 0.0 || po > 0.0) {
    if (e.empty()) {
      o.push_back(po);
      e.push_back(pe);
    } else {
      o.back() += po;
      e.back() += pe;
    }
  }
  if (e.size() < 2) return 1.0;
  double stat = 0.0;
  for (std::size_t i = 0; i < e.size(); ++i) stat += (o[i] - e[i]) * (o[i] - e[i]) / e[i];
  return chi_square_sf(stat, static_cast<double>(e.size() - 1));
}

double median(std::vector<double> xs) {
  if (xs.empty()) throw std::invalid_argument("median of an empty sample");
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

}  // namespace bclab
