#pragma once

#include <cstdint>
#include <vector>

namespace bclab {

inline constexpr double kZ95 = 1.959964;

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

/// Wilson score interval for k successes in n trials.
Interval wilson_interval(std::uint64_t k, std::uint64_t n, double z = kZ95);

/// Exact (Garwood) two-sided interval for a Poisson mean given count k.
Interval poisson_interval(std::uint64_t k, double confidence = 0.95);

/// Upper tail P[chi2_dof >= x].
double chi_square_sf(double x, double dof);

/// Pearson goodness of fit against expected counts; returns the p-value.
/// Cells with expected < 5 are pooled into their neighbour.
double chi_square_pvalue(const std::vector<double>& observed, const std::vector<double>& expected);

double median(std::vector<double> xs);

}  // namespace bclab
