#pragma once

#include <array>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "bclab/lattice.hpp"
#include "bclab/potential.hpp"
#include "bclab/stats.hpp"
#include "bclab/trajectory.hpp"

namespace bclab {

/// Psi: the monochromatic states map to their spin, everything else to d.
enum class Projection { Minus, Zero, Plus, Dagger };

Projection project_psi(const SpinConfiguration& sigma);
const char* token(Projection p);
inline bool in_M(Projection p) { return p != Projection::Dagger; }
/// Index 0, 1, 2 for -1, 0, +1.
inline int m_index(Projection p) { return static_cast<int>(p); }
inline Projection m_state(int i) { return static_cast<Projection>(i); }

struct TraceSegment {
  Projection state = Projection::Minus;
  double sojourn = 0.0;  // M-clock time
};

/// Trace of a path on M = {-1, 0, +1}.
struct TraceTrajectory {
  std::vector<TraceSegment> visits;
  double outside_time = 0.0;  // time with Psi = d
  double total_time = 0.0;
  bool empty() const { return visits.empty(); }
  double duration() const;  // sum of sojourns
};

TraceTrajectory trace_on_M(const Trajectory& traj, const TorusLattice& lattice);

/// The same trace built online from a run observer, without recorded events.
class OnlineTrace {
 public:
  explicit OnlineTrace(const SpinConfiguration& initial);
  /// New configuration entered at cumulative time t.
  void observe(const SpinConfiguration& sigma, double t);
  /// Closes the last segment at the run's total time.
  TraceTrajectory finish(double total_time);
  /// A callable suitable for RunOptions::observer.
  auto observer() {
    return [this](const SpinConfiguration& s, double t) { observe(s, t); };
  }

 private:
  void close(double t);
  TraceTrajectory out_;
  Projection current_;
  double since_ = 0.0;
  CompensatedSum outside_;
  CompensatedSum inside_;
};

struct RateEstimate {
  Projection from = Projection::Minus;
  Projection to = Projection::Zero;
  std::uint64_t count = 0;
  double sojourn_over_theta = 0.0;  // exposure of `from`, in units of theta_ref
  bool defined = false;             // false when the exposure is zero
  double rate = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  double half_width() const { return 0.5 * (ci_hi - ci_lo); }
};

/// Pooled counts and exposures over traces. Sojourns that end the trace
/// without a transition are right-censored and count toward exposure only.
class RateAccumulator {
 public:
  void add(const TraceTrajectory& trace);
  void merge(const RateAccumulator& other);
  std::uint64_t count(Projection a, Projection b) const { return counts_[idx(a)][idx(b)]; }
  double exposure(Projection a) const { return exposure_[idx(a)]; }
  /// All six ordered pairs of distinct M states, Garwood intervals at the
  /// given confidence.
  std::vector<RateEstimate> estimates(double theta_ref, double confidence = 0.95) const;

 private:
  static std::size_t idx(Projection p) { return static_cast<std::size_t>(p); }
  std::array<std::array<std::uint64_t, 3>, 3> counts_{};
  std::array<double, 3> exposure_{};
};

std::vector<RateEstimate> empirical_jump_rates(const std::vector<TraceTrajectory>& traces, double theta_ref,
                                               double confidence = 0.95);

/// Fraction of [0, T] spent with Psi = d; requires T <= total time.
double time_fraction_outside(const Trajectory& traj, double T, const TorusLattice& lattice);

/// r_F(x,y) = lambda(x) P_x[H_F^+ = H_y] on an enumerated chain, for a set F
/// of states; row/column order follows F.
std::vector<std::vector<double>> trace_rates_exact(const EnumeratedChain& chain, const StateSet& F,
                                                   const SolveOptions& opts = {});

/// CSV with header from,to,count,sojourn_over_theta,rate,ci_lo,ci_hi.
void write_rate_csv(std::ostream& os, const std::vector<RateEstimate>& rates);

}  // namespace bclab
