#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <limits>
#include <string>
#include <vector>

#include "bclab/lattice.hpp"

namespace bclab {

struct Move {
  Site site = 0;
  Direction dir = Direction::Up;

  std::size_t index() const { return 2 * static_cast<std::size_t>(site) + static_cast<std::size_t>(dir); }
  static Move from_index(std::size_t i) {
    return {static_cast<Site>(i / 2), static_cast<Direction>(i % 2)};
  }
  bool operator==(const Move&) const = default;
};

/// Neumaier-compensated running sum.
class CompensatedSum {
 public:
  void add(double v) {
    const double t = sum_ + v;
    if (std::abs(sum_) >= std::abs(v)) {
      comp_ += (sum_ - t) + v;
    } else {
      comp_ += (v - t) + sum_;
    }
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

enum class StopReason { Hit, TimeCap, EventCap, Frozen };

const char* to_string(StopReason r);
StopReason stop_reason_from_string(const std::string& s);

struct Event {
  double dt = 0.0;
  Move move;
};

struct Trajectory {
  SpinConfiguration initial;
  SpinConfiguration final_state;
  std::vector<Event> events;
  bool events_recorded = true;
  std::uint64_t event_count = 0;
  double total_time = 0.0;
  StopReason reason = StopReason::EventCap;
  std::string hit_label;  // empty unless reason == Hit
  double hit_time = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
};

/// Replays the recorded moves from the initial configuration.
SpinConfiguration replay(const Trajectory& traj, const TorusLattice& lattice);

// Line-delimited export: a TRAJECTORY header, one "t_cum site dir" line per
// event, then an END record.
void write_trajectory(std::ostream& os, const Trajectory& traj, const ModelParams& p);

struct LoadedTrajectory {
  Trajectory trajectory;
  int side = 0;
  double field = 0.0;
  double beta = 0.0;
};
LoadedTrajectory read_trajectory(std::istream& is);

using ConfigPredicate = std::function<bool(const SpinConfiguration&)>;

struct TraceVisit {
  SpinConfiguration state;
  double sojourn = 0.0;  // time spent in this state, in the trace clock
};

/// The additive functional T_F(t), its generalized inverse S_F, and the trace
/// trajectory of a path on a subset F.
class TraceProcess {
 public:
  double occupation(double t) const;  // T_F(t)
  double inverse(double tau) const;   // S_F(tau)
  double duration() const { return duration_; }
  double real_duration() const { return real_knots_.empty() ? 0.0 : real_knots_.back(); }
  const std::vector<TraceVisit>& visits() const { return visits_; }
  bool empty() const { return visits_.empty(); }

 private:
  friend TraceProcess trace_time_change(const Trajectory&, const ConfigPredicate&, const TorusLattice&);
  std::vector<double> real_knots_;
  std::vector<double> trace_knots_;
  std::vector<TraceVisit> visits_;
  double duration_ = 0.0;
};

TraceProcess trace_time_change(const Trajectory& traj, const ConfigPredicate& member, const TorusLattice& lattice);

}  // namespace bclab
