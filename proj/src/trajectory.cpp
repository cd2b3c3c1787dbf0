#include "bclab/trajectory.hpp"

#include <algorithm>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "bclab/textio.hpp"

namespace bclab {

const char* to_string(StopReason r) {
  switch (r) {
    case StopReason::Hit: return "hit";
    case StopReason::TimeCap: return "time_cap";
    case StopReason::EventCap: return "event_cap";
    case StopReason::Frozen: return "frozen";
  }
  return "unknown";
}

StopReason stop_reason_from_string(const std::string& s) {
  if (s == "hit") return StopReason::Hit;
  if (s == "time_cap") return StopReason::TimeCap;
  if (s == "event_cap") return StopReason::EventCap;
  if (s == "frozen") return StopReason::Frozen;
  throw std::invalid_argument("unknown stop reason '" + s + "'");
}

namespace {

void require_events(const Trajectory& traj) {
  if (!traj.events_recorded) throw std::invalid_argument("trajectory was run without event recording");
}

}  // namespace

SpinConfiguration replay(const Trajectory& traj, const TorusLattice& lattice) {
  require_events(traj);
  SpinConfiguration sigma = traj.initial;
  for (const auto& e : traj.events) flip_in_place(sigma, e.move.site, e.move.dir, lattice);
  return sigma;
}

void write_trajectory(std::ostream& os, const Trajectory& traj, const ModelParams& p) {
  require_events(traj);
  if (traj.hit_label.find_first_of(" \t\n") != std::string::npos)
    throw std::invalid_argument("hit labels must not contain whitespace");
  os << "TRAJECTORY L " << p.lattice().side() << " h " << format_double(p.field()) << " beta "
     << format_double(p.beta()) << " seed " << traj.seed << " stream " << traj.stream << " events "
     << traj.events.size() << '\n';
  os << "INIT " << to_snapshot_line(traj.initial, p.lattice().side(), p.field()) << '\n';
  CompensatedSum clock;
  for (const auto& e : traj.events) {
    clock.add(e.dt);
    os << format_double(clock.value()) << ' ' << e.move.site << ' ' << (e.move.dir == Direction::Up ? '+' : '-')
       << '\n';
  }
  os << "END " << to_string(traj.reason) << ' ' << (traj.hit_label.empty() ? "-" : traj.hit_label) << ' '
     << format_double(traj.total_time) << '\n';
}

LoadedTrajectory read_trajectory(std::istream& is) {
  LoadedTrajectory out;
  Trajectory& traj = out.trajectory;
  std::string line;
  auto next_line = [&]() {
    if (!std::getline(is, line)) throw std::invalid_argument("truncated trajectory record");
  };

  next_line();
  {
    std::istringstream hs(line);
    std::string tag, k1, k2, k3, k4, k5, k6, h, beta;
    std::size_t events = 0;
    hs >> tag >> k1 >> out.side >> k2 >> h >> k3 >> beta >> k4 >> traj.seed >> k5 >> traj.stream >> k6 >> events;
    if (!hs || tag != "TRAJECTORY" || k1 != "L" || k2 != "h" || k3 != "beta" || k4 != "seed" || k5 != "stream" ||
        k6 != "events")
      throw std::invalid_argument("bad trajectory header: " + line);
    out.field = parse_double(h);
    out.beta = parse_double(beta);
    traj.events.reserve(events);
  }

  next_line();
  if (line.rfind("INIT ", 0) != 0) throw std::invalid_argument("missing INIT record");
  const Snapshot snap = parse_snapshot_line(std::string_view(line).substr(5));
  if (snap.side != out.side) throw std::invalid_argument("INIT snapshot side differs from header");
  traj.initial = snap.spins;

  const TorusLattice lattice(out.side);
  double previous = 0.0;
  while (true) {
    next_line();
    if (line.rfind("END ", 0) == 0) break;
    std::istringstream es(line);
    std::string t, dir;
    Site site = -1;
    es >> t >> site >> dir;
    if (!es || !lattice.valid(site) || (dir != "+" && dir != "-"))
      throw std::invalid_argument("bad event record: " + line);
    const double cum = parse_double(t);
    if (!(cum >= previous)) throw std::invalid_argument("event times must not decrease");
    traj.events.push_back({cum - previous, {site, dir == "+" ? Direction::Up : Direction::Down}});
    previous = cum;
  }

  std::istringstream fs(line);
  std::string tag, reason, label, total;
  fs >> tag >> reason >> label >> total;
  if (!fs) throw std::invalid_argument("bad END record: " + line);
  traj.reason = stop_reason_from_string(reason);
  traj.hit_label = label == "-" ? "" : label;
  traj.total_time = parse_double(total);
  if (traj.reason == StopReason::Hit) traj.hit_time = traj.total_time;
  traj.event_count = traj.events.size();
  traj.events_recorded = true;
  traj.final_state = replay(traj, lattice);
  return out;
}

double TraceProcess::occupation(double t) const {
  if (real_knots_.empty() || t <= 0.0) return 0.0;
  if (t >= real_knots_.back()) return duration_;
  const auto it = std::upper_bound(real_knots_.begin(), real_knots_.end(), t);
  const std::size_t k = static_cast<std::size_t>(it - real_knots_.begin()) - 1;
  const double slope = (trace_knots_[k + 1] > trace_knots_[k]) ? 1.0 : 0.0;
  return std::min(trace_knots_[k] + slope * (t - real_knots_[k]), trace_knots_[k + 1]);
}

double TraceProcess::inverse(double tau) const {
  if (empty()) throw std::domain_error("trace is empty");
  if (tau < 0.0 || tau > duration_) throw std::out_of_range("trace time outside [0, duration]");
  if (tau == duration_) return real_knots_.back();
  // Largest s with T_F(s) <= tau lies in the F-segment whose trace range
  // contains tau.
  for (std::size_t k = 0; k + 1 < real_knots_.size(); ++k) {
    if (trace_knots_[k + 1] > trace_knots_[k] && tau >= trace_knots_[k] && tau < trace_knots_[k + 1])
      return real_knots_[k] + (tau - trace_knots_[k]);
  }
  return real_knots_.back();
}

TraceProcess trace_time_change(const Trajectory& traj, const ConfigPredicate& member, const TorusLattice& lattice) {
  require_events(traj);
  TraceProcess tp;
  SpinConfiguration sigma = traj.initial;
  CompensatedSum real_clock;
  CompensatedSum trace_clock;
  tp.real_knots_.push_back(0.0);
  tp.trace_knots_.push_back(0.0);

  auto segment = [&](double len) {
    const bool in_f = member(sigma);
    real_clock.add(len);
    if (in_f) {
      trace_clock.add(len);
      if (!tp.visits_.empty() && tp.visits_.back().state == sigma) {
        tp.visits_.back().sojourn += len;
      } else {
        tp.visits_.push_back({sigma, len});
      }
    }
    tp.real_knots_.push_back(real_clock.value());
    tp.trace_knots_.push_back(trace_clock.value());
  };

  double elapsed = 0.0;
  {
    CompensatedSum c;
    for (const auto& e : traj.events) {
      segment(e.dt);
      c.add(e.dt);
      flip_in_place(sigma, e.move.site, e.move.dir, lattice);
    }
    elapsed = c.value();
  }
  segment(std::max(0.0, traj.total_time - elapsed));
  tp.duration_ = trace_clock.value();
  return tp;
}

}  // namespace bclab
