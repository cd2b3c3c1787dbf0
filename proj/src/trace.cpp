#include "bclab/trace.hpp"

#include <ostream>
#include <stdexcept>

#include "bclab/textio.hpp"

namespace bclab {

Projection project_psi(const SpinConfiguration& sigma) {
  if (sigma.is_uniform(Spin::Minus)) return Projection::Minus;
  if (sigma.is_uniform(Spin::Zero)) return Projection::Zero;
  if (sigma.is_uniform(Spin::Plus)) return Projection::Plus;
  return Projection::Dagger;
}

const char* token(Projection p) {
  switch (p) {
    case Projection::Minus: return "-1";
    case Projection::Zero: return "0";
    case Projection::Plus: return "+1";
    case Projection::Dagger: return "d";
  }
  return "?";
}

double TraceTrajectory::duration() const {
  CompensatedSum s;
  for (const auto& v : visits) s.add(v.sojourn);
  return s.value();
}

TraceTrajectory trace_on_M(const Trajectory& traj, const TorusLattice& lattice) {
  const auto member = [](const SpinConfiguration& s) { return in_M(project_psi(s)); };
  const auto tp = trace_time_change(traj, member, lattice);
  TraceTrajectory out;
  out.total_time = traj.total_time;
  for (const auto& v : tp.visits()) out.visits.push_back({project_psi(v.state), v.sojourn});

  SpinConfiguration cur = traj.initial;
  CompensatedSum outside;
  CompensatedSum elapsed;
  for (const auto& e : traj.events) {
    if (!in_M(project_psi(cur))) outside.add(e.dt);
    elapsed.add(e.dt);
    flip_in_place(cur, e.move.site, e.move.dir, lattice);
  }
  if (!in_M(project_psi(cur))) outside.add(traj.total_time - elapsed.value());
  out.outside_time = outside.value();
  return out;
}

OnlineTrace::OnlineTrace(const SpinConfiguration& initial) : current_(project_psi(initial)) {}

void OnlineTrace::close(double t) {
  const double dt = t - since_;
  if (in_M(current_)) {
    inside_.add(dt);
    if (!out_.visits.empty() && out_.visits.back().state == current_) {
      out_.visits.back().sojourn += dt;
    } else {
      out_.visits.push_back({current_, dt});
    }
  } else {
    outside_.add(dt);
  }
  since_ = t;
}

void OnlineTrace::observe(const SpinConfiguration& sigma, double t) {
  const Projection next = project_psi(sigma);
  // Flips inside d, or between d and M, only matter at boundaries.
  if (next == current_) return;
  close(t);
  current_ = next;
}

TraceTrajectory OnlineTrace::finish(double total_time) {
  close(total_time);
  out_.outside_time = outside_.value();
  out_.total_time = total_time;
  return out_;
}

void RateAccumulator::add(const TraceTrajectory& trace) {
  for (std::size_t k = 0; k < trace.visits.size(); ++k) {
    const auto from = trace.visits[k].state;
    exposure_[idx(from)] += trace.visits[k].sojourn;
    if (k + 1 < trace.visits.size()) ++counts_[idx(from)][idx(trace.visits[k + 1].state)];
  }
}

void RateAccumulator::merge(const RateAccumulator& other) {
  for (std::size_t a = 0; a < 3; ++a) {
    exposure_[a] += other.exposure_[a];
    for (std::size_t b = 0; b < 3; ++b) counts_[a][b] += other.counts_[a][b];
  }
}

std::vector<RateEstimate> RateAccumulator::estimates(double theta_ref, double confidence) const {
  if (!(theta_ref > 0.0)) throw std::invalid_argument("theta_ref must be positive");
  std::vector<RateEstimate> out;
  for (int a = 0; a < 3; ++a) {
    for (int b = 0; b < 3; ++b) {
      if (a == b) continue;
      RateEstimate r;
      r.from = m_state(a);
      r.to = m_state(b);
      r.count = counts_[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)];
      r.sojourn_over_theta = exposure_[static_cast<std::size_t>(a)] / theta_ref;
      r.defined = r.sojourn_over_theta > 0.0;
      if (r.defined) {
        const auto ci = poisson_interval(r.count, confidence);
        r.rate = static_cast<double>(r.count) / r.sojourn_over_theta;
        r.ci_lo = ci.lo / r.sojourn_over_theta;
        r.ci_hi = ci.hi / r.sojourn_over_theta;
      }
      out.push_back(r);
    }
  }
  return out;
}

std::vector<RateEstimate> empirical_jump_rates(const std::vector<TraceTrajectory>& traces, double theta_ref,
                                               double confidence) {
  RateAccumulator acc;
  for (const auto& t : traces) acc.add(t);
  return acc.estimates(theta_ref, confidence);
}

double time_fraction_outside(const Trajectory& traj, double T, const TorusLattice& lattice) {
  if (!(T > 0.0)) throw std::invalid_argument("window must have positive length");
  if (T > traj.total_time * (1.0 + 1e-12)) throw std::invalid_argument("window exceeds trajectory duration");
  SpinConfiguration cur = traj.initial;
  CompensatedSum outside;
  double t = 0.0;
  for (const auto& e : traj.events) {
    const double end = std::min(T, t + e.dt);
    if (!in_M(project_psi(cur))) outside.add(end - t);
    t += e.dt;
    if (t >= T) return outside.value() / T;
    flip_in_place(cur, e.move.site, e.move.dir, lattice);
  }
  if (!in_M(project_psi(cur))) outside.add(T - t);
  return outside.value() / T;
}

std::vector<std::vector<double>> trace_rates_exact(const EnumeratedChain& chain, const StateSet& F,
                                                   const SolveOptions& opts) {
  const std::size_t k = F.size();
  std::vector<std::vector<double>> r(k, std::vector<double>(k, 0.0));
  if (k < 2) return r;
  for (std::size_t b = 0; b < k; ++b) {
    StateSet rest;
    for (std::size_t j = 0; j < k; ++j) {
      if (j != b) rest.push_back(F[j]);
    }
    // g(z) = P_z[H_y < H_{F \ y}], then one jump from each x in F.
    const auto g = harmonic_solve(chain, {F[b]}, rest, opts);
    for (std::size_t a = 0; a < k; ++a) {
      if (a == b) continue;
      const std::size_t x = F[a];
      double s = 0.0;
      for (std::size_t e = chain.row_begin(x); e < chain.row_end(x); ++e) {
        const double v = g.value[chain.target(e)];
        if (!std::isnan(v)) s += chain.rate(e) * v;
      }
      r[a][b] = s;
    }
  }
  return r;
}

void write_rate_csv(std::ostream& os, const std::vector<RateEstimate>& rates) {
  os << "from,to,count,sojourn_over_theta,rate,ci_lo,ci_hi\n";
  for (const auto& r : rates) {
    os << token(r.from) << ',' << token(r.to) << ',' << r.count << ',' << format_double(r.sojourn_over_theta) << ',';
    if (r.defined) {
      os << format_double(r.rate) << ',' << format_double(r.ci_lo) << ',' << format_double(r.ci_hi);
    } else {
      os << "nan,nan,nan";
    }
    os << '\n';
  }
}

}  // namespace bclab
