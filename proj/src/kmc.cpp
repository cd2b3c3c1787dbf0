#include "bclab/kmc.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace bclab {

double flip_rate(const SpinConfiguration& sigma, Move m, const ModelParams& p) {
  const double dh = delta_energy(sigma, m.site, m.dir, p);
  return dh <= 0.0 ? 1.0 : std::exp(-p.beta() * dh);
}

double holding_rate(const SpinConfiguration& sigma, const ModelParams& p) {
  double total = 0.0;
  for (Site x = 0; x < p.sites(); ++x) {
    total += flip_rate(sigma, {x, Direction::Up}, p);
    total += flip_rate(sigma, {x, Direction::Down}, p);
  }
  return total;
}

EventCatalog::EventCatalog(const SpinConfiguration& sigma, const ModelParams& p)
    : moves_(2 * static_cast<std::size_t>(p.sites())), capacity_(1) {
  if (sigma.size() != p.sites()) throw std::invalid_argument("configuration size does not match lattice");
  while (capacity_ < moves_) capacity_ <<= 1;
  tree_.assign(2 * capacity_, 0.0);
  for (std::size_t i = 0; i < moves_; ++i) tree_[capacity_ + i] = flip_rate(sigma, Move::from_index(i), p);
  for (std::size_t n = capacity_ - 1; n >= 1; --n) tree_[n] = tree_[2 * n] + tree_[2 * n + 1];
}

void EventCatalog::set_leaf(std::size_t move, double r) {
  std::size_t n = capacity_ + move;
  tree_[n] = r;
  for (n >>= 1; n >= 1; n >>= 1) tree_[n] = tree_[2 * n] + tree_[2 * n + 1];
}

void EventCatalog::set_rate(std::size_t move, double r) {
  if (move >= moves_) throw std::out_of_range("move index outside catalog");
  if (!(r >= 0.0)) throw std::invalid_argument("rates must be nonnegative");
  set_leaf(move, r);
}

std::size_t EventCatalog::find(double target) const {
  std::size_t n = 1;
  while (n < capacity_) {
    const double left = tree_[2 * n];
    const double right = tree_[2 * n + 1];
    // Rounding can push target past a subtree sum; never descend into a
    // zero-weight branch.
    if ((target < left && left > 0.0) || right <= 0.0) {
      n = 2 * n;
    } else {
      target -= left;
      n = 2 * n + 1;
    }
  }
  return n - capacity_;
}

int EventCatalog::refresh_after_flip(const SpinConfiguration& after, Site flipped, const ModelParams& p) {
  const auto& nb = p.lattice().neighbors(flipped);
  std::array<Site, 5> sites{flipped, nb[0], nb[1], nb[2], nb[3]};
  int touched = 0;
  for (std::size_t k = 0; k < sites.size(); ++k) {
    const Site x = sites[k];
    if (std::find(sites.begin(), sites.begin() + static_cast<std::ptrdiff_t>(k), x) !=
        sites.begin() + static_cast<std::ptrdiff_t>(k))
      continue;
    for (Direction d : {Direction::Up, Direction::Down}) {
      const Move m{x, d};
      set_leaf(m.index(), flip_rate(after, m, p));
      ++touched;
    }
  }
  return touched;
}

double EventCatalog::max_relative_deviation(const SpinConfiguration& sigma, const ModelParams& p) const {
  double worst = 0.0;
  for (std::size_t i = 0; i < moves_; ++i) {
    const double fresh = flip_rate(sigma, Move::from_index(i), p);
    const double dev = std::abs(rate(i) - fresh) / fresh;
    worst = std::max(worst, dev);
  }
  return worst;
}

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream) : seed_(seed), stream_(stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  engine_.seed(seq);
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Sample sample_step(const EventCatalog& catalog, RngStream& rng) {
  const double total = catalog.total();
  if (!(total > 0.0)) throw std::runtime_error("cannot sample from a catalog with zero total rate");
  const double dt = rng.exponential(total);
  const std::size_t i = catalog.find(rng.uniform() * total);
  return {dt, Move::from_index(i)};
}

namespace {

void check_stop(const StopCondition& stop) {
  if (stop.targets.empty() && !stop.time_cap && !stop.event_cap)
    throw std::invalid_argument("stop condition needs a target, a time cap or an event cap");
  for (const auto& t : stop.targets) {
    if (!t.member) throw std::invalid_argument("target '" + t.label + "' has no membership predicate");
  }
}

const Target* first_hit(const StopCondition& stop, const SpinConfiguration& sigma) {
  for (const auto& t : stop.targets) {
    if (t.member(sigma)) return &t;
  }
  return nullptr;
}

void mask_catalog(EventCatalog& catalog, const SpinConfiguration& sigma, const ConfigPredicate& valley,
                  const ModelParams& p) {
  SpinConfiguration probe = sigma;
  for (std::size_t i = 0; i < catalog.size(); ++i) {
    const Move m = Move::from_index(i);
    flip_in_place(probe, m.site, m.dir, p.lattice());
    const bool inside = valley(probe);
    flip_in_place(probe, m.site, m.dir == Direction::Up ? Direction::Down : Direction::Up, p.lattice());
    catalog.set_rate(i, inside ? flip_rate(sigma, m, p) : 0.0);
  }
}

Trajectory run_impl(const SpinConfiguration& start, const StopCondition& stop, const ModelParams& p, RngStream& rng,
                    const RunOptions& options, const ConfigPredicate* valley) {
  check_stop(stop);
  if (start.size() != p.sites()) throw std::invalid_argument("configuration size does not match lattice");

  Trajectory traj;
  traj.initial = start;
  traj.seed = rng.seed();
  traj.stream = rng.stream();
  traj.events_recorded = options.record_events;

  SpinConfiguration sigma = start;
  if (!sigma.cached_bonds()) sigma.set_cached_bonds(bond_sum(sigma, p.lattice()));

  auto finish = [&](StopReason reason, double time, const Target* hit) {
    traj.reason = reason;
    traj.total_time = time;
    if (hit) {
      traj.hit_label = hit->label;
      traj.hit_time = time;
    }
    traj.final_state = sigma;
    return traj;
  };

  if (!stop.arm_after_first_jump) {
    if (const Target* hit = first_hit(stop, sigma)) return finish(StopReason::Hit, 0.0, hit);
  }

  EventCatalog catalog(sigma, p);
  if (valley) mask_catalog(catalog, sigma, *valley, p);

  CompensatedSum clock;
  std::uint64_t events = 0;
  while (true) {
    if (stop.event_cap && events >= *stop.event_cap) return finish(StopReason::EventCap, clock.value(), nullptr);
    if (!(catalog.total() > 0.0)) return finish(StopReason::Frozen, clock.value(), nullptr);

    const Sample s = sample_step(catalog, rng);
    if (stop.time_cap && clock.value() + s.dt > *stop.time_cap)
      return finish(StopReason::TimeCap, *stop.time_cap, nullptr);

    flip_in_place(sigma, s.move.site, s.move.dir, p.lattice());
    if (valley) {
      mask_catalog(catalog, sigma, *valley, p);
    } else {
      catalog.refresh_after_flip(sigma, s.move.site, p);
    }
    clock.add(s.dt);
    ++events;
    traj.event_count = events;
    if (options.record_events) traj.events.push_back({s.dt, s.move});

    if (options.consistency_interval != 0 && events % options.consistency_interval == 0) {
      const long fresh = bond_sum(sigma, p.lattice());
      if (*sigma.cached_bonds() != fresh)
        throw std::runtime_error("energy cache drifted after " + std::to_string(events) + " flips");
      if (!valley) {
        const double dev = catalog.max_relative_deviation(sigma, p);
        if (dev > 1e-12)
          throw std::runtime_error("event catalog desynchronized after " + std::to_string(events) +
                                   " flips (relative deviation " + std::to_string(dev) + ")");
      }
    }

    if (options.observer) options.observer(sigma, clock.value());
    if (const Target* hit = first_hit(stop, sigma)) return finish(StopReason::Hit, clock.value(), hit);
  }
}

}  // namespace

Trajectory run_until(const SpinConfiguration& start, const StopCondition& stop, const ModelParams& p,
                     RngStream& rng, const RunOptions& options) {
  return run_impl(start, stop, p, rng, options, nullptr);
}

Trajectory run_reflected(const SpinConfiguration& start, const ConfigPredicate& valley, const StopCondition& stop,
                         const ModelParams& p, RngStream& rng, const RunOptions& options) {
  if (!valley) throw std::invalid_argument("reflected run needs a valley predicate");
  if (!valley(start)) throw std::invalid_argument("reflected run must start inside the valley");
  return run_impl(start, stop, p, rng, options, &valley);
}

}  // namespace bclab
