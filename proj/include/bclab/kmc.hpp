#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "bclab/lattice.hpp"
#include "bclab/trajectory.hpp"

namespace bclab {

/// exp(-beta [dH]_+).
double flip_rate(const SpinConfiguration& sigma, Move m, const ModelParams& p);

/// lambda(sigma): sum of the 2 L^2 flip rates.
double holding_rate(const SpinConfiguration& sigma, const ModelParams& p);

/// Per-move rates over a binary sum tree. Parents are always recomputed
/// from their children, so the stored total is the exact tree sum.
class EventCatalog {
 public:
  EventCatalog(const SpinConfiguration& sigma, const ModelParams& p);

  std::size_t size() const { return moves_; }
  double total() const { return tree_[1]; }
  double rate(std::size_t move) const { return tree_[capacity_ + move]; }

  /// Move whose cumulative-rate bucket contains target, 0 <= target < total().
  std::size_t find(double target) const;

  void set_rate(std::size_t move, double r);

  /// Recomputes the moves of the flipped site and its four neighbours;
  /// returns the number of entries rewritten (10 for L >= 3).
  int refresh_after_flip(const SpinConfiguration& after, Site flipped, const ModelParams& p);

  /// Largest relative entrywise deviation from a fresh build on sigma.
  double max_relative_deviation(const SpinConfiguration& sigma, const ModelParams& p) const;

 private:
  void set_leaf(std::size_t move, double r);

  std::size_t moves_;
  std::size_t capacity_;
  std::vector<double> tree_;
};

/// Reproducible generator: identical (seed, stream) give identical draws.
/// Engine is mt19937_64 seeded from {seed, stream} through seed_seq; uniforms
/// are built from the top 53 bits so results do not depend on the standard
/// library's distribution implementations.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

  std::uint64_t next() { return engine_(); }
  /// Uniform on the open interval (0, 1).
  double uniform() { return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53; }
  double exponential(double rate) { return -std::log(uniform()) / rate; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::mt19937_64 engine_;
};

/// Stable mixing of a base seed with a tag (splitmix64 finalizer).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag);

struct Sample {
  double dt;
  Move move;
};

/// One rejection-free step: Exp(total) holding time, move drawn
/// proportionally to its rate.
Sample sample_step(const EventCatalog& catalog, RngStream& rng);

inline constexpr std::uint64_t kDefaultEventCap = 1'000'000'000ULL;
inline constexpr std::uint64_t kDefaultConsistencyInterval = 1'000'000ULL;

struct Target {
  std::string label;
  ConfigPredicate member;
};

struct StopCondition {
  std::vector<Target> targets;
  std::optional<double> time_cap;
  std::optional<std::uint64_t> event_cap = kDefaultEventCap;
  /// Return-time semantics H^+: targets are only checked after the first jump.
  bool arm_after_first_jump = false;
};

struct RunOptions {
  bool record_events = true;
  /// Called after every jump with the new configuration and cumulative time.
  std::function<void(const SpinConfiguration&, double)> observer;
  /// When non-zero, every this many flips the catalog and energy cache are
  /// checked against fresh computations; drift throws.
  std::uint64_t consistency_interval = 0;
};

Trajectory run_until(const SpinConfiguration& start, const StopCondition& stop, const ModelParams& p,
                     RngStream& rng, const RunOptions& options = {});

/// Dynamics with every jump leaving the valley suppressed. Rates of all moves
/// are re-masked after each jump, so each step costs 2 L^2 predicate calls.
Trajectory run_reflected(const SpinConfiguration& start, const ConfigPredicate& valley, const StopCondition& stop,
                         const ModelParams& p, RngStream& rng, const RunOptions& options = {});

}  // namespace bclab
