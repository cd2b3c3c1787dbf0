#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace bclab {

enum class Spin : std::int8_t { Minus = -1, Zero = 0, Plus = 1 };

constexpr int value(Spin s) { return static_cast<int>(s); }
constexpr int code(Spin s) { return static_cast<int>(s) + 1; }
constexpr Spin spin_from_code(int c) { return static_cast<Spin>(c - 1); }

using Site = std::int32_t;

// Cyclic flip maps: Up is -1 -> 0 -> +1 -> -1, Down is the inverse.
enum class Direction : std::uint8_t { Up = 0, Down = 1 };

constexpr Spin flipped(Spin s, Direction d) {
  const int c = code(s);
  return spin_from_code(d == Direction::Up ? (c + 1) % 3 : (c + 2) % 3);
}

/// Periodic L x L square lattice. Sites are indexed row-major,
/// site = row * L + col.
class TorusLattice {
 public:
  enum Neighbor : int { Right = 0, Left = 1, Up = 2, Down = 3 };

  explicit TorusLattice(int side);

  int side() const { return side_; }
  int size() const { return side_ * side_; }

  Site site(int col, int row) const;
  int col(Site x) const { return x % side_; }
  int row(Site x) const { return x / side_; }
  Site translate(Site x, int dcol, int drow) const;

  const std::array<Site, 4>& neighbors(Site x) const { return nbr_[static_cast<std::size_t>(x)]; }

  /// Nearest-neighbour bonds as (x, x+e1) and (x, x+e2); 2 L^2 entries.
  std::vector<std::pair<Site, Site>> bonds() const;

  bool valid(Site x) const { return x >= 0 && x < size(); }

  bool operator==(const TorusLattice& other) const { return side_ == other.side_; }

 private:
  int side_;
  std::vector<std::array<Site, 4>> nbr_;
};

/// Field, inverse temperature and torus. Construction rejects fields for
/// which 2/h is (numerically) an integer.
class ModelParams {
 public:
  ModelParams(double field, double beta, int side);

  double field() const { return field_; }
  double beta() const { return beta_; }
  const TorusLattice& lattice() const { return lattice_; }
  int sites() const { return lattice_.size(); }

  /// n0 = floor(2/h).
  int critical_side() const { return critical_side_; }
  /// n0 (n0 + 1), the number of non-minus spins of a critical rectangle.
  int critical_area() const { return critical_side_ * (critical_side_ + 1); }
  bool theorem_regime() const { return field_ > 0.0 && field_ < 1.0; }

  ModelParams with_beta(double beta) const { return ModelParams(field_, beta, lattice_.side()); }

 private:
  double field_;
  double beta_;
  TorusLattice lattice_;
  int critical_side_;
};

/// Spin configuration stored as packed 2-bit codes (32 sites per word).
/// Per-value counts are always maintained; the bond sum is cached once
/// computed and kept in sync by flip().
class SpinConfiguration {
 public:
  SpinConfiguration() = default;
  SpinConfiguration(int sites, Spin fill);

  static SpinConfiguration uniform(const TorusLattice& lattice, Spin fill) {
    return SpinConfiguration(lattice.size(), fill);
  }

  int size() const { return sites_; }

  Spin operator[](Site x) const {
    const auto w = words_[static_cast<std::size_t>(x) >> 5];
    return spin_from_code(static_cast<int>((w >> ((x & 31) * 2)) & 3u));
  }

  /// Sets one spin. Drops the cached bond sum.
  void set(Site x, Spin s);

  int count(Spin s) const { return counts_[static_cast<std::size_t>(code(s))]; }
  /// Number of spins different from -1.
  int non_minus() const { return sites_ - count(Spin::Minus); }
  int magnetization() const { return count(Spin::Plus) - count(Spin::Minus); }
  bool is_uniform(Spin s) const { return count(s) == sites_; }

  std::optional<long> cached_bonds() const { return bonds_; }
  void set_cached_bonds(long b) { bonds_ = b; }

  /// Cached energy bonds - h * magnetization, if the bond sum is cached.
  std::optional<double> cached_energy(double field) const;

  std::span<const std::uint64_t> words() const { return words_; }

  /// Changes site x to s, adjusting the cached bond sum by delta_bonds.
  void flip_with_bond_delta(Site x, Spin s, int delta_bonds);

  bool operator==(const SpinConfiguration& other) const {
    return sites_ == other.sites_ && words_ == other.words_;
  }

 private:
  void raw_set(Site x, Spin s);

  int sites_ = 0;
  std::vector<std::uint64_t> words_;
  std::array<int, 3> counts_{0, 0, 0};
  std::optional<long> bonds_;
};

struct SpinConfigurationHash {
  std::size_t operator()(const SpinConfiguration& s) const;
};

struct SiteStatistics {
  int non_minus = 0;   // N
  int plus = 0;        // N1
  std::vector<Site> support;  // A(sigma), ascending
  int magnetization = 0;
};

/// Sum over nearest-neighbour bonds of (sigma(y) - sigma(x))^2.
long bond_sum(const SpinConfiguration& sigma, const TorusLattice& lattice);

double energy(const SpinConfiguration& sigma, const ModelParams& p);

int delta_bonds(const SpinConfiguration& sigma, Site x, Spin to, const TorusLattice& lattice);

/// H(sigma^{x,dir}) - H(sigma) from the four incident bonds and the field term.
double delta_energy(const SpinConfiguration& sigma, Site x, Direction dir, const ModelParams& p);

/// In-place flip; initializes the bond cache if it was absent.
void flip_in_place(SpinConfiguration& sigma, Site x, Direction dir, const TorusLattice& lattice);

SpinConfiguration apply_flip(const SpinConfiguration& sigma, Site x, Direction dir, const ModelParams& p);

SiteStatistics site_statistics(const SpinConfiguration& sigma);

/// Number of unordered nn pairs carrying the values {a, b}; requires a < b.
long interface_count(const SpinConfiguration& sigma, Spin a, Spin b, const TorusLattice& lattice);

/// Connected components of A(sigma) under nearest-neighbour adjacency.
std::vector<std::vector<Site>> connected_components(const SpinConfiguration& sigma,
                                                    const TorusLattice& lattice);

/// Pointwise min(sigma, 0).
SpinConfiguration flatten(const SpinConfiguration& sigma);

/// log of exp(-beta (H(sigma) - H(ref))).
double log_relative_gibbs_weight(const SpinConfiguration& sigma, const SpinConfiguration& ref,
                                 const ModelParams& p);
double relative_gibbs_weight(const SpinConfiguration& sigma, const SpinConfiguration& ref,
                             const ModelParams& p);

// Snapshot text: "L h RLE" on one line, RLE in row-major order with symbols
// m (-1), z (0), p (+1), e.g. "5 0.90000000000000002 25m".
std::string encode_rle(const SpinConfiguration& sigma);
SpinConfiguration decode_rle(std::string_view rle, int sites);

struct Snapshot {
  int side = 0;
  double field = 0.0;
  SpinConfiguration spins;
};

std::string to_snapshot_line(const SpinConfiguration& sigma, int side, double field);
Snapshot parse_snapshot_line(std::string_view line);

}  // namespace bclab
