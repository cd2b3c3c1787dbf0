#pragma once

#include <optional>
#include <string>
#include <vector>

#include "bclab/lattice.hpp"

namespace bclab {

/// floor(2/h); throws when 2/h is an integer.
int critical_side(double h);

struct CriticalEnergy {
  double absolute;          // energy of any configuration with a critical droplet
  double relative_barrier;  // absolute - H(all -1)
};

/// Requires the theorem regime (h < 1).
CriticalEnergy gamma_c(const ModelParams& p);

enum class DropletLabel {
  MinusOne,
  Zero,
  PlusOne,
  R,
  RplusNonAttached,
  Ra_lc,
  Ra_li,
  Ra_s,
  B_minus_R,
  Other,
};

/// Fixed ASCII tokens: M-1 M0 M+1 R Rplus Ra_lc Ra_li Ra_s B Other.
const char* token(DropletLabel label);
DropletLabel label_from_token(const std::string& tok);

inline bool is_attached(DropletLabel l) {
  return l == DropletLabel::Ra_lc || l == DropletLabel::Ra_li || l == DropletLabel::Ra_s;
}
inline bool is_long_side(DropletLabel l) { return l == DropletLabel::Ra_lc || l == DropletLabel::Ra_li; }
inline bool is_rplus(DropletLabel l) { return is_attached(l) || l == DropletLabel::RplusNonAttached; }

enum class RectSide { Left, Right, Bottom, Top };

struct Protuberance {
  RectSide side;
  int offset;  // position along the side, from the bottom or left end
};

struct DropletClass {
  DropletLabel label = DropletLabel::Other;
  // Background spin of the sea: -1, or 0 when classified through the spin shift.
  Spin background = Spin::Minus;
  // Present for R and all R+ labels.
  std::optional<Site> anchor;  // lower-left cell of the rectangle
  int width = 0;
  int height = 0;
  std::optional<Site> extra;  // the spin outside the rectangle (R+ labels)
  std::optional<Protuberance> protuberance;  // attached labels only
};

/// w x hgt rectangle of `inner` spins with lower-left cell at anchor in a sea
/// of `outer`, optionally with one attached inner spin. Requires L >= 5 and
/// w, hgt <= L - 2.
SpinConfiguration make_rectangle(const ModelParams& p, Site anchor, int w, int hgt, Spin inner, Spin outer,
                                 std::optional<Protuberance> protuberance = std::nullopt);

/// Offsets u_1, u_2, ... of the spiral growth path (column, row), 1-based.
std::vector<std::pair<int, int>> spiral_offsets(int n0);

/// 0-spins on x + {u_1, ..., u_k} in a -1 sea, 1 <= k <= n0(n0+1)+1.
SpinConfiguration make_spiral(const ModelParams& p, Site x, int k);

DropletClass classify(const SpinConfiguration& sigma, const ModelParams& p);

/// Raises every spin by one (-1 -> 0, 0 -> +1); requires no +1 spin.
SpinConfiguration spin_shift_up(const SpinConfiguration& sigma);
/// Lowers every spin by one (0 -> -1, +1 -> 0); requires no -1 spin.
SpinConfiguration spin_shift_down(const SpinConfiguration& sigma);

/// Classification relative to a 0 sea with +1 droplets, through the spin
/// shift. Configurations containing a -1 spin get Other.
DropletClass classify_zero_background(const SpinConfiguration& sigma, const ModelParams& p);

/// {N <= n0(n0+1)} union R+.
bool in_valley_minus(const SpinConfiguration& sigma, const ModelParams& p);
/// (B \ R) union R+, with B = {N = n0(n0+1)}.
bool boundary_Bplus(const SpinConfiguration& sigma, const ModelParams& p);

bool is_stable(const SpinConfiguration& sigma, const ModelParams& p);

struct Scale {
  std::string name;
  double log_value;
  double value;
};

struct RegimeReport {
  int side = 0;
  double field = 0.0;
  double beta = 0.0;
  int n = 0;
  // Growth conditions on the torus; "satisfied" means value < 0.1.
  Scale torus_entropy;    // |L| e^{-2b}
  Scale growth_drift;     // |L|^{1/2} (e^{-[(n0+1)h-2]b} + e^{-hb})
  Scale growth_sweep;     // |L|^2 e^{-(2-h)b}
  Scale epsilon;          // |L| e^{-2b} + e^{-hb}
  Scale delta;            // growth_drift + growth_sweep
  Scale delta1;           // e^{-hb} + |L|^{1/2} e^{-(2-h)b} + |L| e^{-(4-h)b}
  Scale delta2;           // |L| e^{-[4-n0 h]b} + e^{-hb}
  Scale delta3;           // e^{-[(n0+1)h-2]b} + |L|^{1/2} e^{-(2-h)b} + |L| e^{-2b}
  Scale delta4;           // |L|^{3/2} e^{-(4-h)b} + |L| e^{-(2-h)b}
  Scale delta4_prime;     // |L| e^{-(4-h)b} + |L|^{1/2} e^{-(2-h)b}
  Scale delta5;           // e^{-[(n0+1)h-2]b} + e^{-hb} + |L|^{3/2} e^{-(2-h)b}
  Scale kappa;            // e^{-hb} + n e^{-(2-h)b} + |L| e^{-(4-h)b}

  bool torus_entropy_ok() const { return torus_entropy.value < 0.1; }
  bool growth_drift_ok() const { return growth_drift.value < 0.1; }
  bool growth_sweep_ok() const { return growth_sweep.value < 0.1; }

  std::vector<const Scale*> entries() const;
};

RegimeReport regime_report(const ModelParams& p, int n = 1);

}  // namespace bclab
