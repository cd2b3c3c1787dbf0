#include "bclab/droplet.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace bclab {

int critical_side(double h) {
  if (!(h > 0.0 && h < 2.0)) throw std::invalid_argument("field h must lie in (0, 2)");
  const double ratio = 2.0 / h;
  for (int k = 1; k <= 10; ++k) {
    if (std::abs(h - 2.0 / k) < 1e-9) throw std::invalid_argument("2/h must not be an integer");
  }
  if (std::abs(ratio - std::round(ratio)) < 1e-9) throw std::invalid_argument("2/h must not be an integer");
  return static_cast<int>(std::floor(ratio));
}

CriticalEnergy gamma_c(const ModelParams& p) {
  if (!p.theorem_regime()) throw std::invalid_argument("critical energy requires h < 1");
  const int n0 = p.critical_side();
  const double h = p.field();
  const double lambda = p.sites();
  const double rel = 4.0 * (n0 + 1) - h * (n0 * (n0 + 1) + 1);
  return {4.0 * (n0 + 1) - h * (n0 * (n0 + 1) + 1 - lambda), rel};
}

const char* token(DropletLabel label) {
  switch (label) {
    case DropletLabel::MinusOne: return "M-1";
    case DropletLabel::Zero: return "M0";
    case DropletLabel::PlusOne: return "M+1";
    case DropletLabel::R: return "R";
    case DropletLabel::RplusNonAttached: return "Rplus";
    case DropletLabel::Ra_lc: return "Ra_lc";
    case DropletLabel::Ra_li: return "Ra_li";
    case DropletLabel::Ra_s: return "Ra_s";
    case DropletLabel::B_minus_R: return "B";
    case DropletLabel::Other: return "Other";
  }
  return "Other";
}

DropletLabel label_from_token(const std::string& tok) {
  for (auto l : {DropletLabel::MinusOne, DropletLabel::Zero, DropletLabel::PlusOne, DropletLabel::R,
                 DropletLabel::RplusNonAttached, DropletLabel::Ra_lc, DropletLabel::Ra_li, DropletLabel::Ra_s,
                 DropletLabel::B_minus_R, DropletLabel::Other}) {
    if (tok == token(l)) return l;
  }
  throw std::invalid_argument("unknown droplet token '" + tok + "'");
}

namespace {

Site protuberance_site(const TorusLattice& lat, Site anchor, int w, int hgt, Protuberance pr) {
  const int c = lat.col(anchor);
  const int r = lat.row(anchor);
  const int len = (pr.side == RectSide::Left || pr.side == RectSide::Right) ? hgt : w;
  if (pr.offset < 0 || pr.offset >= len) throw std::invalid_argument("protuberance offset outside the side");
  switch (pr.side) {
    case RectSide::Left: return lat.site(c - 1, r + pr.offset);
    case RectSide::Right: return lat.site(c + w, r + pr.offset);
    case RectSide::Bottom: return lat.site(c + pr.offset, r - 1);
    case RectSide::Top: return lat.site(c + pr.offset, r + hgt);
  }
  throw std::logic_error("bad side");
}

// Offset of v from the anchor column/row, reduced to [0, L).
int forward(int v, int origin, int L) { return ((v - origin) % L + L) % L; }

bool rectangle_filled(const SpinConfiguration& sigma, const TorusLattice& lat, Site anchor, int w, int hgt, Spin s) {
  const int c = lat.col(anchor);
  const int r = lat.row(anchor);
  for (int j = 0; j < hgt; ++j) {
    for (int i = 0; i < w; ++i) {
      if (sigma[lat.site(c + i, r + j)] != s) return false;
    }
  }
  return true;
}

bool inside_rectangle(const TorusLattice& lat, Site anchor, int w, int hgt, Site x) {
  const int L = lat.side();
  return forward(lat.col(x), lat.col(anchor), L) < w && forward(lat.row(x), lat.row(anchor), L) < hgt;
}

std::optional<Protuberance> attachment(const TorusLattice& lat, Site anchor, int w, int hgt, Site x) {
  const int L = lat.side();
  const int dc = forward(lat.col(x), lat.col(anchor), L);
  const int dr = forward(lat.row(x), lat.row(anchor), L);
  if (dc == L - 1 && dr < hgt) return Protuberance{RectSide::Left, dr};
  if (dc == w && dr < hgt) return Protuberance{RectSide::Right, dr};
  if (dr == L - 1 && dc < w) return Protuberance{RectSide::Bottom, dc};
  if (dr == hgt && dc < w) return Protuberance{RectSide::Top, dc};
  return std::nullopt;
}

struct RectangleMatch {
  Site anchor;
  int w;
  int hgt;
};

// Rectangles of 0-spins with sides {n0, n0+1} whose cells are all in the
// support; the support has at most n0(n0+1)+1 sites here.
std::vector<RectangleMatch> zero_rectangles(const SpinConfiguration& sigma, const ModelParams& p,
                                            const std::vector<Site>& support) {
  std::vector<RectangleMatch> out;
  const int n0 = p.critical_side();
  const auto& lat = p.lattice();
  if (n0 + 1 > lat.side() - 2) return out;
  const std::pair<int, int> shapes[2] = {{n0, n0 + 1}, {n0 + 1, n0}};
  for (Site a : support) {
    if (sigma[a] != Spin::Zero) continue;
    for (auto [w, hgt] : shapes) {
      if (rectangle_filled(sigma, lat, a, w, hgt, Spin::Zero)) out.push_back({a, w, hgt});
    }
  }
  return out;
}

}  // namespace

SpinConfiguration make_rectangle(const ModelParams& p, Site anchor, int w, int hgt, Spin inner, Spin outer,
                                 std::optional<Protuberance> protuberance) {
  const auto& lat = p.lattice();
  if (lat.side() < 5) throw std::invalid_argument("droplet constructors need L >= 5");
  if (!lat.valid(anchor)) throw std::out_of_range("anchor outside lattice");
  if (w < 1 || hgt < 1 || w > lat.side() - 2 || hgt > lat.side() - 2)
    throw std::invalid_argument("rectangle does not fit on the torus without wrapping");
  SpinConfiguration sigma = SpinConfiguration::uniform(lat, outer);
  const int c = lat.col(anchor);
  const int r = lat.row(anchor);
  for (int j = 0; j < hgt; ++j) {
    for (int i = 0; i < w; ++i) sigma.set(lat.site(c + i, r + j), inner);
  }
  if (protuberance) sigma.set(protuberance_site(lat, anchor, w, hgt, *protuberance), inner);
  sigma.set_cached_bonds(bond_sum(sigma, lat));
  return sigma;
}

std::vector<std::pair<int, int>> spiral_offsets(int n0) {
  if (n0 < 1) throw std::invalid_argument("critical side must be positive");
  std::vector<std::pair<int, int>> u;
  u.emplace_back(1, 1);
  for (int s = 2; s <= n0; ++s) {
    for (int a = 1; a < s; ++a) u.emplace_back(a, s);
    for (int b = s; b >= 1; --b) u.emplace_back(s, b);
  }
  for (int a = 1; a <= n0; ++a) u.emplace_back(a, n0 + 1);
  u.emplace_back(1, n0 + 2);
  return u;
}

SpinConfiguration make_spiral(const ModelParams& p, Site x, int k) {
  const int n0 = p.critical_side();
  const auto& lat = p.lattice();
  if (lat.side() < 5) throw std::invalid_argument("droplet constructors need L >= 5");
  if (!lat.valid(x)) throw std::out_of_range("spiral origin outside lattice");
  if (k < 1 || k > n0 * (n0 + 1) + 1) throw std::invalid_argument("spiral index out of range");
  if (n0 + 2 > lat.side()) throw std::invalid_argument("spiral does not fit on the torus");
  const auto u = spiral_offsets(n0);
  SpinConfiguration sigma = SpinConfiguration::uniform(lat, Spin::Minus);
  for (int i = 0; i < k; ++i) {
    sigma.set(lat.site(lat.col(x) + u[static_cast<std::size_t>(i)].first,
                       lat.row(x) + u[static_cast<std::size_t>(i)].second),
              Spin::Zero);
  }
  sigma.set_cached_bonds(bond_sum(sigma, lat));
  return sigma;
}

DropletClass classify(const SpinConfiguration& sigma, const ModelParams& p) {
  if (sigma.size() != p.sites()) throw std::invalid_argument("configuration size does not match lattice");
  DropletClass out;
  if (sigma.is_uniform(Spin::Minus)) return out.label = DropletLabel::MinusOne, out;
  if (sigma.is_uniform(Spin::Zero)) return out.label = DropletLabel::Zero, out;
  if (sigma.is_uniform(Spin::Plus)) return out.label = DropletLabel::PlusOne, out;

  const int area = p.critical_area();
  const int n = sigma.non_minus();
  if (n != area && n != area + 1) return out;

  const auto& lat = p.lattice();
  std::vector<Site> support;
  support.reserve(static_cast<std::size_t>(n));
  for (Site x = 0; x < sigma.size(); ++x) {
    if (sigma[x] != Spin::Minus) support.push_back(x);
  }
  const auto rects = zero_rectangles(sigma, p, support);

  if (n == area) {
    out.label = DropletLabel::B_minus_R;
    if (!rects.empty()) {
      out.label = DropletLabel::R;
      out.anchor = rects.front().anchor;
      out.width = rects.front().w;
      out.height = rects.front().hgt;
    }
    return out;
  }

  // n == area + 1: R+ needs a full 0-rectangle and exactly one other site.
  for (const auto& m : rects) {
    Site extra = -1;
    for (Site x : support) {
      if (!inside_rectangle(lat, m.anchor, m.w, m.hgt, x)) {
        extra = x;
        break;
      }
    }
    out.anchor = m.anchor;
    out.width = m.w;
    out.height = m.hgt;
    out.extra = extra;
    const auto att = sigma[extra] == Spin::Zero ? attachment(lat, m.anchor, m.w, m.hgt, extra) : std::nullopt;
    if (!att) {
      out.label = DropletLabel::RplusNonAttached;
      return out;
    }
    out.protuberance = att;
    const bool vertical_side = att->side == RectSide::Left || att->side == RectSide::Right;
    const int len = vertical_side ? m.hgt : m.w;
    const int other = vertical_side ? m.w : m.hgt;
    if (len < other) {
      out.label = DropletLabel::Ra_s;
    } else if (att->offset == 0 || att->offset == len - 1) {
      out.label = DropletLabel::Ra_lc;
    } else {
      out.label = DropletLabel::Ra_li;
    }
    return out;
  }
  out = DropletClass{};
  return out;
}

SpinConfiguration spin_shift_up(const SpinConfiguration& sigma) {
  if (sigma.count(Spin::Plus) != 0) throw std::invalid_argument("spin shift up needs a configuration without +1");
  SpinConfiguration out = sigma;
  for (Site x = 0; x < sigma.size(); ++x) out.set(x, sigma[x] == Spin::Minus ? Spin::Zero : Spin::Plus);
  if (sigma.cached_bonds()) out.set_cached_bonds(*sigma.cached_bonds());
  return out;
}

SpinConfiguration spin_shift_down(const SpinConfiguration& sigma) {
  if (sigma.count(Spin::Minus) != 0)
    throw std::invalid_argument("spin shift down needs a configuration without -1");
  SpinConfiguration out = sigma;
  for (Site x = 0; x < sigma.size(); ++x) out.set(x, sigma[x] == Spin::Zero ? Spin::Minus : Spin::Zero);
  if (sigma.cached_bonds()) out.set_cached_bonds(*sigma.cached_bonds());
  return out;
}

DropletClass classify_zero_background(const SpinConfiguration& sigma, const ModelParams& p) {
  if (sigma.count(Spin::Minus) != 0) return DropletClass{};
  DropletClass c = classify(spin_shift_down(sigma), p);
  c.background = Spin::Zero;
  if (c.label == DropletLabel::MinusOne) c.label = DropletLabel::Zero;
  else if (c.label == DropletLabel::Zero) c.label = DropletLabel::PlusOne;
  return c;
}

bool in_valley_minus(const SpinConfiguration& sigma, const ModelParams& p) {
  const int n = sigma.non_minus();
  if (n <= p.critical_area()) return true;
  if (n != p.critical_area() + 1) return false;
  return is_rplus(classify(sigma, p).label);
}

bool boundary_Bplus(const SpinConfiguration& sigma, const ModelParams& p) {
  const int n = sigma.non_minus();
  if (n != p.critical_area() && n != p.critical_area() + 1) return false;
  const DropletLabel l = classify(sigma, p).label;
  return l == DropletLabel::B_minus_R || is_rplus(l);
}

bool is_stable(const SpinConfiguration& sigma, const ModelParams& p) {
  for (Site x = 0; x < p.sites(); ++x) {
    for (Direction d : {Direction::Up, Direction::Down}) {
      if (!(delta_energy(sigma, x, d, p) > 0.0)) return false;
    }
  }
  return true;
}

namespace {

double log_sum(std::initializer_list<double> logs) {
  double m = -INFINITY;
  for (double v : logs) m = std::max(m, v);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double v : logs) s += std::exp(v - m);
  return m + std::log(s);
}

Scale make_scale(std::string name, double log_value) { return {std::move(name), log_value, std::exp(log_value)}; }

}  // namespace

std::vector<const Scale*> RegimeReport::entries() const {
  return {&torus_entropy, &growth_drift, &growth_sweep, &epsilon, &delta,  &delta1,
          &delta2,        &delta3,       &delta4,       &delta4_prime, &delta5, &kappa};
}

RegimeReport regime_report(const ModelParams& p, int n) {
  if (n < 1) throw std::invalid_argument("kappa index n must be positive");
  const double b = p.beta();
  const double h = p.field();
  const int n0 = p.critical_side();
  const double lv = std::log(static_cast<double>(p.sites()));

  const double e_h = -h * b;                          // e^{-hb}
  const double e_2mh = -(2.0 - h) * b;                // e^{-(2-h)b}
  const double e_4mh = -(4.0 - h) * b;                // e^{-(4-h)b}
  const double e_2 = -2.0 * b;                        // e^{-2b}
  const double e_super = -((n0 + 1) * h - 2.0) * b;   // e^{-[(n0+1)h-2]b}
  const double e_sub = -(4.0 - n0 * h) * b;           // e^{-[4-n0 h]b}

  RegimeReport r;
  r.side = p.lattice().side();
  r.field = h;
  r.beta = b;
  r.n = n;
  r.torus_entropy = make_scale("torus_entropy", lv + e_2);
  r.growth_drift = make_scale("growth_drift", 0.5 * lv + log_sum({e_super, e_h}));
  r.growth_sweep = make_scale("growth_sweep", 2.0 * lv + e_2mh);
  r.epsilon = make_scale("epsilon", log_sum({lv + e_2, e_h}));
  r.delta = make_scale("delta", log_sum({r.growth_drift.log_value, r.growth_sweep.log_value}));
  r.delta1 = make_scale("delta1", log_sum({e_h, 0.5 * lv + e_2mh, lv + e_4mh}));
  r.delta2 = make_scale("delta2", log_sum({lv + e_sub, e_h}));
  r.delta3 = make_scale("delta3", log_sum({e_super, 0.5 * lv + e_2mh, lv + e_2}));
  r.delta4 = make_scale("delta4", log_sum({1.5 * lv + e_4mh, lv + e_2mh}));
  r.delta4_prime = make_scale("delta4_prime", log_sum({lv + e_4mh, 0.5 * lv + e_2mh}));
  r.delta5 = make_scale("delta5", log_sum({e_super, e_h, 1.5 * lv + e_2mh}));
  r.kappa = make_scale("kappa", log_sum({e_h, std::log(static_cast<double>(n)) + e_2mh, lv + e_4mh}));
  return r;
}

}  // namespace bclab
