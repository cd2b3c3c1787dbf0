#include "bclab/lattice.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <stdexcept>

#include "bclab/textio.hpp"

namespace bclab {

namespace {

int wrap(int v, int n) {
  const int r = v % n;
  return r < 0 ? r + n : r;
}

}  // namespace

TorusLattice::TorusLattice(int side) : side_(side) {
  if (side < 2) throw std::invalid_argument("torus side must be at least 2");
  nbr_.resize(static_cast<std::size_t>(size()));
  for (Site x = 0; x < size(); ++x) {
    const int c = col(x);
    const int r = row(x);
    nbr_[static_cast<std::size_t>(x)] = {site(c + 1, r), site(c - 1, r), site(c, r + 1), site(c, r - 1)};
  }
}

Site TorusLattice::site(int col, int row) const { return wrap(row, side_) * side_ + wrap(col, side_); }

Site TorusLattice::translate(Site x, int dcol, int drow) const { return site(col(x) + dcol, row(x) + drow); }

std::vector<std::pair<Site, Site>> TorusLattice::bonds() const {
  std::vector<std::pair<Site, Site>> out;
  out.reserve(static_cast<std::size_t>(2 * size()));
  for (Site x = 0; x < size(); ++x) {
    out.emplace_back(x, neighbors(x)[Right]);
    out.emplace_back(x, neighbors(x)[Up]);
  }
  return out;
}

ModelParams::ModelParams(double field, double beta, int side) : field_(field), beta_(beta), lattice_(side) {
  if (!(field > 0.0 && field < 2.0)) throw std::invalid_argument("field h must lie in (0, 2)");
  if (!(beta > 0.0) || !std::isfinite(beta)) throw std::invalid_argument("beta must be positive");
  for (int k = 1; k <= 10; ++k) {
    if (std::abs(field - 2.0 / k) < 1e-9) throw std::invalid_argument("2/h must not be an integer");
  }
  const double ratio = 2.0 / field;
  if (std::abs(ratio - std::round(ratio)) < 1e-9) throw std::invalid_argument("2/h must not be an integer");
  critical_side_ = static_cast<int>(std::floor(ratio));
}

SpinConfiguration::SpinConfiguration(int sites, Spin fill) : sites_(sites) {
  if (sites <= 0) throw std::invalid_argument("configuration needs at least one site");
  words_.assign((static_cast<std::size_t>(sites) + 31) / 32, 0);
  for (Site x = 0; x < sites; ++x) raw_set(x, fill);
  counts_ = {0, 0, 0};
  counts_[static_cast<std::size_t>(code(fill))] = sites;
  // Uniform configurations have no interfaces.
  bonds_ = 0;
}

void SpinConfiguration::raw_set(Site x, Spin s) {
  auto& w = words_[static_cast<std::size_t>(x) >> 5];
  const int shift = (x & 31) * 2;
  w = (w & ~(std::uint64_t{3} << shift)) | (static_cast<std::uint64_t>(code(s)) << shift);
}

void SpinConfiguration::set(Site x, Spin s) {
  if (x < 0 || x >= sites_) throw std::out_of_range("site outside configuration");
  const Spin old = (*this)[x];
  --counts_[static_cast<std::size_t>(code(old))];
  ++counts_[static_cast<std::size_t>(code(s))];
  raw_set(x, s);
  bonds_.reset();
}

void SpinConfiguration::flip_with_bond_delta(Site x, Spin s, int delta) {
  const Spin old = (*this)[x];
  --counts_[static_cast<std::size_t>(code(old))];
  ++counts_[static_cast<std::size_t>(code(s))];
  raw_set(x, s);
  if (bonds_) *bonds_ += delta;
}

std::optional<double> SpinConfiguration::cached_energy(double field) const {
  if (!bonds_) return std::nullopt;
  return static_cast<double>(*bonds_) - field * static_cast<double>(magnetization());
}

std::size_t SpinConfigurationHash::operator()(const SpinConfiguration& s) const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto w : s.words()) {
    h ^= w + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  }
  return static_cast<std::size_t>(h);
}

long bond_sum(const SpinConfiguration& sigma, const TorusLattice& lattice) {
  if (sigma.size() != lattice.size()) throw std::invalid_argument("configuration size does not match lattice");
  long total = 0;
  for (Site x = 0; x < lattice.size(); ++x) {
    const int s = value(sigma[x]);
    const auto& nb = lattice.neighbors(x);
    const int dr = value(sigma[nb[TorusLattice::Right]]) - s;
    const int du = value(sigma[nb[TorusLattice::Up]]) - s;
    total += dr * dr + du * du;
  }
  return total;
}

double energy(const SpinConfiguration& sigma, const ModelParams& p) {
  const long b = bond_sum(sigma, p.lattice());
  return static_cast<double>(b) - p.field() * static_cast<double>(sigma.magnetization());
}

int delta_bonds(const SpinConfiguration& sigma, Site x, Spin to, const TorusLattice& lattice) {
  const int before = value(sigma[x]);
  const int after = value(to);
  int delta = 0;
  for (Site y : lattice.neighbors(x)) {
    const int n = value(sigma[y]);
    delta += (after - n) * (after - n) - (before - n) * (before - n);
  }
  return delta;
}

double delta_energy(const SpinConfiguration& sigma, Site x, Direction dir, const ModelParams& p) {
  if (!p.lattice().valid(x)) throw std::out_of_range("site outside lattice");
  const Spin from = sigma[x];
  const Spin to = flipped(from, dir);
  const int db = delta_bonds(sigma, x, to, p.lattice());
  return static_cast<double>(db) - p.field() * static_cast<double>(value(to) - value(from));
}

void flip_in_place(SpinConfiguration& sigma, Site x, Direction dir, const TorusLattice& lattice) {
  if (!sigma.cached_bonds()) sigma.set_cached_bonds(bond_sum(sigma, lattice));
  const Spin to = flipped(sigma[x], dir);
  sigma.flip_with_bond_delta(x, to, delta_bonds(sigma, x, to, lattice));
}

SpinConfiguration apply_flip(const SpinConfiguration& sigma, Site x, Direction dir, const ModelParams& p) {
  if (!p.lattice().valid(x)) throw std::out_of_range("site outside lattice");
  if (sigma.size() != p.sites()) throw std::invalid_argument("configuration size does not match lattice");
  SpinConfiguration out = sigma;
  flip_in_place(out, x, dir, p.lattice());
  return out;
}

SiteStatistics site_statistics(const SpinConfiguration& sigma) {
  SiteStatistics st;
  st.non_minus = sigma.non_minus();
  st.plus = sigma.count(Spin::Plus);
  st.magnetization = sigma.magnetization();
  st.support.reserve(static_cast<std::size_t>(st.non_minus));
  for (Site x = 0; x < sigma.size(); ++x) {
    if (sigma[x] != Spin::Minus) st.support.push_back(x);
  }
  return st;
}

long interface_count(const SpinConfiguration& sigma, Spin a, Spin b, const TorusLattice& lattice) {
  if (!(value(a) < value(b))) throw std::invalid_argument("interface_count requires a < b");
  long n = 0;
  for (const auto& [x, y] : lattice.bonds()) {
    const Spin sx = sigma[x];
    const Spin sy = sigma[y];
    if ((sx == a && sy == b) || (sx == b && sy == a)) ++n;
  }
  return n;
}

std::vector<std::vector<Site>> connected_components(const SpinConfiguration& sigma,
                                                    const TorusLattice& lattice) {
  std::vector<std::vector<Site>> out;
  std::vector<char> seen(static_cast<std::size_t>(lattice.size()), 0);
  std::vector<Site> stack;
  for (Site x = 0; x < lattice.size(); ++x) {
    if (seen[static_cast<std::size_t>(x)] || sigma[x] == Spin::Minus) continue;
    std::vector<Site> comp;
    stack.push_back(x);
    seen[static_cast<std::size_t>(x)] = 1;
    while (!stack.empty()) {
      const Site v = stack.back();
      stack.pop_back();
      comp.push_back(v);
      for (Site y : lattice.neighbors(v)) {
        if (!seen[static_cast<std::size_t>(y)] && sigma[y] != Spin::Minus) {
          seen[static_cast<std::size_t>(y)] = 1;
          stack.push_back(y);
        }
      }
    }
    std::sort(comp.begin(), comp.end());
    out.push_back(std::move(comp));
  }
  return out;
}

SpinConfiguration flatten(const SpinConfiguration& sigma) {
  SpinConfiguration out = sigma;
  for (Site x = 0; x < sigma.size(); ++x) {
    if (sigma[x] == Spin::Plus) out.set(x, Spin::Zero);
  }
  return out;
}

double log_relative_gibbs_weight(const SpinConfiguration& sigma, const SpinConfiguration& ref,
                                 const ModelParams& p) {
  return -p.beta() * (energy(sigma, p) - energy(ref, p));
}

double relative_gibbs_weight(const SpinConfiguration& sigma, const SpinConfiguration& ref,
                             const ModelParams& p) {
  return std::exp(log_relative_gibbs_weight(sigma, ref, p));
}

std::string encode_rle(const SpinConfiguration& sigma) {
  static constexpr char symbols[3] = {'m', 'z', 'p'};
  std::string out;
  Site x = 0;
  while (x < sigma.size()) {
    const Spin s = sigma[x];
    Site y = x;
    while (y < sigma.size() && sigma[y] == s) ++y;
    out += std::to_string(y - x);
    out += symbols[code(s)];
    x = y;
  }
  return out;
}

SpinConfiguration decode_rle(std::string_view rle, int sites) {
  SpinConfiguration out(sites, Spin::Minus);
  Site pos = 0;
  std::size_t i = 0;
  while (i < rle.size()) {
    long run = 1;
    if (std::isdigit(static_cast<unsigned char>(rle[i]))) {
      const auto* first = rle.data() + i;
      const auto res = std::from_chars(first, rle.data() + rle.size(), run);
      if (res.ec != std::errc{} || run <= 0) throw std::invalid_argument("bad run length in snapshot");
      i = static_cast<std::size_t>(res.ptr - rle.data());
    }
    if (i >= rle.size()) throw std::invalid_argument("run length without symbol in snapshot");
    Spin s;
    switch (rle[i]) {
      case 'm': s = Spin::Minus; break;
      case 'z': s = Spin::Zero; break;
      case 'p': s = Spin::Plus; break;
      default: throw std::invalid_argument(std::string("unknown spin symbol '") + rle[i] + "'");
    }
    ++i;
    if (pos + run > sites) throw std::invalid_argument("snapshot longer than lattice");
    for (long k = 0; k < run; ++k) out.set(pos++, s);
  }
  if (pos != sites) throw std::invalid_argument("snapshot shorter than lattice");
  return out;
}

std::string to_snapshot_line(const SpinConfiguration& sigma, int side, double field) {
  if (sigma.size() != side * side) throw std::invalid_argument("configuration size does not match side");
  return std::to_string(side) + " " + format_double(field) + " " + encode_rle(sigma);
}

Snapshot parse_snapshot_line(std::string_view line) {
  Snapshot snap;
  const auto sp1 = line.find(' ');
  const auto sp2 = line.find(' ', sp1 == std::string_view::npos ? sp1 : sp1 + 1);
  if (sp1 == std::string_view::npos || sp2 == std::string_view::npos)
    throw std::invalid_argument("snapshot line must be 'L h RLE'");
  const auto side_tok = line.substr(0, sp1);
  if (std::from_chars(side_tok.data(), side_tok.data() + side_tok.size(), snap.side).ec != std::errc{} ||
      snap.side < 2)
    throw std::invalid_argument("bad side in snapshot");
  snap.field = parse_double(line.substr(sp1 + 1, sp2 - sp1 - 1));
  snap.spins = decode_rle(line.substr(sp2 + 1), snap.side * snap.side);
  return snap;
}

}  // namespace bclab
