#include "bclab/potential.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <deque>
#include <istream>
#include <limits>
#include <memory>
#include <numeric>
#include <ostream>
#include <sstream>

#include "bclab/droplet.hpp"
#include "bclab/kmc.hpp"
#include "bclab/textio.hpp"

namespace bclab {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kReversibilityTolerance = 1e-10;

double log_sum_exp(const std::vector<double>& xs) {
  double m = -kInf;
  for (double x : xs) m = std::max(m, x);
  if (m == -kInf) return -kInf;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

std::vector<char> membership(std::size_t n, const StateSet& set, const char* what) {
  std::vector<char> mask(n, 0);
  for (std::size_t x : set) {
    if (x >= n) throw std::out_of_range(std::string(what) + " contains an index outside the chain");
    mask[x] = 1;
  }
  return mask;
}

void require_disjoint_nonempty(const std::vector<char>& a, const std::vector<char>& b, const StateSet& A,
                               const StateSet& B) {
  if (A.empty() || B.empty()) throw std::invalid_argument("sets must be nonempty");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] && b[i]) throw std::invalid_argument("sets must be disjoint");
  }
}

}  // namespace

std::optional<std::size_t> EnumeratedChain::find(const std::string& key) const {
  const auto it = index_.find(key);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

double EnumeratedChain::holding_rate(std::size_t i) const {
  double s = 0.0;
  for (std::size_t e = row_begin(i); e < row_end(i); ++e) s += rates_[e];
  return s;
}

std::optional<std::size_t> EnumeratedChain::edge(std::size_t i, std::size_t j) const {
  const auto first = targets_.begin() + static_cast<std::ptrdiff_t>(offsets_[i]);
  const auto last = targets_.begin() + static_cast<std::ptrdiff_t>(offsets_[i + 1]);
  const auto it = std::lower_bound(first, last, static_cast<std::uint32_t>(j));
  if (it == last || *it != j) return std::nullopt;
  return static_cast<std::size_t>(it - targets_.begin());
}

EnumeratedChain assemble_chain(std::vector<std::string> keys, std::vector<double> log_mu,
                               std::vector<std::size_t> offsets, std::vector<std::uint32_t> targets,
                               std::vector<double> rates, bool metropolis) {
  const std::size_t n = log_mu.size();
  if (n == 0) throw std::invalid_argument("chain needs at least one state");
  if (keys.size() != n || offsets.size() != n + 1 || offsets.front() != 0 || offsets.back() != targets.size() ||
      rates.size() != targets.size()) {
    throw std::invalid_argument("inconsistent CSR arrays");
  }
  EnumeratedChain c;
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(log_mu[i])) throw std::invalid_argument("log weights must be finite");
    if (!c.index_.emplace(keys[i], i).second) throw std::invalid_argument("duplicate state key: " + keys[i]);
  }
  // Sort each row by target.
  std::vector<std::pair<std::uint32_t, double>> row;
  for (std::size_t i = 0; i < n; ++i) {
    if (offsets[i + 1] < offsets[i]) throw std::invalid_argument("CSR offsets must be nondecreasing");
    row.clear();
    for (std::size_t e = offsets[i]; e < offsets[i + 1]; ++e) {
      if (targets[e] >= n) throw std::invalid_argument("edge target outside the chain");
      if (targets[e] == i) throw std::invalid_argument("self loops are not allowed");
      if (!(rates[e] > 0.0) || !std::isfinite(rates[e])) throw std::invalid_argument("rates must be positive");
      row.emplace_back(targets[e], rates[e]);
    }
    std::sort(row.begin(), row.end());
    for (std::size_t k = 0; k < row.size(); ++k) {
      if (k > 0 && row[k].first == row[k - 1].first) throw std::invalid_argument("duplicate edge");
      targets[offsets[i] + k] = row[k].first;
      rates[offsets[i] + k] = row[k].second;
    }
  }
  c.keys_ = std::move(keys);
  c.log_mu_ = std::move(log_mu);
  c.offsets_ = std::move(offsets);
  c.targets_ = std::move(targets);
  c.rates_ = std::move(rates);
  c.metropolis_ = metropolis;
  c.log_cond_.assign(c.targets_.size(), 0.0);

  double defect = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t e = c.row_begin(i); e < c.row_end(i); ++e) {
      const std::size_t j = c.targets_[e];
      const auto back = c.edge(j, i);
      if (!back) throw std::invalid_argument("edge " + c.keys_[i] + " -> " + c.keys_[j] + " has no reverse");
      const double fwd = c.log_mu_[i] + std::log(c.rates_[e]);
      const double rev = c.log_mu_[j] + std::log(c.rates_[*back]);
      defect = std::max(defect, std::abs(fwd - rev));
      if (metropolis) {
        c.log_cond_[e] = std::min(c.log_mu_[i], c.log_mu_[j]);
      } else {
        c.log_cond_[e] = 0.5 * (fwd + rev);
      }
    }
  }
  if (defect > kReversibilityTolerance) {
    throw std::invalid_argument("chain is not reversible (defect " + format_double(defect, 6) + ")");
  }
  c.defect_ = defect;
  return c;
}

std::size_t ChainBuilder::add_state(std::string key, double log_mu) {
  keys_.push_back(std::move(key));
  log_mu_.push_back(log_mu);
  rows_.emplace_back();
  return keys_.size() - 1;
}

void ChainBuilder::add_edge(std::size_t from, std::size_t to, double rate) {
  if (from >= rows_.size() || to >= rows_.size()) throw std::out_of_range("edge endpoint outside the chain");
  rows_[from].emplace_back(static_cast<std::uint32_t>(to), rate);
}

void ChainBuilder::add_conductance(std::size_t i, std::size_t j, double conductance) {
  if (i >= rows_.size() || j >= rows_.size()) throw std::out_of_range("edge endpoint outside the chain");
  const double lc = std::log(conductance);
  add_edge(i, j, std::exp(lc - log_mu_[i]));
  add_edge(j, i, std::exp(lc - log_mu_[j]));
}

EnumeratedChain ChainBuilder::build() const {
  std::vector<std::size_t> offsets{0};
  std::vector<std::uint32_t> targets;
  std::vector<double> rates;
  for (const auto& row : rows_) {
    for (const auto& [t, r] : row) {
      targets.push_back(t);
      rates.push_back(r);
    }
    offsets.push_back(targets.size());
  }
  return assemble_chain(keys_, log_mu_, std::move(offsets), std::move(targets), std::move(rates), metropolis_);
}

void write_chain(std::ostream& os, const EnumeratedChain& chain) {
  for (std::size_t i = 0; i < chain.size(); ++i) {
    const auto& k = chain.key(i);
    if (k.empty() || std::any_of(k.begin(), k.end(), [](char ch) { return std::isspace(static_cast<unsigned char>(ch)); })) {
      throw std::invalid_argument("state keys must be nonempty and free of whitespace");
    }
  }
  os << "STATES " << chain.size() << " EDGES " << chain.edge_count() << " REF " << chain.key(chain.reference());
  if (chain.metropolis()) os << " METROPOLIS";
  os << '\n';
  for (std::size_t i = 0; i < chain.size(); ++i) os << i << ' ' << format_double(chain.log_mu(i)) << ' ' << chain.key(i) << '\n';
  for (std::size_t i = 0; i < chain.size(); ++i) {
    for (std::size_t e = chain.row_begin(i); e < chain.row_end(i); ++e) {
      os << i << ' ' << chain.target(e) << ' ' << format_double(chain.rate(e)) << '\n';
    }
  }
}

EnumeratedChain read_chain(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("empty chain file");
  std::istringstream head(line);
  std::string w1, w2, w3, ref, flag;
  std::size_t n = 0;
  std::size_t m = 0;
  head >> w1 >> n >> w2 >> m >> w3 >> ref;
  if (!head || w1 != "STATES" || w2 != "EDGES" || w3 != "REF") throw std::runtime_error("bad chain header: " + line);
  bool metropolis = false;
  if (head >> flag) {
    if (flag != "METROPOLIS") throw std::runtime_error("bad chain header flag: " + flag);
    metropolis = true;
  }
  auto next_tokens = [&](std::size_t lineno) {
    std::string l;
    if (!std::getline(is, l)) throw std::runtime_error("chain file truncated at line " + std::to_string(lineno));
    std::vector<std::string> toks;
    std::istringstream ss(l);
    for (std::string t; ss >> t;) toks.push_back(t);
    return toks;
  };
  std::vector<std::string> keys(n);
  std::vector<double> log_mu(n);
  for (std::size_t k = 0; k < n; ++k) {
    const auto t = next_tokens(k + 2);
    if (t.size() < 2 || t.size() > 3) throw std::runtime_error("bad state line");
    const auto i = static_cast<std::size_t>(parse_integer(t[0]));
    if (i != k) throw std::runtime_error("state lines must be in index order");
    log_mu[k] = parse_double(t[1]);
    keys[k] = t.size() == 3 ? t[2] : t[0];
  }
  if (n == 0 || keys[0] != ref) throw std::runtime_error("reference key must name state 0");
  std::vector<std::vector<std::pair<std::uint32_t, double>>> rows(n);
  for (std::size_t k = 0; k < m; ++k) {
    const auto t = next_tokens(n + k + 2);
    if (t.size() != 3) throw std::runtime_error("bad edge line");
    const auto i = static_cast<std::size_t>(parse_integer(t[0]));
    const auto j = static_cast<std::size_t>(parse_integer(t[1]));
    if (i >= n || j >= n) throw std::runtime_error("edge endpoint outside the chain");
    rows[i].emplace_back(static_cast<std::uint32_t>(j), parse_double(t[2]));
  }
  std::vector<std::size_t> offsets{0};
  std::vector<std::uint32_t> targets;
  std::vector<double> rates;
  for (const auto& row : rows) {
    for (const auto& [t, r] : row) {
      targets.push_back(t);
      rates.push_back(r);
    }
    offsets.push_back(targets.size());
  }
  return assemble_chain(std::move(keys), std::move(log_mu), std::move(offsets), std::move(targets),
                        std::move(rates), metropolis);
}

ClosureOverflow::ClosureOverflow(std::size_t cap, std::size_t reached)
    : std::runtime_error("state-space closure exceeded " + std::to_string(cap) + " states"),
      cap_(cap),
      reached_(reached) {}

std::optional<std::size_t> ConfigurationChain::find(const SpinConfiguration& s) const {
  const auto it = index.find(s);
  if (it == index.end()) return std::nullopt;
  return it->second;
}

StateSet ConfigurationChain::select(const ConfigPredicate& pred) const {
  StateSet out;
  for (std::size_t i = 0; i < states.size(); ++i) {
    if (pred(states[i])) out.push_back(i);
  }
  return out;
}

ConfigurationChain enumerate_closure(const std::vector<SpinConfiguration>& seeds, const ConfigPredicate& member,
                                     const ModelParams& p, std::size_t cap) {
  if (seeds.empty()) throw std::invalid_argument("closure needs at least one seed");
  const auto& lat = p.lattice();
  ConfigurationChain cc;
  std::vector<double> energies;
  auto insert = [&](const SpinConfiguration& s) -> std::size_t {
    const auto [it, fresh] = cc.index.emplace(s, cc.states.size());
    if (fresh) {
      if (cc.states.size() >= cap) throw ClosureOverflow(cap, cc.states.size() + 1);
      cc.states.push_back(s);
      energies.push_back(*s.cached_energy(p.field()));
    }
    return it->second;
  };
  for (auto s : seeds) {
    if (s.size() != p.sites()) throw std::invalid_argument("seed size does not match lattice");
    if (!member(s)) throw std::invalid_argument("seed outside the predicate");
    s.set_cached_bonds(bond_sum(s, lat));
    insert(s);
  }

  std::vector<std::size_t> offsets{0};
  std::vector<std::uint32_t> targets;
  std::vector<double> rates;
  for (std::size_t k = 0; k < cc.states.size(); ++k) {
    SpinConfiguration cur = cc.states[k];
    for (Site x = 0; x < p.sites(); ++x) {
      for (Direction d : {Direction::Up, Direction::Down}) {
        const double r = flip_rate(cur, {x, d}, p);
        flip_in_place(cur, x, d, lat);
        if (member(cur)) {
          targets.push_back(static_cast<std::uint32_t>(insert(cur)));
          rates.push_back(r);
        }
        flip_in_place(cur, x, d == Direction::Up ? Direction::Down : Direction::Up, lat);
      }
    }
    offsets.push_back(targets.size());
  }

  std::vector<std::string> keys;
  std::vector<double> log_mu;
  keys.reserve(cc.states.size());
  log_mu.reserve(cc.states.size());
  for (std::size_t i = 0; i < cc.states.size(); ++i) {
    keys.push_back(encode_rle(cc.states[i]));
    log_mu.push_back(-p.beta() * (energies[i] - energies[0]));
  }
  cc.chain = assemble_chain(std::move(keys), std::move(log_mu), std::move(offsets), std::move(targets),
                            std::move(rates), true);
  return cc;
}

namespace {

// Site permutations of the torus symmetry group, applied to bit masks by
// byte-sized lookup tables.
struct SymmetryTables {
  int side = 0;
  int chunks = 0;
  std::vector<std::uint64_t> table;  // [g][chunk][256]
  std::size_t group = 0;

  explicit SymmetryTables(int L) : side(L) {
    const int n = L * L;
    chunks = (n + 7) / 8;
    std::vector<std::vector<int>> perms;
    for (int dihedral = 0; dihedral < 8; ++dihedral) {
      for (int tc = 0; tc < L; ++tc) {
        for (int tr = 0; tr < L; ++tr) {
          std::vector<int> perm(static_cast<std::size_t>(n));
          for (int r = 0; r < L; ++r) {
            for (int c = 0; c < L; ++c) {
              int a = c;
              int b = r;
              if (dihedral & 1) std::swap(a, b);
              if (dihedral & 2) a = L - 1 - a;
              if (dihedral & 4) b = L - 1 - b;
              a = (a + tc) % L;
              b = (b + tr) % L;
              perm[static_cast<std::size_t>(r * L + c)] = b * L + a;
            }
          }
          perms.push_back(std::move(perm));
        }
      }
    }
    group = perms.size();
    table.assign(group * static_cast<std::size_t>(chunks) * 256, 0);
    for (std::size_t g = 0; g < group; ++g) {
      for (int ch = 0; ch < chunks; ++ch) {
        for (int byte = 0; byte < 256; ++byte) {
          std::uint64_t out = 0;
          for (int bit = 0; bit < 8; ++bit) {
            const int site = ch * 8 + bit;
            if (site < n && (byte >> bit & 1)) out |= std::uint64_t{1} << perms[g][static_cast<std::size_t>(site)];
          }
          table[(g * static_cast<std::size_t>(chunks) + static_cast<std::size_t>(ch)) * 256 +
                static_cast<std::size_t>(byte)] = out;
        }
      }
    }
  }

  std::uint64_t apply(std::size_t g, std::uint64_t mask) const {
    std::uint64_t out = 0;
    const std::uint64_t* t = &table[g * static_cast<std::size_t>(chunks) * 256];
    for (int ch = 0; ch < chunks; ++ch, t += 256) out |= t[(mask >> (8 * ch)) & 0xff];
    return out;
  }

  // Canonical representative and stabilizer size.
  std::pair<std::uint64_t, std::size_t> canonical(std::uint64_t mask) const {
    std::uint64_t best = std::numeric_limits<std::uint64_t>::max();
    std::size_t stab = 0;
    for (std::size_t g = 0; g < group; ++g) {
      const std::uint64_t m = apply(g, mask);
      if (m < best) {
        best = m;
      }
      if (m == mask) ++stab;
    }
    return {best, stab};
  }
};

const SymmetryTables& tables_for(int side) {
  thread_local std::unique_ptr<SymmetryTables> cache;
  if (!cache || cache->side != side) cache = std::make_unique<SymmetryTables>(side);
  return *cache;
}

}  // namespace

std::uint64_t canonical_mask(std::uint64_t mask, int side) {
  if (side < 1 || side > 8) throw std::invalid_argument("bit-mask chains need 1 <= L <= 8");
  return tables_for(side).canonical(mask).first;
}

EnumeratedChain lumped_binary_chain(const ModelParams& p, std::size_t cap) {
  const int L = p.lattice().side();
  if (L < 2 || L > 8) throw std::invalid_argument("lumped binary chain needs 2 <= L <= 8");
  const auto& sym = tables_for(L);
  const int n = L * L;
  const double h = p.field();
  const double beta = p.beta();
  std::vector<std::array<int, 4>> nbr(static_cast<std::size_t>(n));
  for (int x = 0; x < n; ++x) nbr[static_cast<std::size_t>(x)] = p.lattice().neighbors(x);

  std::unordered_map<std::uint64_t, std::uint32_t> index;
  std::vector<std::uint64_t> reps;
  std::vector<double> log_mu;
  auto insert = [&](std::uint64_t canon, std::size_t stab) -> std::uint32_t {
    const auto [it, fresh] = index.emplace(canon, static_cast<std::uint32_t>(reps.size()));
    if (fresh) {
      if (reps.size() >= cap) throw ClosureOverflow(cap, reps.size() + 1);
      reps.push_back(canon);
      int bonds = 0;
      for (int x = 0; x < n; ++x) {
        const int bx = static_cast<int>(canon >> x & 1);
        const auto& nb = nbr[static_cast<std::size_t>(x)];
        bonds += bx != static_cast<int>(canon >> nb[0] & 1);  // right
        bonds += bx != static_cast<int>(canon >> nb[2] & 1);  // up
      }
      const int k = std::popcount(canon);
      const double orbit = static_cast<double>(sym.group) / static_cast<double>(stab);
      log_mu.push_back(std::log(orbit) - beta * (bonds - h * k));
    }
    return it->second;
  };
  insert(0, sym.group);

  std::vector<std::size_t> offsets{0};
  std::vector<std::uint32_t> targets;
  std::vector<double> rates;
  std::vector<std::pair<std::uint32_t, double>> row;
  for (std::size_t k = 0; k < reps.size(); ++k) {
    const std::uint64_t m = reps[k];
    row.clear();
    for (int x = 0; x < n; ++x) {
      const int bx = static_cast<int>(m >> x & 1);
      int differ = 0;
      for (int y : nbr[static_cast<std::size_t>(x)]) differ += bx != static_cast<int>(m >> y & 1);
      // Adding a 0 lowers the magnetization term by h; removing raises it.
      const double dh = (4 - 2 * differ) + (bx ? h : -h);
      const double r = dh <= 0.0 ? 1.0 : std::exp(-beta * dh);
      const auto [canon, stab] = sym.canonical(m ^ (std::uint64_t{1} << x));
      row.emplace_back(insert(canon, stab), r);
    }
    std::sort(row.begin(), row.end());
    for (std::size_t a = 0; a < row.size();) {
      std::size_t b = a;
      double total = 0.0;
      while (b < row.size() && row[b].first == row[a].first) total += row[b++].second;
      targets.push_back(row[a].first);
      rates.push_back(total);
      a = b;
    }
    offsets.push_back(targets.size());
  }
  std::vector<std::string> keys;
  keys.reserve(reps.size());
  for (auto r : reps) keys.push_back(std::to_string(r));
  return assemble_chain(std::move(keys), std::move(log_mu), std::move(offsets), std::move(targets),
                        std::move(rates), false);
}

namespace {

// Solves u(x) - sum_y p(x,y) u(y) = q(x) on the non-fixed states, with u
// given on fixed states and p the jump matrix. Non-fixed states with no path
// to a fixed state are left as NaN and flagged in `undetermined`.
SolveReport solve_dirichlet(const EnumeratedChain& chain, const std::vector<char>& fixed, std::vector<double>& u,
                            const std::vector<double>& q, const SolveOptions& opts,
                            std::vector<char>& undetermined, bool relative_residual) {
  const std::size_t n = chain.size();
  SolveReport rep;
  undetermined.assign(n, 0);

  // Interior states connected to the boundary.
  std::vector<char> reach(n, 0);
  std::deque<std::size_t> queue;
  for (std::size_t i = 0; i < n; ++i) {
    if (fixed[i]) {
      reach[i] = 1;
      queue.push_back(i);
    }
  }
  while (!queue.empty()) {
    const std::size_t i = queue.front();
    queue.pop_front();
    for (std::size_t e = chain.row_begin(i); e < chain.row_end(i); ++e) {
      const std::size_t j = chain.target(e);
      if (!reach[j]) {
        reach[j] = 1;
        queue.push_back(j);
      }
    }
  }
  std::vector<std::size_t> unknown;
  std::vector<std::int64_t> slot(n, -1);
  for (std::size_t i = 0; i < n; ++i) {
    if (fixed[i]) continue;
    if (!reach[i]) {
      undetermined[i] = 1;
      u[i] = kNaN;
      ++rep.undetermined;
      continue;
    }
    slot[i] = static_cast<std::int64_t>(unknown.size());
    unknown.push_back(i);
  }
  const std::size_t m = unknown.size();
  rep.unknowns = m;
  double lambda_max = 0.0;
  for (std::size_t i = 0; i < n; ++i) lambda_max = std::max(lambda_max, chain.holding_rate(i));
  if (m == 0) return rep;
  std::vector<double> lam(m);
  for (std::size_t a = 0; a < m; ++a) lam[a] = chain.holding_rate(unknown[a]);

  // Jump probabilities and right-hand side in u units.
  std::vector<double> log_d(m);
  std::vector<double> rhs(m);
  std::vector<double> buf;
  for (std::size_t a = 0; a < m; ++a) {
    const std::size_t i = unknown[a];
    buf.clear();
    for (std::size_t e = chain.row_begin(i); e < chain.row_end(i); ++e) buf.push_back(chain.log_conductance(e));
    log_d[a] = log_sum_exp(buf);
  }
  std::vector<std::size_t> sub_offsets{0};
  std::vector<std::uint32_t> sub_cols;
  std::vector<double> sub_p;    // p(x,y) for unknown y
  std::vector<double> sub_sym;  // c / sqrt(d_x d_y)
  for (std::size_t a = 0; a < m; ++a) {
    const std::size_t i = unknown[a];
    double b = q[i];
    for (std::size_t e = chain.row_begin(i); e < chain.row_end(i); ++e) {
      const std::size_t j = chain.target(e);
      const double lc = chain.log_conductance(e);
      const double pij = std::exp(lc - log_d[a]);
      if (fixed[j]) {
        b += pij * u[j];
      } else {
        const auto bj = static_cast<std::size_t>(slot[j]);
        sub_cols.push_back(static_cast<std::uint32_t>(bj));
        sub_p.push_back(pij);
        sub_sym.push_back(std::exp(lc - 0.5 * (log_d[a] + log_d[bj])));
      }
    }
    rhs[a] = b;
    sub_offsets.push_back(sub_cols.size());
  }

  // Symmetric system M z = w rhs with w = sqrt(d / max d), u = z / w.
  const double log_scale = *std::max_element(log_d.begin(), log_d.end());
  std::vector<double> w(m);
  for (std::size_t a = 0; a < m; ++a) w[a] = std::exp(0.5 * (log_d[a] - log_scale));
  std::vector<double> x(m, 0.0);

  if (m <= opts.dense_limit) {
    rep.dense = true;
    Eigen::MatrixXd M = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(m));
    Eigen::VectorXd bv(static_cast<Eigen::Index>(m));
    for (std::size_t a = 0; a < m; ++a) {
      bv(static_cast<Eigen::Index>(a)) = w[a] * rhs[a];
      for (std::size_t k = sub_offsets[a]; k < sub_offsets[a + 1]; ++k) {
        M(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(sub_cols[k])) -= sub_sym[k];
      }
    }
    const Eigen::VectorXd z = M.ldlt().solve(bv);
    for (std::size_t a = 0; a < m; ++a) x[a] = z(static_cast<Eigen::Index>(a)) / w[a];
  } else {
    std::vector<double> z(m, 0.0), r(m), pdir(m), Ap(m);
    double bnorm2 = 0.0;
    for (std::size_t a = 0; a < m; ++a) {
      r[a] = w[a] * rhs[a];
      bnorm2 += r[a] * r[a];
    }
    pdir = r;
    double rr = bnorm2;
    const double stop = opts.tolerance * opts.tolerance * bnorm2;
    std::size_t it = 0;
    while (rr > stop && it < opts.max_iterations) {
      for (std::size_t a = 0; a < m; ++a) {
        double s = pdir[a];
        for (std::size_t k = sub_offsets[a]; k < sub_offsets[a + 1]; ++k) s -= sub_sym[k] * pdir[sub_cols[k]];
        Ap[a] = s;
      }
      double pAp = 0.0;
      for (std::size_t a = 0; a < m; ++a) pAp += pdir[a] * Ap[a];
      if (!(pAp > 0.0)) break;
      const double alpha = rr / pAp;
      double rr_new = 0.0;
      for (std::size_t a = 0; a < m; ++a) {
        z[a] += alpha * pdir[a];
        r[a] -= alpha * Ap[a];
        rr_new += r[a] * r[a];
      }
      const double beta = rr_new / rr;
      for (std::size_t a = 0; a < m; ++a) pdir[a] = r[a] + beta * pdir[a];
      rr = rr_new;
      ++it;
    }
    rep.iterations = it;
    for (std::size_t a = 0; a < m; ++a) x[a] = z[a] / w[a];
  }

  // Gauss-Seidel polish on the unscaled equations, which controls the
  // per-state residual of low-weight states.
  auto row_residual = [&](std::size_t a) {
    double s = rhs[a];
    for (std::size_t k = sub_offsets[a]; k < sub_offsets[a + 1]; ++k) s += sub_p[k] * x[sub_cols[k]];
    return s - x[a];
  };
  auto measure = [&]() {
    double umax = 1.0;
    if (relative_residual) {
      for (double v : x) umax = std::max(umax, std::abs(v));
    }
    double worst = 0.0;
    for (std::size_t a = 0; a < m; ++a) {
      worst = std::max(worst, lam[a] * std::abs(row_residual(a)));
    }
    return worst / (lambda_max * umax);
  };
  double res = measure();
  for (std::size_t sweep = 0; sweep < opts.polish_sweeps && res > 1e-3 * opts.residual_bound; ++sweep) {
    for (std::size_t a = 0; a < m; ++a) x[a] += row_residual(a);
    res = measure();
  }
  rep.residual = res;
  if (!(res <= opts.residual_bound)) {
    throw std::runtime_error("linear solve missed the residual bound (" + format_double(res, 6) + ")");
  }
  for (std::size_t a = 0; a < m; ++a) u[unknown[a]] = x[a];
  return rep;
}

}  // namespace

HarmonicResult harmonic_solve(const EnumeratedChain& chain, const StateSet& A, const StateSet& B,
                              const SolveOptions& opts) {
  const std::size_t n = chain.size();
  const auto a = membership(n, A, "A");
  const auto b = membership(n, B, "B");
  require_disjoint_nonempty(a, b, A, B);
  std::vector<char> fixed(n, 0);
  HarmonicResult res;
  res.value.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    fixed[i] = a[i] || b[i];
    if (a[i]) res.value[i] = 1.0;
  }
  const std::vector<double> q(n, 0.0);
  res.report = solve_dirichlet(chain, fixed, res.value, q, opts, res.undetermined, false);
  for (auto& v : res.value) {
    if (!std::isnan(v)) v = std::clamp(v, 0.0, 1.0);
  }
  return res;
}

double hitting_probability(const EnumeratedChain& chain, std::size_t x, const StateSet& A, const StateSet& B,
                           const SolveOptions& opts) {
  if (x >= chain.size()) throw std::out_of_range("state outside the chain");
  return harmonic_solve(chain, A, B, opts).value[x];
}

CapacityResult capacity_exact(const EnumeratedChain& chain, const StateSet& A, const StateSet& B,
                              const SolveOptions& opts) {
  CapacityResult out;
  out.escape = harmonic_solve(chain, B, A, opts);
  const auto& u = out.escape.value;
  const auto in_a = membership(chain.size(), A, "A");
  const auto in_b = membership(chain.size(), B, "B");
  double s = -kInf;
  for (std::size_t i = 0; i < chain.size(); ++i) {
    if (!in_a[i] && !in_b[i]) continue;
    for (std::size_t e = chain.row_begin(i); e < chain.row_end(i); ++e) s = std::max(s, chain.log_conductance(e));
  }
  double from_a = 0.0;
  double into_b = 0.0;
  for (std::size_t i = 0; i < chain.size(); ++i) {
    if (!in_a[i] && !in_b[i]) continue;
    for (std::size_t e = chain.row_begin(i); e < chain.row_end(i); ++e) {
      const double c = std::exp(chain.log_conductance(e) - s);
      const double uj = u[chain.target(e)];
      if (in_a[i]) from_a += c * uj;
      if (in_b[i]) into_b += c * (1.0 - uj);
    }
  }
  if (from_a <= 0.0) {
    out.log_value = -kInf;
    out.value = 0.0;
    out.flux_mismatch = 0.0;
    return out;
  }
  out.log_value = s + std::log(from_a);
  out.value = std::exp(out.log_value);
  out.flux_mismatch = std::abs(from_a - into_b) / from_a;
  return out;
}

double escape_probability(const EnumeratedChain& chain, std::size_t x, const StateSet& S, const SolveOptions& opts) {
  const auto cap = capacity_exact(chain, {x}, S, opts);
  return std::exp(cap.log_value - chain.log_mu(x) - std::log(chain.holding_rate(x)));
}

std::vector<double> exit_distribution(const EnumeratedChain& chain, std::size_t a, const StateSet& B,
                                      const CapacityResult& cap) {
  if (a >= chain.size()) throw std::out_of_range("state outside the chain");
  const auto& u = cap.escape.value;
  if (u.size() != chain.size()) throw std::invalid_argument("capacity result does not match the chain");
  std::vector<double> law;
  law.reserve(B.size());
  for (std::size_t b : B) {
    double flux = 0.0;
    for (std::size_t e = chain.row_begin(b); e < chain.row_end(b); ++e) {
      const double uj = u[chain.target(e)];
      if (std::isnan(uj)) continue;
      flux += std::exp(chain.log_conductance(e) - cap.log_value) * (1.0 - uj);
    }
    law.push_back(flux);
  }
  return law;
}

double dirichlet_form(const EnumeratedChain& chain, const std::vector<double>& f) {
  if (f.size() != chain.size()) throw std::invalid_argument("function size does not match the chain");
  double s = -kInf;
  for (std::size_t e = 0; e < chain.edge_count(); ++e) s = std::max(s, chain.log_conductance(e));
  double total = 0.0;
  for (std::size_t i = 0; i < chain.size(); ++i) {
    for (std::size_t e = chain.row_begin(i); e < chain.row_end(i); ++e) {
      const double d = f[chain.target(e)] - f[i];
      if (d != 0.0) total += std::exp(chain.log_conductance(e) - s) * d * d;
    }
  }
  return 0.5 * total * std::exp(s);
}

double dirichlet_upper(const EnumeratedChain& chain, const StateSet& A, const StateSet& B,
                       const std::vector<double>& f) {
  if (f.size() != chain.size()) throw std::invalid_argument("function size does not match the chain");
  for (double v : f) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("test function must take values in [0,1]");
  }
  for (std::size_t a : A) {
    if (f.at(a) != 1.0) throw std::invalid_argument("test function must equal 1 on A");
  }
  for (std::size_t b : B) {
    if (f.at(b) != 0.0) throw std::invalid_argument("test function must equal 0 on B");
  }
  return dirichlet_form(chain, f);
}

UnitFlow::UnitFlow(const EnumeratedChain& chain, StateSet sources, StateSet sinks)
    : chain_(&chain), sources_(std::move(sources)), sinks_(std::move(sinks)), phi_(chain.edge_count(), 0.0) {
  const auto a = membership(chain.size(), sources_, "sources");
  const auto b = membership(chain.size(), sinks_, "sinks");
  require_disjoint_nonempty(a, b, sources_, sinks_);
}

void UnitFlow::add(std::size_t i, std::size_t j, double v) {
  if (i >= chain_->size() || j >= chain_->size()) throw std::out_of_range("flow endpoint outside the chain");
  const auto e = chain_->edge(i, j);
  const auto r = chain_->edge(j, i);
  if (!e || !r) throw std::invalid_argument("flow on a non-edge " + chain_->key(i) + " -> " + chain_->key(j));
  phi_[*e] += v;
  phi_[*r] -= v;
}

double UnitFlow::value(std::size_t i, std::size_t j) const {
  const auto e = chain_->edge(i, j);
  return e ? phi_[*e] : 0.0;
}

double UnitFlow::divergence(std::size_t x) const {
  double s = 0.0;
  for (std::size_t e = chain_->row_begin(x); e < chain_->row_end(x); ++e) s += phi_[e];
  return s;
}

void UnitFlow::validate(double tol) const {
  const std::size_t n = chain_->size();
  const auto a = membership(n, sources_, "sources");
  const auto b = membership(n, sinks_, "sinks");
  double out_a = 0.0;
  double out_b = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t e = chain_->row_begin(i); e < chain_->row_end(i); ++e) {
      const auto r = chain_->edge(chain_->target(e), i);
      if (std::abs(phi_[e] + phi_[*r]) > tol) throw std::invalid_argument("flow is not antisymmetric");
    }
    const double d = divergence(i);
    if (a[i]) {
      out_a += d;
    } else if (b[i]) {
      out_b += d;
    } else if (std::abs(d) > tol) {
      throw std::invalid_argument("flow has divergence " + format_double(d, 6) + " at " + chain_->key(i));
    }
  }
  if (std::abs(out_a - 1.0) > tol || std::abs(out_b + 1.0) > tol) {
    throw std::invalid_argument("flow is not a unit flow (source " + format_double(out_a, 9) + ", sink " +
                                format_double(out_b, 9) + ")");
  }
}

double thomson_lower(const EnumeratedChain& chain, const UnitFlow& flow) {
  flow.validate();
  std::vector<double> terms;
  for (std::size_t e = 0; e < chain.edge_count(); ++e) {
    const double v = flow.value(e);
    if (v != 0.0) terms.push_back(2.0 * std::log(std::abs(v)) - chain.log_conductance(e));
  }
  if (terms.empty()) return kInf;
  // Each undirected edge appears twice, which the factor 1/2 absorbs.
  const double log_energy = log_sum_exp(terms) - std::log(2.0);
  return std::exp(-log_energy);
}

UnitFlow harmonic_flow(const EnumeratedChain& chain, const StateSet& A, const StateSet& B,
                       const std::vector<double>& h) {
  if (h.size() != chain.size()) throw std::invalid_argument("function size does not match the chain");
  UnitFlow flow(chain, A, B);
  const auto in_a = membership(chain.size(), A, "A");
  std::vector<double> terms;
  for (std::size_t i = 0; i < chain.size(); ++i) {
    if (!in_a[i]) continue;
    for (std::size_t e = chain.row_begin(i); e < chain.row_end(i); ++e) {
      const double d = h[i] - h[chain.target(e)];
      if (d > 0.0) terms.push_back(chain.log_conductance(e) + std::log(d));
    }
  }
  const double log_cap = log_sum_exp(terms);
  for (std::size_t i = 0; i < chain.size(); ++i) {
    for (std::size_t e = chain.row_begin(i); e < chain.row_end(i); ++e) {
      const std::size_t j = chain.target(e);
      if (j <= i) continue;
      const double d = h[i] - h[j];
      if (std::isnan(d) || d == 0.0) continue;
      flow.add(i, j, std::exp(chain.log_conductance(e) - log_cap) * d);
    }
  }
  return flow;
}

UnitFlow spiral_flow(const ConfigurationChain& cc, const ModelParams& p) {
  const int n0 = p.critical_side();
  const int steps = n0 * (n0 + 1) + 1;
  const auto minus = cc.find(SpinConfiguration::uniform(p.lattice(), Spin::Minus));
  if (!minus) throw std::invalid_argument("chain does not contain all -1");
  StateSet sinks;
  std::vector<std::vector<std::size_t>> paths;
  for (Site x = 0; x < p.sites(); ++x) {
    std::vector<std::size_t> path{*minus};
    for (int k = 1; k <= steps; ++k) {
      const auto idx = cc.find(make_spiral(p, x, k));
      if (!idx) throw std::invalid_argument("chain does not contain the spiral path");
      path.push_back(*idx);
    }
    sinks.push_back(path.back());
    paths.push_back(std::move(path));
  }
  UnitFlow flow(cc.chain, {*minus}, sinks);
  const double mass = 1.0 / p.sites();
  for (const auto& path : paths) {
    for (std::size_t k = 0; k + 1 < path.size(); ++k) flow.add(path[k], path[k + 1], mass);
  }
  return flow;
}

double mean_hitting_time(const EnumeratedChain& chain, std::size_t x, const StateSet& A, const SolveOptions& opts) {
  const std::size_t n = chain.size();
  if (x >= n) throw std::out_of_range("state outside the chain");
  const auto fixed = membership(n, A, "A");
  if (A.empty()) throw std::invalid_argument("target set must be nonempty");
  if (fixed[x]) return 0.0;
  std::vector<double> u(n, 0.0);
  std::vector<double> q(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!fixed[i]) {
      const double lam = chain.holding_rate(i);
      q[i] = lam > 0.0 ? 1.0 / lam : kInf;
    }
  }
  std::vector<char> undetermined;
  solve_dirichlet(chain, fixed, u, q, opts, undetermined, true);
  return undetermined[x] ? kInf : u[x];
}

double laplace_functional(int n, double eps, double theta) {
  if (n < 1) throw std::invalid_argument("laplace_functional needs n >= 1");
  if (!(eps > 0.0) || !(theta >= 0.0)) throw std::invalid_argument("laplace_functional needs eps > 0, theta >= 0");
  // Thomas algorithm on rows k = 0..n-1:
  // -d_k f(k-1) + (eps + theta + d_k) f(k) - eps f(k+1) = 0, f(n) = 1.
  std::vector<double> cp(static_cast<std::size_t>(n));
  std::vector<double> dp(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    const double dk = k == 0 ? 0.0 : 1.0;
    const double lower = -dk;
    const double diag = eps + theta + dk;
    const double upper = -eps;
    double rhs = 0.0;
    double up = upper;
    if (k == n - 1) {
      rhs = eps;
      up = 0.0;
    }
    const double denom = diag - (k > 0 ? lower * cp[static_cast<std::size_t>(k - 1)] : 0.0);
    cp[static_cast<std::size_t>(k)] = up / denom;
    dp[static_cast<std::size_t>(k)] = (rhs - (k > 0 ? lower * dp[static_cast<std::size_t>(k - 1)] : 0.0)) / denom;
  }
  double f = dp[static_cast<std::size_t>(n - 1)];
  for (int k = n - 2; k >= 0; --k) f = dp[static_cast<std::size_t>(k)] - cp[static_cast<std::size_t>(k)] * f;
  return f;
}

ThetaResult theta_beta(const EnumeratedChain& chain, std::size_t minus, const StateSet& targets,
                       const SolveOptions& opts) {
  ThetaResult r{0.0, 0.0, capacity_exact(chain, {minus}, targets, opts)};
  r.log_value = chain.log_mu(minus) - r.capacity.log_value;
  r.value = std::exp(r.log_value);
  return r;
}

double log_theta_beta_asymptotic(const ModelParams& p) {
  const int n0 = p.critical_side();
  const double a = gamma_c(p).relative_barrier;
  return std::log(3.0 / (4.0 * (2.0 * n0 + 1.0))) - std::log(static_cast<double>(p.sites())) + a * p.beta();
}

double theta_beta_asymptotic(const ModelParams& p) { return std::exp(log_theta_beta_asymptotic(p)); }

}  // namespace bclab
