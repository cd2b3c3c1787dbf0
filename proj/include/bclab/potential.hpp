#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "bclab/lattice.hpp"
#include "bclab/trajectory.hpp"

namespace bclab {

using StateSet = std::vector<std::size_t>;

/// Explicit reversible chain. Rows are stored in CSR form sorted by target;
/// the stationary weights are unnormalized and kept as logs relative to the
/// reference state 0. Immutable once built.
class EnumeratedChain {
 public:
  EnumeratedChain() = default;

  std::size_t size() const { return log_mu_.size(); }
  std::size_t edge_count() const { return targets_.size(); }  // directed edges
  std::size_t reference() const { return 0; }

  const std::string& key(std::size_t i) const { return keys_[i]; }
  std::optional<std::size_t> find(const std::string& key) const;

  double log_mu(std::size_t i) const { return log_mu_[i]; }
  double holding_rate(std::size_t i) const;  // lambda(i)

  std::size_t row_begin(std::size_t i) const { return offsets_[i]; }
  std::size_t row_end(std::size_t i) const { return offsets_[i + 1]; }
  std::uint32_t target(std::size_t e) const { return targets_[e]; }
  double rate(std::size_t e) const { return rates_[e]; }
  /// log of the edge conductance mu(i) r(i,j); min(mu(i), mu(j)) for
  /// Metropolis chains.
  double log_conductance(std::size_t e) const { return log_cond_[e]; }
  std::optional<std::size_t> edge(std::size_t i, std::size_t j) const;

  bool metropolis() const { return metropolis_; }
  /// Largest |log(mu(i) r(i,j)) - log(mu(j) r(j,i))| over all edges.
  double reversibility_defect() const { return defect_; }

 private:
  friend class ChainBuilder;
  friend EnumeratedChain assemble_chain(std::vector<std::string>, std::vector<double>, std::vector<std::size_t>,
                                        std::vector<std::uint32_t>, std::vector<double>, bool);
  std::vector<std::string> keys_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<double> log_mu_;
  std::vector<std::size_t> offsets_{0};
  std::vector<std::uint32_t> targets_;
  std::vector<double> rates_;
  std::vector<double> log_cond_;
  bool metropolis_ = false;
  double defect_ = 0.0;
};

/// Validates CSR input (support symmetry, positive rates, reversibility to
/// 1e-10 relative) and builds the chain. Rows need not be sorted.
EnumeratedChain assemble_chain(std::vector<std::string> keys, std::vector<double> log_mu,
                               std::vector<std::size_t> offsets, std::vector<std::uint32_t> targets,
                               std::vector<double> rates, bool metropolis);

class ChainBuilder {
 public:
  std::size_t add_state(std::string key, double log_mu);
  void add_edge(std::size_t from, std::size_t to, double rate);
  /// Adds both directions with rates fixed by conductance c = mu(i) r(i,j).
  void add_conductance(std::size_t i, std::size_t j, double conductance);
  void set_metropolis(bool m) { metropolis_ = m; }
  EnumeratedChain build() const;

 private:
  std::vector<std::string> keys_;
  std::vector<double> log_mu_;
  std::vector<std::vector<std::pair<std::uint32_t, double>>> rows_;
  bool metropolis_ = false;
};

/// IO: header "STATES n EDGES m REF <key>", then "i log_mu key" lines, then
/// "i j rate" lines.
void write_chain(std::ostream& os, const EnumeratedChain& chain);
EnumeratedChain read_chain(std::istream& is);

class ClosureOverflow : public std::runtime_error {
 public:
  ClosureOverflow(std::size_t cap, std::size_t reached);
  std::size_t cap() const { return cap_; }
  std::size_t reached() const { return reached_; }

 private:
  std::size_t cap_;
  std::size_t reached_;
};

struct ConfigurationChain {
  EnumeratedChain chain;
  std::vector<SpinConfiguration> states;
  std::unordered_map<SpinConfiguration, std::size_t, SpinConfigurationHash> index;

  std::optional<std::size_t> find(const SpinConfiguration& s) const;
  StateSet select(const ConfigPredicate& pred) const;
};

inline constexpr std::size_t kDefaultClosureCap = 50'000'000;

/// Breadth-first closure of the seeds under single flips that stay inside
/// the predicate. Weights are relative to the first seed; rates are the
/// Metropolis flip rates.
ConfigurationChain enumerate_closure(const std::vector<SpinConfiguration>& seeds, const ConfigPredicate& member,
                                     const ModelParams& p, std::size_t cap = kDefaultClosureCap);

/// The {-1,0}^L chain on the whole torus lumped by translations and the
/// dihedral symmetries of the square. Keys are canonical 0-site bit masks in
/// decimal; state 0 is all -1. Exact hitting quantities between symmetric
/// sets (for instance all -1 and all 0) agree with the unlumped chain.
EnumeratedChain lumped_binary_chain(const ModelParams& p, std::size_t cap = kDefaultClosureCap);
/// Canonical orbit representative of a 0-site bit mask.
std::uint64_t canonical_mask(std::uint64_t mask, int side);

struct SolveOptions {
  double tolerance = 1e-12;  // relative residual of the preconditioned system
  std::size_t max_iterations = 100000;
  std::size_t dense_limit = 2000;
  std::size_t polish_sweeps = 200;
  double residual_bound = 1e-10;  // on ||L u - s|| / lambda_max
};

struct SolveReport {
  std::size_t unknowns = 0;
  std::size_t iterations = 0;
  bool dense = false;
  double residual = 0.0;  // max_x |(L u)(x) - s(x)| / lambda_max over solved states
  std::size_t undetermined = 0;
};

struct HarmonicResult {
  std::vector<double> value;        // P_x[H_A < H_B]; NaN where undetermined
  std::vector<char> undetermined;   // interior states reaching neither A nor B
  SolveReport report;
};

HarmonicResult harmonic_solve(const EnumeratedChain& chain, const StateSet& A, const StateSet& B,
                              const SolveOptions& opts = {});

double hitting_probability(const EnumeratedChain& chain, std::size_t x, const StateSet& A, const StateSet& B,
                           const SolveOptions& opts = {});

struct CapacityResult {
  double log_value = 0.0;  // log cap, relative to mu(reference)
  double value = 0.0;
  /// u(x) = P_x[H_B < H_A]; the escape side, so flux sums have no
  /// cancellation.
  HarmonicResult escape;
  /// |flux out of A - flux into B| / cap.
  double flux_mismatch = 0.0;
};

CapacityResult capacity_exact(const EnumeratedChain& chain, const StateSet& A, const StateSet& B,
                              const SolveOptions& opts = {});

/// P_x[H_S < H_x^+] = cap(x, S) / (mu(x) lambda(x)).
double escape_probability(const EnumeratedChain& chain, std::size_t x, const StateSet& S,
                          const SolveOptions& opts = {});

/// Exit law at B starting from a: P_a[X(H_B) = b] for each b in B, from the
/// escape solution of capacity_exact(chain, {a}, B).
std::vector<double> exit_distribution(const EnumeratedChain& chain, std::size_t a, const StateSet& B,
                                      const CapacityResult& cap);

/// 1/2 sum_{x,y} c(x,y) (f(y) - f(x))^2.
double dirichlet_form(const EnumeratedChain& chain, const std::vector<double>& f);
/// dirichlet_form after checking f in [0,1], f = 1 on A, f = 0 on B.
double dirichlet_upper(const EnumeratedChain& chain, const StateSet& A, const StateSet& B,
                       const std::vector<double>& f);

/// Antisymmetric flow stored per directed edge of a chain.
class UnitFlow {
 public:
  explicit UnitFlow(const EnumeratedChain& chain, StateSet sources, StateSet sinks);

  /// Adds v to phi(i,j) and -v to phi(j,i); (i,j) must be an edge.
  void add(std::size_t i, std::size_t j, double v);
  double value(std::size_t e) const { return phi_[e]; }
  double value(std::size_t i, std::size_t j) const;
  double divergence(std::size_t x) const;
  const StateSet& sources() const { return sources_; }
  const StateSet& sinks() const { return sinks_; }

  /// Throws unless antisymmetric, divergence-free off sources and sinks, and
  /// of total divergence +1 on sources and -1 on sinks, to tol.
  void validate(double tol = 1e-9) const;

 private:
  const EnumeratedChain* chain_;
  StateSet sources_;
  StateSet sinks_;
  std::vector<double> phi_;
};

/// [1/2 sum phi^2 / c]^{-1} for a validated unit flow.
double thomson_lower(const EnumeratedChain& chain, const UnitFlow& flow);

/// The unit flow c(x,y)(h(x) - h(y)) / cap from a harmonic function h with
/// h = 1 on A and 0 on B.
UnitFlow harmonic_flow(const EnumeratedChain& chain, const StateSet& A, const StateSet& B,
                       const std::vector<double>& h);

/// Spiral flow: mass 1/|L| from all -1 to each zeta_{x,1}, carried along
/// zeta_{x,k} -> zeta_{x,k+1} into the attached droplets zeta_{x,n0(n0+1)+1}.
/// Sinks are those endpoints.
UnitFlow spiral_flow(const ConfigurationChain& cc, const ModelParams& p);

/// E_x[H_A]; +inf when A is unreachable from x.
double mean_hitting_time(const EnumeratedChain& chain, std::size_t x, const StateSet& A,
                         const SolveOptions& opts = {});

/// f(0) = E_0[exp(-theta H_n)] for the walk on {0..n} with up-rate eps and
/// down-rate 1, solving (L f)(k) = theta f(k), f(n) = 1.
double laplace_functional(int n, double eps, double theta);

struct ThetaResult {
  double log_value;
  double value;
  CapacityResult capacity;
};

/// mu(minus) / cap(minus, targets).
ThetaResult theta_beta(const EnumeratedChain& chain, std::size_t minus, const StateSet& targets,
                       const SolveOptions& opts = {});
/// 3 / (4 (2 n0 + 1)) |L|^{-1} e^{a beta} with a the relative barrier.
double theta_beta_asymptotic(const ModelParams& p);
double log_theta_beta_asymptotic(const ModelParams& p);

}  // namespace bclab
