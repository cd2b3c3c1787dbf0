#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "bclab/droplet.hpp"
#include "bclab/trace.hpp"

namespace bclab {

enum class Scenario { NucleationGate, Route, TraceLimit, CapacityExact, EigenBound, RegimeScan };

const char* to_string(Scenario s);
Scenario scenario_from_string(const std::string& name);

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// More than 2% of the replicas of one point ran into a cap.
class CapExhaustion : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ExperimentConfig {
  Scenario scenario = Scenario::NucleationGate;
  std::vector<int> sides{16};  // several only for regime-scan
  double field = 0.9;
  std::vector<double> betas{4.0};
  int replicas = 100;
  std::uint64_t seed = 1;
  std::uint64_t event_cap = 100'000'000;
  std::optional<double> time_cap;
  std::string out = "out";
  /// The beta at which --check thresholds apply; defaults to the last beta.
  std::optional<double> check_beta;

  int side() const { return sides.front(); }
};

/// `key = value` lines; `#` starts a comment. Unknown keys are errors.
ExperimentConfig parse_config(std::istream& is);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Throws ConfigError when a field is out of range for the scenario.
void validate(const ExperimentConfig& cfg);

/// Canonical key-value text of the config, every key present.
std::string canonical_text(const ExperimentConfig& cfg);
/// FNV-1a 64 of the canonical text, as 16 hex digits.
std::string config_hash(const ExperimentConfig& cfg);

/// desk-nucleation, desk-route, desk-trace, desk-capacity, desk-eigen,
/// desk-regime.
ExperimentConfig preset(const std::string& name);
std::vector<std::string> preset_names();

struct RunRecord {
  std::string scenario;
  double beta = 0.0;
  std::string phase;
  int replica = 0;
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
  std::string stop_reason;
  std::string hit_label;  // a declared target label, or "cap"
  double hitting_time = 0.0;
  std::uint64_t event_count = 0;
  std::string exit_class;  // DropletLabel token of the final configuration
  double wall_clock = 0.0;
  std::optional<bool> visited_long_side;     // nucleation continuation
  std::optional<double> outside_fraction;    // trace-limit
  std::optional<double> first_zero_time;     // trace-limit
};

/// One JSON object, no trailing newline.
std::string to_json_line(const RunRecord& r);

struct SummaryRow {
  std::string section;
  std::optional<double> beta;
  std::string key;
  double value = 0.0;
  std::optional<double> ci_lo;
  std::optional<double> ci_hi;
  std::optional<std::string> text;  // replaces value for non-numeric entries
};

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct ExperimentResult {
  ExperimentConfig config;
  std::vector<RunRecord> runs;
  std::vector<SummaryRow> summary;
  std::vector<CheckResult> checks;
  std::vector<RegimeReport> regimes;
  std::vector<RateEstimate> rates;  // trace-limit at the check beta

  bool all_pass() const;
  /// First row matching section, key and (optionally) beta.
  const SummaryRow* find(const std::string& section, const std::string& key,
                         std::optional<double> beta = std::nullopt) const;
};

/// Workers from BCLAB_THREADS, else the hardware concurrency.
unsigned worker_count();

ExperimentResult run_experiment(const ExperimentConfig& cfg, unsigned threads = 0);

ExperimentResult run_nucleation_gate(const ExperimentConfig& cfg, unsigned threads = 0);
ExperimentResult run_route(const ExperimentConfig& cfg, unsigned threads = 0);
ExperimentResult run_trace_limit(const ExperimentConfig& cfg, unsigned threads = 0);
ExperimentResult run_capacity_exact(const ExperimentConfig& cfg);
ExperimentResult run_eigen_bound(const ExperimentConfig& cfg);
ExperimentResult run_regime_scan(const ExperimentConfig& cfg);

/// CSV with header section,beta,key,value,ci_lo,ci_hi. Deterministic: no
/// timings, shortest round-trip number formatting.
void write_summary_csv(std::ostream& os, const ExperimentResult& r);
/// CSV with header L,h,beta,scale,value,log_value,ok.
void write_regime_csv(std::ostream& os, const std::vector<RegimeReport>& regimes);
/// Writes runs.jsonl, summary.csv, regime.csv, and rates.csv for trace-limit.
void write_outputs(const ExperimentResult& r, const std::filesystem::path& dir);

/// Runs `n` independent jobs on `threads` workers pulling indices from a
/// shared counter; results are stored by index.
template <class T, class F>
std::vector<T> parallel_map(std::size_t n, unsigned threads, F&& job);

}  // namespace bclab

#include "bclab/detail/parallel.hpp"
