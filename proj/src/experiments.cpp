#include "bclab/experiments.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <thread>

#include "bclab/kmc.hpp"
#include "bclab/potential.hpp"
#include "bclab/stats.hpp"
#include "bclab/textio.hpp"

namespace bclab {

namespace {

constexpr double kCapFraction = 0.02;

struct ScenarioName {
  Scenario s;
  const char* name;
};

constexpr ScenarioName kScenarios[] = {
    {Scenario::NucleationGate, "nucleation-gate"}, {Scenario::Route, "route"},
    {Scenario::TraceLimit, "trace-limit"},         {Scenario::CapacityExact, "capacity-exact"},
    {Scenario::EigenBound, "eigen-bound"},         {Scenario::RegimeScan, "regime-scan"},
};

std::vector<std::string> split_list(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (c == ',' || c == ' ' || c == '\t') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

template <class T, class Parse>
std::vector<T> parse_list(const std::string& key, std::string_view text, Parse parse) {
  std::vector<T> out;
  try {
    for (const auto& item : split_list(text)) out.push_back(parse(item));
  } catch (const std::exception& e) {
    throw ConfigError("bad value for " + key + ": " + e.what());
  }
  if (out.empty()) throw ConfigError("empty list for " + key);
  return out;
}

double to_double(const std::string& s) { return parse_double(s); }
int to_int(const std::string& s) { return static_cast<int>(parse_integer(s)); }

std::uint64_t to_u64(const std::string& key, const std::string& s) {
  const long long v = parse_integer(s);
  if (v < 0) throw ConfigError(key + " must be non-negative");
  return static_cast<std::uint64_t>(v);
}

bool same_beta(double a, double b) { return std::abs(a - b) <= 1e-12 * std::max(1.0, std::abs(a)); }

std::string number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string list_text(const std::vector<double>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + number(xs[i]);
  return s;
}

std::string list_text(const std::vector<int>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + std::to_string(xs[i]);
  return s;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Target uniform_target(const std::string& label, Spin s) {
  return {label, [s](const SpinConfiguration& c) { return c.is_uniform(s); }};
}

std::size_t check_index(const ExperimentConfig& cfg) {
  if (!cfg.check_beta) return cfg.betas.size() - 1;
  for (std::size_t i = 0; i < cfg.betas.size(); ++i) {
    if (same_beta(cfg.betas[i], *cfg.check_beta)) return i;
  }
  throw ConfigError("check_beta is not one of the betas");
}

/// Indices of cfg.betas in increasing beta order.
std::vector<std::size_t> beta_order(const ExperimentConfig& cfg) {
  std::vector<std::size_t> idx(cfg.betas.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return cfg.betas[a] < cfg.betas[b]; });
  return idx;
}

class Collector {
 public:
  explicit Collector(ExperimentResult& r) : r_(r) {}

  void add(const std::string& section, std::optional<double> beta, const std::string& key, double value,
           std::optional<double> lo = std::nullopt, std::optional<double> hi = std::nullopt) {
    r_.summary.push_back({section, beta, key, value, lo, hi, std::nullopt});
  }
  void text(const std::string& section, const std::string& key, const std::string& value) {
    r_.summary.push_back({section, std::nullopt, key, 0.0, std::nullopt, std::nullopt, value});
  }
  void proportion(const std::string& section, double beta, const std::string& key, std::uint64_t k,
                  std::uint64_t n) {
    if (n == 0) {
      add(section, beta, key, std::nan(""));
      return;
    }
    const auto ci = wilson_interval(k, n);
    add(section, beta, key, static_cast<double>(k) / static_cast<double>(n), ci.lo, ci.hi);
  }
  void check(const std::string& name, bool pass, const std::string& detail) { r_.checks.push_back({name, pass, detail}); }

 private:
  ExperimentResult& r_;
};

ExperimentResult start_result(const ExperimentConfig& cfg) {
  validate(cfg);
  ExperimentResult r;
  r.config = cfg;
  Collector c(r);
  c.text("config", "hash", config_hash(cfg));
  c.text("config", "scenario", to_string(cfg.scenario));
  c.text("config", "L", list_text(cfg.sides));
  c.text("config", "h", number(cfg.field));
  c.text("config", "betas", list_text(cfg.betas));
  c.text("config", "replicas", std::to_string(cfg.replicas));
  c.text("config", "seed", std::to_string(cfg.seed));
  for (int L : cfg.sides) {
    for (double b : cfg.betas) r.regimes.push_back(regime_report(ModelParams(cfg.field, b, L)));
  }
  for (const auto& rep : r.regimes) {
    const std::string prefix = cfg.sides.size() > 1 ? "L=" + std::to_string(rep.side) + ":" : "";
    for (const Scale* s : rep.entries()) c.add("regime", rep.beta, prefix + s->name, s->value);
  }
  return r;
}

struct Replica {
  RunRecord record;
  SpinConfiguration final_state;
};

struct PhaseSpec {
  std::string phase;
  std::uint64_t seed = 0;
  std::vector<Target> targets;
};

StopCondition make_stop(const ExperimentConfig& cfg, std::vector<Target> targets) {
  StopCondition stop;
  stop.targets = std::move(targets);
  stop.event_cap = cfg.event_cap;
  stop.time_cap = cfg.time_cap;
  return stop;
}

RunRecord make_record(const ExperimentConfig& cfg, const ModelParams& p, const PhaseSpec& phase, int replica,
                      const Trajectory& t, double wall) {
  RunRecord r;
  r.scenario = to_string(cfg.scenario);
  r.beta = p.beta();
  r.phase = phase.phase;
  r.replica = replica;
  r.seed = phase.seed;
  r.stream = static_cast<std::uint64_t>(replica);
  r.stop_reason = to_string(t.reason);
  r.hit_label = t.reason == StopReason::Hit ? t.hit_label : "cap";
  r.hitting_time = t.total_time;
  r.event_count = t.event_count;
  r.exit_class = p.lattice().side() >= 5 ? token(classify(t.final_state, p).label) : token(project_psi(t.final_state));
  r.wall_clock = wall;
  return r;
}

/// Applies the cap rule to one phase; returns the number of capped runs.
std::size_t enforce_cap_rule(const std::vector<Replica>& reps, const std::string& what) {
  std::size_t capped = 0;
  for (const auto& r : reps) capped += r.record.hit_label == "cap";
  const double allowed = std::floor(kCapFraction * static_cast<double>(reps.size()) + 1e-9);
  if (static_cast<double>(capped) > allowed) {
    throw CapExhaustion(what + ": " + std::to_string(capped) + " of " + std::to_string(reps.size()) +
                        " runs hit the event or time cap (more than 2%); raise event_cap or time_cap");
  }
  return capped;
}

std::string point_name(const std::string& scenario, const std::string& phase, double beta) {
  return scenario + " " + phase + " at beta=" + number(beta);
}

std::uint64_t point_seed(const ExperimentConfig& cfg, std::size_t point, std::uint64_t phase) {
  const std::uint64_t base = derive_seed(cfg.seed, point);
  return phase == 0 ? base : derive_seed(base, phase);
}

void check_trend(Collector& c, const ExperimentConfig& cfg, const std::string& name,
                 const std::vector<double>& values) {
  if (cfg.betas.size() < 2) return;
  const auto order = beta_order(cfg);
  bool ok = true;
  std::string detail;
  for (std::size_t k = 0; k < order.size(); ++k) {
    detail += (k ? " " : "") + number(cfg.betas[order[k]]) + ":" + number(values[order[k]]);
    if (k > 0 && values[order[k]] < values[order[k - 1]]) ok = false;
  }
  c.check(name, ok, detail);
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

}  // namespace

const char* to_string(Scenario s) {
  for (const auto& e : kScenarios) {
    if (e.s == s) return e.name;
  }
  return "?";
}

Scenario scenario_from_string(const std::string& name) {
  for (const auto& e : kScenarios) {
    if (name == e.name) return e.s;
  }
  throw ConfigError("unknown scenario: " + name);
}

ExperimentConfig parse_config(std::istream& is) {
  ExperimentConfig cfg;
  std::map<std::string, std::string> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string_view::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key(trim(body.substr(0, eq)));
    const std::string value(trim(body.substr(eq + 1)));
    if (value.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty value for " + key);
    if (!seen.emplace(key, value).second) throw ConfigError("duplicate key: " + key);
  }
  if (seen.count("beta") && seen.count("betas")) throw ConfigError("give either beta or betas, not both");
  for (const auto& [key, value] : seen) {
    try {
      if (key == "scenario") {
        cfg.scenario = scenario_from_string(value);
      } else if (key == "L") {
        cfg.sides = parse_list<int>(key, value, to_int);
      } else if (key == "h") {
        cfg.field = parse_double(value);
      } else if (key == "beta" || key == "betas") {
        cfg.betas = parse_list<double>(key, value, to_double);
      } else if (key == "replicas") {
        cfg.replicas = to_int(value);
      } else if (key == "seed") {
        cfg.seed = to_u64(key, value);
      } else if (key == "event_cap") {
        cfg.event_cap = to_u64(key, value);
      } else if (key == "time_cap") {
        if (value == "none") {
          cfg.time_cap.reset();
        } else {
          cfg.time_cap = parse_double(value);
        }
      } else if (key == "out") {
        cfg.out = value;
      } else if (key == "check_beta") {
        cfg.check_beta = parse_double(value);
      } else {
        throw ConfigError("unknown key: " + key);
      }
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError("bad value for " + key + ": " + e.what());
    }
  }
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  return parse_config(in);
}

void validate(const ExperimentConfig& cfg) {
  if (cfg.replicas < 1) throw ConfigError("replicas must be >= 1");
  if (cfg.betas.empty()) throw ConfigError("at least one beta is required");
  for (double b : cfg.betas) {
    if (!(b > 0.0) || !std::isfinite(b)) throw ConfigError("beta must be positive and finite");
  }
  if (cfg.sides.empty()) throw ConfigError("L is required");
  if (cfg.sides.size() > 1 && cfg.scenario != Scenario::RegimeScan) {
    throw ConfigError("a list of L values is only accepted by regime-scan");
  }
  const int min_side = (cfg.scenario == Scenario::NucleationGate || cfg.scenario == Scenario::CapacityExact) ? 5 : 2;
  for (int L : cfg.sides) {
    if (L < min_side) throw ConfigError(std::string(to_string(cfg.scenario)) + " needs L >= " + std::to_string(min_side));
  }
  if (!(cfg.field > 0.0 && cfg.field < 1.0)) throw ConfigError("h must lie in (0, 1)");
  {
    const double r = 2.0 / cfg.field;
    if (std::abs(r - std::round(r)) < 1e-12) throw ConfigError("2/h must not be an integer");
  }
  if (cfg.event_cap < 1) throw ConfigError("event_cap must be >= 1");
  if (cfg.time_cap && !(*cfg.time_cap > 0.0)) throw ConfigError("time_cap must be positive");
  if (cfg.out.empty()) throw ConfigError("out must not be empty");
  if (cfg.check_beta) {
    bool found = false;
    for (double b : cfg.betas) found = found || same_beta(b, *cfg.check_beta);
    if (!found) throw ConfigError("check_beta must be one of the betas");
  }
}

std::string canonical_text(const ExperimentConfig& cfg) {
  std::ostringstream os;
  os << "scenario = " << to_string(cfg.scenario) << '\n';
  os << "L = " << list_text(cfg.sides) << '\n';
  os << "h = " << number(cfg.field) << '\n';
  os << "betas = " << list_text(cfg.betas) << '\n';
  os << "replicas = " << cfg.replicas << '\n';
  os << "seed = " << cfg.seed << '\n';
  os << "event_cap = " << cfg.event_cap << '\n';
  os << "time_cap = " << (cfg.time_cap ? number(*cfg.time_cap) : std::string("none")) << '\n';
  if (cfg.check_beta) os << "check_beta = " << number(*cfg.check_beta) << '\n';
  return os.str();
}

std::string config_hash(const ExperimentConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : canonical_text(cfg)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::vector<std::string> preset_names() {
  return {"desk-nucleation", "desk-route", "desk-trace", "desk-capacity", "desk-eigen", "desk-regime"};
}

ExperimentConfig preset(const std::string& name) {
  ExperimentConfig c;
  c.field = 0.9;
  c.seed = 20240101;
  if (name == "desk-nucleation") {
    c.scenario = Scenario::NucleationGate;
    c.sides = {16};
    c.betas = {3.5, 4.0, 4.5};
    c.replicas = 200;
    c.check_beta = 4.0;
    c.out = "out/desk-nucleation";
  } else if (name == "desk-route") {
    c.scenario = Scenario::Route;
    c.sides = {8};
    c.betas = {3.5, 4.0, 4.5};
    c.replicas = 100;
    c.check_beta = 4.5;
    c.out = "out/desk-route";
  } else if (name == "desk-trace") {
    c.scenario = Scenario::TraceLimit;
    c.sides = {8};
    c.betas = {4.5};
    c.replicas = 100;
    c.out = "out/desk-trace";
  } else if (name == "desk-capacity") {
    c.scenario = Scenario::CapacityExact;
    c.sides = {5};
    c.betas = {4.0, 5.0, 6.0};
    c.replicas = 1;
    c.check_beta = 6.0;
    c.out = "out/desk-capacity";
  } else if (name == "desk-eigen") {
    c.scenario = Scenario::EigenBound;
    c.sides = {16};
    c.betas = {4.0};
    c.replicas = 1;
    c.out = "out/desk-eigen";
  } else if (name == "desk-regime") {
    c.scenario = Scenario::RegimeScan;
    c.sides = {8, 16, 32};
    c.betas = {2.0, 4.0, 6.0, 8.0, 10.0, 15.0, 20.0};
    c.replicas = 1;
    c.out = "out/desk-regime";
  } else {
    throw ConfigError("unknown preset: " + name);
  }
  return c;
}

std::string to_json_line(const RunRecord& r) {
  nlohmann::ordered_json j;
  j["scenario"] = r.scenario;
  j["beta"] = r.beta;
  j["phase"] = r.phase;
  j["replica"] = r.replica;
  j["seed"] = r.seed;
  j["stream"] = r.stream;
  j["stop_reason"] = r.stop_reason;
  j["hit_label"] = r.hit_label;
  j["hitting_time"] = r.hitting_time;
  j["event_count"] = r.event_count;
  j["exit_class"] = r.exit_class;
  j["wall_clock"] = r.wall_clock;
  if (r.visited_long_side) j["visited_long_side"] = *r.visited_long_side;
  if (r.outside_fraction) j["outside_fraction"] = *r.outside_fraction;
  if (r.first_zero_time) j["first_zero_time"] = *r.first_zero_time;
  return j.dump();
}

bool ExperimentResult::all_pass() const {
  return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.pass; });
}

const SummaryRow* ExperimentResult::find(const std::string& section, const std::string& key,
                                         std::optional<double> beta) const {
  for (const auto& row : summary) {
    if (row.section != section || row.key != key) continue;
    if (beta && !(row.beta && same_beta(*row.beta, *beta))) continue;
    return &row;
  }
  return nullptr;
}

unsigned worker_count() {
  if (const char* env = std::getenv("BCLAB_THREADS")) {
    try {
      const long long n = parse_integer(env);
      if (n >= 1) return static_cast<unsigned>(n);
    } catch (const std::exception&) {
    }
    throw ConfigError("BCLAB_THREADS must be a positive integer");
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

namespace {

/// Runs one phase over all replicas from fixed or per-replica starts.
template <class Start, class Extra>
std::vector<Replica> run_phase(const ExperimentConfig& cfg, const ModelParams& p, const PhaseSpec& phase,
                               std::size_t count, unsigned threads, Start start, Extra extra) {
  return parallel_map<Replica>(count, threads, [&](std::size_t i) {
    const auto t0 = std::chrono::steady_clock::now();
    RngStream rng(phase.seed, i);
    const SpinConfiguration s0 = start(i);
    RunOptions opts;
    opts.record_events = false;
    auto finish = extra(s0, opts);
    const auto traj = run_until(s0, make_stop(cfg, phase.targets), p, rng, opts);
    Replica r{make_record(cfg, p, phase, static_cast<int>(i), traj, 0.0), traj.final_state};
    finish(r.record, traj);
    r.record.wall_clock = seconds_since(t0);
    return r;
  });
}

auto no_extra() {
  return [](const SpinConfiguration&, RunOptions&) { return [](RunRecord&, const Trajectory&) {}; };
}

void append_runs(ExperimentResult& r, const std::vector<Replica>& reps) {
  for (const auto& x : reps) r.runs.push_back(x.record);
}

}  // namespace

ExperimentResult run_nucleation_gate(const ExperimentConfig& cfg, unsigned threads) {
  auto result = start_result(cfg);
  Collector c(result);
  const auto labels = {DropletLabel::Ra_lc,          DropletLabel::Ra_li,     DropletLabel::Ra_s,
                       DropletLabel::RplusNonAttached, DropletLabel::B_minus_R, DropletLabel::Other};
  std::vector<double> fractions(cfg.betas.size(), 0.0);
  std::vector<double> lower(cfg.betas.size(), 0.0);
  std::vector<double> pvalues(cfg.betas.size(), 0.0);

  for (std::size_t b = 0; b < cfg.betas.size(); ++b) {
    const ModelParams p(cfg.field, cfg.betas[b], cfg.side());
    const auto& lat = p.lattice();
    const int n0 = p.critical_side();
    const int area = p.critical_area();
    const auto minus = SpinConfiguration::uniform(lat, Spin::Minus);

    PhaseSpec exit{"exit", point_seed(cfg, b, 0), {{"B+", [p](const SpinConfiguration& s) { return boundary_Bplus(s, p); }}}};
    const auto exits = run_phase(cfg, p, exit, static_cast<std::size_t>(cfg.replicas), threads,
                                 [&](std::size_t) { return minus; }, no_extra());
    const std::size_t capped = enforce_cap_rule(exits, point_name("nucleation-gate", "exit", p.beta()));
    append_runs(result, exits);

    std::map<DropletLabel, std::uint64_t> hist;
    std::uint64_t n = 0;
    std::uint64_t ra = 0;
    std::vector<std::size_t> hit_index;
    for (std::size_t i = 0; i < exits.size(); ++i) {
      if (exits[i].record.hit_label == "cap") continue;
      const auto lab = label_from_token(exits[i].record.exit_class);
      ++hist[lab];
      ++n;
      ra += is_attached(lab);
      hit_index.push_back(i);
    }
    const double beta = p.beta();
    c.add("nucleation", beta, "exit_runs", static_cast<double>(n));
    c.add("nucleation", beta, "exit_capped", static_cast<double>(capped));
    c.proportion("nucleation", beta, "ra_fraction", ra, n);
    for (auto lab : labels) c.proportion("nucleation", beta, std::string("exit_class:") + token(lab), hist[lab], n);
    fractions[b] = n ? static_cast<double>(ra) / static_cast<double>(n) : 0.0;
    lower[b] = n ? wilson_interval(ra, n).lo : 0.0;

    // Boundary slots per rectangle: 4 corner, 2(n0-1) long-side interior, 2 n0 short side.
    const std::vector<double> weights{4.0, 2.0 * (n0 - 1), 2.0 * n0};
    const std::vector<double> observed{static_cast<double>(hist[DropletLabel::Ra_lc]),
                                       static_cast<double>(hist[DropletLabel::Ra_li]),
                                       static_cast<double>(hist[DropletLabel::Ra_s])};
    const double total_ra = observed[0] + observed[1] + observed[2];
    const double slots = weights[0] + weights[1] + weights[2];
    std::vector<double> expected;
    for (double w : weights) expected.push_back(total_ra * w / slots);
    pvalues[b] = total_ra > 0 ? chi_square_pvalue(observed, expected) : std::nan("");
    c.add("nucleation", beta, "subclass_chi2_pvalue", pvalues[b]);

    PhaseSpec cont{"continuation",
                   point_seed(cfg, b, 1),
                   {uniform_target("0", Spin::Zero), uniform_target("+1", Spin::Plus), uniform_target("-1", Spin::Minus)}};
    const auto is_long = [p, area](const SpinConfiguration& s) {
      return s.count(Spin::Plus) == 0 && s.count(Spin::Zero) == area + 1 && is_long_side(classify(s, p).label);
    };
    const auto conts = run_phase(
        cfg, p, cont, hit_index.size(), threads, [&](std::size_t k) { return exits[hit_index[k]].final_state; },
        [&](const SpinConfiguration& s0, RunOptions& opts) {
          auto flag = std::make_shared<bool>(is_long(s0));
          opts.observer = [flag, is_long](const SpinConfiguration& s, double) {
            if (!*flag && is_long(s)) *flag = true;
          };
          return [flag](RunRecord& rec, const Trajectory&) { rec.visited_long_side = *flag; };
        });
    const std::size_t cont_capped = enforce_cap_rule(conts, point_name("nucleation-gate", "continuation", beta));
    append_runs(result, conts);
    std::uint64_t m = 0;
    std::uint64_t grown = 0;
    std::uint64_t long_first = 0;
    for (const auto& x : conts) {
      if (x.record.hit_label == "cap") continue;
      ++m;
      if (x.record.hit_label == "-1") continue;
      ++grown;
      long_first += x.record.visited_long_side.value_or(false);
    }
    c.add("continuation", beta, "runs", static_cast<double>(m));
    c.add("continuation", beta, "capped", static_cast<double>(cont_capped));
    c.proportion("continuation", beta, "reached_zero_or_plus", grown, m);
    c.proportion("continuation", beta, "long_side_before_zero_or_plus", long_first, grown);
  }

  const std::size_t k = check_index(cfg);
  c.check("ra_fraction >= 0.9 at beta=" + number(cfg.betas[k]), fractions[k] >= 0.9, fmt(fractions[k]));
  c.check("ra_fraction Wilson lower >= 0.85 at beta=" + number(cfg.betas[k]), lower[k] >= 0.85, fmt(lower[k]));
  check_trend(c, cfg, "ra_fraction nondecreasing in beta", fractions);
  c.check("subclass split chi-square p > 0.01 at beta=" + number(cfg.betas[k]), pvalues[k] > 0.01, fmt(pvalues[k]));
  return result;
}

ExperimentResult run_route(const ExperimentConfig& cfg, unsigned threads) {
  auto result = start_result(cfg);
  Collector c(result);
  std::vector<double> zero_first(cfg.betas.size(), 0.0);
  std::vector<double> plus_first(cfg.betas.size(), 0.0);

  for (std::size_t b = 0; b < cfg.betas.size(); ++b) {
    const ModelParams p(cfg.field, cfg.betas[b], cfg.side());
    const double beta = p.beta();
    const auto& lat = p.lattice();
    const auto minus = SpinConfiguration::uniform(lat, Spin::Minus);
    const auto zero = SpinConfiguration::uniform(lat, Spin::Zero);

    PhaseSpec a{"from-minus", point_seed(cfg, b, 0), {uniform_target("0", Spin::Zero), uniform_target("+1", Spin::Plus)}};
    const auto ra = run_phase(cfg, p, a, static_cast<std::size_t>(cfg.replicas), threads,
                              [&](std::size_t) { return minus; }, no_extra());
    const std::size_t ca = enforce_cap_rule(ra, point_name("route", a.phase, beta));
    append_runs(result, ra);

    PhaseSpec z{"from-zero", point_seed(cfg, b, 1), {uniform_target("-1", Spin::Minus), uniform_target("+1", Spin::Plus)}};
    const auto rz = run_phase(cfg, p, z, static_cast<std::size_t>(cfg.replicas), threads,
                              [&](std::size_t) { return zero; }, no_extra());
    const std::size_t cz = enforce_cap_rule(rz, point_name("route", z.phase, beta));
    append_runs(result, rz);

    const auto tally = [](const std::vector<Replica>& reps, const std::string& label) {
      std::pair<std::uint64_t, std::uint64_t> kn{0, 0};
      for (const auto& x : reps) {
        if (x.record.hit_label == "cap") continue;
        ++kn.second;
        kn.first += x.record.hit_label == label;
      }
      return kn;
    };
    const auto [k0, n0] = tally(ra, "0");
    const auto [k1, n1] = tally(rz, "+1");
    c.add("route", beta, "from_minus_runs", static_cast<double>(n0));
    c.add("route", beta, "from_minus_capped", static_cast<double>(ca));
    c.proportion("route", beta, "zero_before_plus", k0, n0);
    c.add("route", beta, "from_zero_runs", static_cast<double>(n1));
    c.add("route", beta, "from_zero_capped", static_cast<double>(cz));
    c.proportion("route", beta, "plus_before_minus", k1, n1);
    zero_first[b] = n0 ? static_cast<double>(k0) / static_cast<double>(n0) : 0.0;
    plus_first[b] = n1 ? static_cast<double>(k1) / static_cast<double>(n1) : 0.0;
  }

  const std::size_t k = check_index(cfg);
  c.check("zero_before_plus >= 0.6 at beta=" + number(cfg.betas[k]), zero_first[k] >= 0.6, fmt(zero_first[k]));
  check_trend(c, cfg, "zero_before_plus nondecreasing in beta", zero_first);
  c.check("plus_before_minus >= 0.9 at beta=" + number(cfg.betas[k]), plus_first[k] >= 0.9, fmt(plus_first[k]));
  return result;
}

ExperimentResult run_trace_limit(const ExperimentConfig& cfg, unsigned threads) {
  auto result = start_result(cfg);
  Collector c(result);
  const std::size_t k = check_index(cfg);

  for (std::size_t b = 0; b < cfg.betas.size(); ++b) {
    const ModelParams p(cfg.field, cfg.betas[b], cfg.side());
    const double beta = p.beta();
    const auto minus = SpinConfiguration::uniform(p.lattice(), Spin::Minus);
    const double theta = theta_beta_asymptotic(p);

    struct TraceExtra {
      OnlineTrace trace;
      std::optional<double> first_zero;
    };
    std::vector<TraceTrajectory> traces(static_cast<std::size_t>(cfg.replicas));
    PhaseSpec ph{"trace", point_seed(cfg, b, 0), {uniform_target("+1", Spin::Plus)}};
    const auto reps = run_phase(
        cfg, p, ph, static_cast<std::size_t>(cfg.replicas), threads, [&](std::size_t) { return minus; },
        [&](const SpinConfiguration& s0, RunOptions& opts) {
          auto st = std::make_shared<TraceExtra>(TraceExtra{OnlineTrace(s0), std::nullopt});
          opts.observer = [st](const SpinConfiguration& s, double t) {
            st->trace.observe(s, t);
            if (!st->first_zero && s.is_uniform(Spin::Zero)) st->first_zero = t;
          };
          return [st, &traces](RunRecord& rec, const Trajectory& traj) {
            auto tr = st->trace.finish(traj.total_time);
            rec.outside_fraction = traj.total_time > 0.0 ? tr.outside_time / traj.total_time : 0.0;
            rec.first_zero_time = st->first_zero;
            traces[static_cast<std::size_t>(rec.replica)] = std::move(tr);
          };
        });
    const std::size_t capped = enforce_cap_rule(reps, point_name("trace-limit", ph.phase, beta));
    append_runs(result, reps);

    // Capped runs still contribute their censored exposure to the rates.
    RateAccumulator acc;
    std::vector<double> outside;
    std::vector<double> h0;
    for (std::size_t i = 0; i < reps.size(); ++i) {
      acc.add(traces[i]);
      if (reps[i].record.hit_label == "cap") continue;
      outside.push_back(*reps[i].record.outside_fraction);
      if (reps[i].record.first_zero_time) h0.push_back(*reps[i].record.first_zero_time);
    }
    const auto rates = acc.estimates(theta);
    c.add("trace", beta, "theta_ref", theta);
    c.add("trace", beta, "runs", static_cast<double>(outside.size()));
    c.add("trace", beta, "capped", static_cast<double>(capped));
    for (const auto& e : rates) {
      const std::string key = std::string("rate:") + token(e.from) + "->" + token(e.to);
      if (e.defined) {
        c.add("trace", beta, key, e.rate, e.ci_lo, e.ci_hi);
      } else {
        c.add("trace", beta, key, std::nan(""));
      }
    }
    const double med = outside.empty() ? std::nan("") : median(outside);
    c.add("trace", beta, "median_outside_fraction", med);
    double mean_h0 = std::nan("");
    if (!h0.empty()) {
      CompensatedSum s;
      for (double v : h0) s.add(v);
      mean_h0 = s.value() / static_cast<double>(h0.size());
    }
    const double h0_ratio = mean_h0 / theta;
    c.add("trace", beta, "zero_visited_runs", static_cast<double>(h0.size()));
    c.add("trace", beta, "mean_H0_over_theta", h0_ratio);

    if (b != k) continue;
    result.rates = rates;
    const auto get = [&](Projection a, Projection z) {
      for (const auto& e : rates) {
        if (e.from == a && e.to == z) return e;
      }
      return RateEstimate{};
    };
    const auto r_m0 = get(Projection::Minus, Projection::Zero);
    const auto r_0p = get(Projection::Zero, Projection::Plus);
    const auto r_0m = get(Projection::Zero, Projection::Minus);
    const auto r_mp = get(Projection::Minus, Projection::Plus);
    const std::string at = " at beta=" + number(beta);
    const auto band = [](const RateEstimate& e) { return e.defined && e.rate >= 0.5 && e.rate <= 2.0; };
    c.check("rate(-1,0) in [0.5, 2]" + at, band(r_m0), fmt(r_m0.rate));
    c.check("rate(0,+1) in [0.5, 2]" + at, band(r_0p), fmt(r_0p.rate));
    c.check("rate(0,-1) upper bound <= 0.2" + at, r_0m.defined && r_0m.ci_hi <= 0.2, fmt(r_0m.ci_hi));
    c.check("rate(-1,+1) upper bound <= 0.2" + at, r_mp.defined && r_mp.ci_hi <= 0.2, fmt(r_mp.ci_hi));
    c.check("median outside fraction <= 0.05" + at, med <= 0.05, fmt(med));
    c.check("mean(H0)/theta_ref in [0.5, 2]" + at, h0_ratio >= 0.5 && h0_ratio <= 2.0, fmt(h0_ratio));
  }
  return result;
}

ExperimentResult run_capacity_exact(const ExperimentConfig& cfg) {
  auto result = start_result(cfg);
  Collector c(result);
  std::vector<double> deviation(cfg.betas.size(), 0.0);
  std::vector<double> spread(cfg.betas.size(), 0.0);
  std::vector<double> spread_bound(cfg.betas.size(), 0.0);
  bool sandwich_all = true;
  std::string sandwich_detail;

  for (std::size_t b = 0; b < cfg.betas.size(); ++b) {
    const ModelParams p(cfg.field, cfg.betas[b], cfg.side());
    const double beta = p.beta();
    const auto minus = SpinConfiguration::uniform(p.lattice(), Spin::Minus);
    const auto member = [p](const SpinConfiguration& s) { return s.count(Spin::Plus) == 0 && in_valley_minus(s, p); };
    const auto cc = [&] {
      try {
        return enumerate_closure({minus}, member, p);
      } catch (const ClosureOverflow& e) {
        throw ConfigError("valley closure exceeded " + std::to_string(e.cap()) + " states at L=" +
                          std::to_string(cfg.side()) + "; use a smaller L");
      }
    }();
    const auto bplus = cc.select([p](const SpinConfiguration& s) { return boundary_Bplus(s, p); });
    const auto ra = cc.select([p](const SpinConfiguration& s) { return is_attached(classify(s, p).label); });
    if (ra.empty()) throw std::runtime_error("valley closure contains no attached droplet");
    const std::size_t root = *cc.find(minus);

    const auto cap = capacity_exact(cc.chain, {root}, bplus);
    const double log_norm = cc.chain.log_mu(ra.front()) + std::log(static_cast<double>(p.sites()));
    const double target = 4.0 * (2 * p.critical_side() + 1);
    const double ratio = std::exp(cap.log_value - log_norm);

    const auto law = exit_distribution(cc.chain, root, bplus, cap);
    std::vector<char> in_ra(cc.chain.size(), 0);
    for (auto i : ra) in_ra[i] = 1;
    double sp = 0.0;
    double mass_ra = 0.0;
    for (std::size_t j = 0; j < bplus.size(); ++j) {
      if (!in_ra[bplus[j]]) continue;
      mass_ra += law[j];
      sp = std::max(sp, std::abs(static_cast<double>(ra.size()) * law[j] - 1.0));
    }

    const auto flow = spiral_flow(cc, p);
    const double lower = thomson_lower(cc.chain, flow);
    std::vector<double> f(cc.chain.size(), 1.0);
    for (auto i : bplus) f[i] = 0.0;
    const double upper = dirichlet_upper(cc.chain, {root}, bplus, f);
    const double exact = cap.value;
    const bool sandwich = lower <= exact * (1 + 1e-9) && exact <= upper * (1 + 1e-9);
    sandwich_all = sandwich_all && sandwich;
    sandwich_detail += (b ? " " : "") + number(beta) + ":" + (sandwich ? "ok" : "violated");

    const auto rep = regime_report(p);
    deviation[b] = std::abs(ratio / target - 1.0);
    spread[b] = sp;
    spread_bound[b] = 10.0 * (rep.epsilon.value + rep.delta1.value);

    const double scale = std::exp(log_norm);
    c.add("capacity", beta, "states", static_cast<double>(cc.chain.size()));
    c.add("capacity", beta, "bplus_states", static_cast<double>(bplus.size()));
    c.add("capacity", beta, "ra_states", static_cast<double>(ra.size()));
    c.add("capacity", beta, "cap_over_mu_star_volume", ratio);
    c.add("capacity", beta, "target", target);
    c.add("capacity", beta, "ratio_over_target", ratio / target);
    c.add("capacity", beta, "deviation", deviation[b]);
    c.add("capacity", beta, "thomson_lower_over_mu_star_volume", lower / scale);
    c.add("capacity", beta, "dirichlet_upper_over_mu_star_volume", upper / scale);
    c.add("capacity", beta, "sandwich_holds", sandwich ? 1.0 : 0.0);
    c.add("capacity", beta, "exit_mass_ra", mass_ra);
    c.add("capacity", beta, "exit_spread_ra", sp);
    c.add("capacity", beta, "exit_spread_bound", spread_bound[b]);
    c.add("capacity", beta, "solver_residual", cap.escape.report.residual);
    c.add("capacity", beta, "flux_mismatch", cap.flux_mismatch);
  }

  const std::size_t k = check_index(cfg);
  const std::size_t first = beta_order(cfg).front();
  c.check("sandwich thomson <= exact <= dirichlet", sandwich_all, sandwich_detail);
  c.check("|ratio/target - 1| <= 0.25 at beta=" + number(cfg.betas[k]), deviation[k] <= 0.25, fmt(deviation[k]));
  if (first != k) {
    c.check("deviation at beta=" + number(cfg.betas[k]) + " below beta=" + number(cfg.betas[first]),
            deviation[k] < deviation[first], fmt(deviation[k]) + " vs " + fmt(deviation[first]));
  }
  c.check("exit spread <= 10(eps + delta1) at beta=" + number(cfg.betas[k]), spread[k] <= spread_bound[k],
          fmt(spread[k]) + " vs " + fmt(spread_bound[k]));
  return result;
}

ExperimentResult run_eigen_bound(const ExperimentConfig& cfg) {
  auto result = start_result(cfg);
  Collector c(result);
  int violations = 0;
  int extended_violations = 0;
  double closed_form_error = 0.0;
  for (double eps : {0.5, 0.1, 0.01, 1.5}) {
    for (double theta : {0.1, 1.0}) {
      for (int n = 1; n <= 6; ++n) {
        const double f0 = laplace_functional(n, eps, theta);
        const double bound = std::pow(eps, n) / theta;
        const std::string key = "n=" + std::to_string(n) + ";eps=" + number(eps) + ";theta=" + number(theta);
        c.add("grid", std::nullopt, key + ":f0", f0);
        c.add("grid", std::nullopt, key + ":bound", bound);
        const bool ok = f0 <= bound;
        (eps > 1.0 ? extended_violations : violations) += !ok;
        if (n == 1) closed_form_error = std::max(closed_form_error, std::abs(f0 - eps / (eps + theta)));
      }
    }
  }
  c.add("eigen", std::nullopt, "violations", violations);
  c.add("eigen", std::nullopt, "violations_eps_above_one", extended_violations);
  c.add("eigen", std::nullopt, "n1_closed_form_error", closed_form_error);
  c.check("f(0) <= eps^n/theta on the grid", violations == 0, std::to_string(violations) + " violations");
  c.check("f(0) <= eps^n/theta at eps=1.5", extended_violations == 0,
          std::to_string(extended_violations) + " violations");
  c.check("n=1 matches eps/(eps+theta) to 1e-12", closed_form_error <= 1e-12, fmt(closed_form_error));
  return result;
}

ExperimentResult run_regime_scan(const ExperimentConfig& cfg) {
  auto result = start_result(cfg);
  Collector c(result);
  bool monotone = true;
  std::string detail;
  const auto order = beta_order(cfg);
  for (std::size_t li = 0; li < cfg.sides.size(); ++li) {
    const std::size_t base = li * cfg.betas.size();
    for (std::size_t k = 1; k < order.size(); ++k) {
      const auto& lo = result.regimes[base + order[k - 1]];
      const auto& hi = result.regimes[base + order[k]];
      if (!(hi.beta > lo.beta)) continue;
      const auto a = lo.entries();
      const auto z = hi.entries();
      for (std::size_t s = 0; s < a.size(); ++s) {
        if (!(z[s]->log_value < a[s]->log_value)) {
          monotone = false;
          detail += "L=" + std::to_string(lo.side) + " " + a[s]->name + " ";
        }
      }
    }
  }
  c.check("every scale strictly decreasing in beta", monotone, monotone ? "ok" : detail);
  return result;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, unsigned threads) {
  if (threads == 0) threads = worker_count();
  switch (cfg.scenario) {
    case Scenario::NucleationGate: return run_nucleation_gate(cfg, threads);
    case Scenario::Route: return run_route(cfg, threads);
    case Scenario::TraceLimit: return run_trace_limit(cfg, threads);
    case Scenario::CapacityExact: return run_capacity_exact(cfg);
    case Scenario::EigenBound: return run_eigen_bound(cfg);
    case Scenario::RegimeScan: return run_regime_scan(cfg);
  }
  throw ConfigError("unknown scenario");
}

void write_summary_csv(std::ostream& os, const ExperimentResult& r) {
  const auto opt = [](const std::optional<double>& v) { return v ? number(*v) : std::string(); };
  os << "section,beta,key,value,ci_lo,ci_hi\n";
  for (const auto& row : r.summary) {
    os << row.section << ',' << opt(row.beta) << ',' << row.key << ',' << (row.text ? *row.text : number(row.value))
       << ',' << opt(row.ci_lo) << ',' << opt(row.ci_hi) << '\n';
  }
  for (const auto& ch : r.checks) {
    os << "check,," << ch.name << ',' << (ch.pass ? "pass" : "fail") << ",,\n";
  }
}

void write_regime_csv(std::ostream& os, const std::vector<RegimeReport>& regimes) {
  os << "L,h,beta,scale,value,log_value,ok\n";
  for (const auto& rep : regimes) {
    for (const Scale* s : rep.entries()) {
      os << rep.side << ',' << number(rep.field) << ',' << number(rep.beta) << ',' << s->name << ','
         << number(s->value) << ',' << number(s->log_value) << ',' << (s->value < 0.1 ? 1 : 0) << '\n';
    }
  }
}

void write_outputs(const ExperimentResult& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto open = [&](const char* name) {
    std::ofstream f(dir / name, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + (dir / name).string());
    return f;
  };
  {
    auto f = open("runs.jsonl");
    for (const auto& run : r.runs) f << to_json_line(run) << '\n';
  }
  {
    auto f = open("summary.csv");
    write_summary_csv(f, r);
  }
  {
    auto f = open("regime.csv");
    write_regime_csv(f, r.regimes);
  }
  if (r.config.scenario == Scenario::TraceLimit) {
    auto f = open("rates.csv");
    write_rate_csv(f, r.rates);
  }
}

}  // namespace bclab
