// msm: simulate cohorts, compute truth, test, estimate and evaluate.
//
//   msm <simulate|truth|test|estimate|evaluate|pipeline> --config run.ini [--seed N] [--out DIR] [--jobs N]
//
// Exit codes: 0 success, 2 invalid input or missing upstream stage, 3 some
// test did not converge (outputs and manifest are still written), 1 anything
// unexpected.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "msm/msm.hpp"

namespace fs = std::filesystem;
using namespace msm;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInvalid = 2;
constexpr int kExitNotConverged = 3;

struct StageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ------------------------------------------------------------------ config

struct RunConfig {
  StudyConfig study;
  std::optional<char> frailty_name;
  std::vector<TestMethod> methods{TestMethod::cox, TestMethod::logrank};
  int grid_points = 800;
  std::string out = "msm_out";
  bool jump_times = false;
  std::string text;  // resolved configuration, written next to the outputs
};

struct Field {
  std::string path;
  std::vector<std::string> values;

  [[noreturn]] void fail(const std::string& what) const { throw ValidationError(path + ": " + what); }

  const std::string& one() const {
    if (values.size() != 1) fail("expected a single value");
    return values.front();
  }
  double number() const {
    try {
      return detail::parse_double(one(), path);
    } catch (const ValidationError&) {
      fail("expected a number, got '" + one() + "'");
    }
  }
  std::vector<double> numbers() const {
    std::vector<double> out;
    for (const auto& v : values) {
      try {
        out.push_back(detail::parse_double(v, path));
      } catch (const ValidationError&) {
        fail("expected numbers, got '" + v + "'");
      }
    }
    return out;
  }
  template <class Int>
  Int integer() const {
    try {
      return detail::parse_int<Int>(one(), path);
    } catch (const ValidationError&) {
      fail("expected an integer, got '" + one() + "'");
    }
  }
  bool boolean() const {
    const auto& v = one();
    if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "off" || v == "no") return false;
    fail("expected true or false, got '" + v + "'");
  }
};

Transition parse_transition(const std::string& s, const Field& f) {
  // accepts 1->2, 1-2 and 12
  std::string digits;
  for (char c : s)
    if (c != '-' && c != '>') digits += c;
  if (digits.size() != 2 || !std::isdigit(static_cast<unsigned char>(digits[0])) ||
      !std::isdigit(static_cast<unsigned char>(digits[1])))
    f.fail("expected a transition like 2->1, got '" + s + "'");
  const Transition tr{digits[0] - '0', digits[1] - '0'};
  if (!StateSpace::illness_death_with_recovery().permits(tr)) f.fail("transition " + to_string(tr) + " is not permitted");
  return tr;
}

std::string join(const std::vector<std::string>& v, const char* sep = " ") {
  std::string out;
  for (const auto& s : v) out += (out.empty() ? "" : sep) + s;
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string part; std::getline(ss, part, sep);)
    if (!part.empty()) out.push_back(part);
  return out;
}

std::string label_of(const RunConfig& rc) {
  std::string l = to_string(rc.study.model.setting.kind);
  if (rc.frailty_name) l += std::string("_") + *rc.frailty_name;
  return l;
}

std::string describe(const RunConfig& rc) {
  const auto& st = rc.study;
  const auto& set = st.model.setting;
  const auto& cen = st.model.censoring;
  std::ostringstream os;
  auto num = [](double x) { return detail::format_double(x); };
  auto nums = [&](const std::vector<double>& v) {
    std::vector<std::string> s;
    for (double x : v) s.push_back(num(x));
    return join(s);
  };
  os << "[setting]\nkind = " << to_string(set.kind) << '\n';
  if (rc.frailty_name) os << "frailty = " << *rc.frailty_name << '\n';
  if (set.kind == SettingKind::partial_frailty) {
    std::vector<std::string> trs;
    for (const auto& tr : set.frailty_transitions) trs.push_back(to_string(tr));
    os << "frailty_transitions = " << join(trs) << '\n';
  }
  if (set.kind == SettingKind::mixed) os << "changepoint = " << num(set.changepoint) << '\n';
  if (set.kind == SettingKind::pathological) {
    os << "path_threshold = " << num(set.path_threshold) << "\nz_default = " << num(set.z_default) << '\n';
    std::vector<std::string> zs;
    for (const auto& [tr, z] : set.z_overrides) zs.push_back(to_string(tr) + ":" + num(z));
    os << "z_overrides = " << join(zs) << '\n';
  }
  os << "\n[params]\n";
  for (const auto& tr : st.model.space.transitions()) {
    const auto h = st.model.params.at(tr);
    os << tr.from << '-' << tr.to << " = " << num(h.a) << ' ' << num(h.b) << '\n';
  }
  os << "\n[cohort]\nn = " << st.cohort.n << "\nstart_probs = " << nums(st.cohort.start_probs) << '\n';
  os << "\n[censoring]\nenabled = " << (cen.enabled ? "true" : "false") << "\nrate = " << num(cen.rate)
     << "\nthreshold = " << num(cen.threshold) << "\nuniform_lo = " << num(cen.uniform_lo)
     << "\nuniform_hi = " << num(cen.uniform_hi) << "\ntau = " << num(cen.tau) << '\n';
  std::vector<std::string> ests;
  for (auto e : st.estimators) ests.push_back(to_string(e));
  os << "\n[study]\nseed = " << st.cohort.seed << "\nreplicates = " << st.replicates
     << "\ntruth_paths = " << st.truth_paths << "\nstarts = " << nums(st.starts)
     << "\ngrid_points = " << rc.grid_points << "\nalpha = " << num(st.alpha) << "\nestimators = " << join(ests)
     << '\n';
  std::vector<std::string> ms;
  for (auto m : rc.methods) ms.push_back(m == TestMethod::cox ? "cox" : "logrank");
  os << "\n[tests]\nmethods = " << join(ms) << "\nn_bootstrap = " << st.logrank.n_bootstrap
     << "\ngrid_size = " << st.logrank.grid_size << "\nmin_weight = " << num(st.logrank.min_weight)
     << "\ncox_tolerance = " << num(st.cox.score_tolerance) << "\ncox_max_iterations = " << st.cox.max_iterations
     << '\n';
  os << "\n[output]\njump_times = " << (rc.jump_times ? "true" : "false") << '\n';
  return os.str();
}

RunConfig load_config(const std::string& path) {
  if (!fs::exists(path)) throw ValidationError("config: file '" + path + "' not found");
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigINI().from_file(path);
  } catch (const CLI::Error& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }

  std::map<std::string, Field> fields;
  for (const auto& it : items) {
    if (it.name == "--" || it.name == "++" || it.name.empty()) continue;
    std::string p;
    for (const auto& parent : it.parents) p += parent + ".";
    p += it.name;
    if (it.parents.empty()) throw ValidationError(p + ": keys must sit in a [section]");
    if (fields.count(p)) throw ValidationError(p + ": given more than once");
    fields[p] = Field{p, it.inputs};
  }
  std::set<std::string> used;
  auto get = [&](const std::string& p) -> const Field* {
    auto it = fields.find(p);
    if (it == fields.end()) return nullptr;
    used.insert(p);
    return &it->second;
  };

  RunConfig rc;
  SettingSpec set;
  if (const auto* f = get("setting.kind")) {
    const auto k = parse_setting_kind(f->one());
    if (!k) f->fail("unknown setting '" + f->one() + "'");
    set = SettingSpec::make(*k);
  }
  if (const auto* f = get("setting.frailty")) {
    const auto& v = f->one();
    const auto fp = v.size() == 1 ? frailty_preset(v[0]) : std::nullopt;
    if (!fp) f->fail("frailty preset must be a, b or c");
    set.frailty = fp;
    rc.frailty_name = v[0];
  }
  if (const auto* f = get("setting.frailty_transitions")) {
    set.frailty_transitions.clear();
    for (const auto& v : f->values) set.frailty_transitions.push_back(parse_transition(v, *f));
  }
  if (const auto* f = get("setting.changepoint")) set.changepoint = f->number();
  if (const auto* f = get("setting.path_threshold")) set.path_threshold = f->number();
  if (const auto* f = get("setting.z_default")) set.z_default = f->number();
  if (const auto* f = get("setting.z_overrides")) {
    set.z_overrides.clear();
    for (const auto& v : f->values) {
      const auto colon = v.find(':');
      if (colon == std::string::npos) f->fail("expected entries like 2->1:3.0, got '" + v + "'");
      Field z{f->path, {v.substr(colon + 1)}};
      set.z_overrides[parse_transition(v.substr(0, colon), *f)] = z.number();
    }
  }
  try {
    set.validate();
  } catch (const ValidationError& e) {
    throw ValidationError(std::string("setting: ") + e.what());
  }

  CensoringSpec cen;
  if (const auto* f = get("censoring.enabled")) cen.enabled = f->boolean();
  if (const auto* f = get("censoring.rate")) cen.rate = f->number();
  if (const auto* f = get("censoring.threshold")) cen.threshold = f->number();
  if (const auto* f = get("censoring.uniform_lo")) cen.uniform_lo = f->number();
  if (const auto* f = get("censoring.uniform_hi")) cen.uniform_hi = f->number();
  if (const auto* f = get("censoring.tau")) cen.tau = f->number();
  try {
    cen.validate();
  } catch (const ValidationError& e) {
    throw ValidationError(std::string("censoring: ") + e.what());
  }

  auto& st = rc.study;
  st.model = SimulationModel::make(set, cen);
  for (const auto& [p, f] : fields) {
    if (p.rfind("params.", 0) != 0) continue;
    used.insert(p);
    const auto tr = parse_transition(p.substr(7), f);
    const auto v = f.numbers();
    if (v.size() != 2 || !(v[0] > 0.0) || !(v[1] > 0.0)) f.fail("expected two positive numbers: scale a and shape b");
    st.model.params.set(tr, {v[0], v[1]});
  }

  if (const auto* f = get("cohort.n")) st.cohort.n = f->integer<int>();
  if (const auto* f = get("cohort.start_probs")) st.cohort.start_probs = f->numbers();
  try {
    st.cohort.validate(st.model.space);
  } catch (const ValidationError& e) {
    throw ValidationError(std::string("cohort: ") + e.what());
  }

  if (const auto* f = get("study.seed")) st.cohort.seed = f->integer<std::uint64_t>();
  if (const auto* f = get("study.replicates")) {
    st.replicates = f->integer<int>();
    if (st.replicates < 1) f->fail("must be at least 1");
  }
  if (const auto* f = get("study.truth_paths")) {
    st.truth_paths = f->integer<std::uint64_t>();
    if (st.truth_paths < 1) f->fail("must be at least 1");
  }
  if (const auto* f = get("study.starts")) {
    st.starts = f->numbers();
    if (st.starts.empty()) f->fail("needs at least one starting time");
  }
  for (double s : st.starts)
    if (!(s >= 0.0) || !(s < cen.tau)) throw ValidationError("study.starts: starting times must lie in [0, tau)");
  if (const auto* f = get("study.grid_points")) {
    rc.grid_points = f->integer<int>();
    if (rc.grid_points < 2) f->fail("must be at least 2");
  }
  st.grid = evaluation_grid(cen.tau, rc.grid_points);
  if (const auto* f = get("study.alpha")) {
    st.alpha = f->number();
    if (!(st.alpha > 0.0 && st.alpha < 1.0)) f->fail("must lie in (0, 1)");
  }
  if (const auto* f = get("study.estimators")) {
    st.estimators.clear();
    for (const auto& v : f->values) {
      const auto e = parse_estimator(v);
      if (!e) f->fail("unknown estimator '" + v + "' (aj, lmaj, haj_lr, haj_cox)");
      if (!st.needs(*e)) st.estimators.push_back(*e);
    }
    if (st.estimators.empty()) f->fail("needs at least one estimator");
    std::sort(st.estimators.begin(), st.estimators.end());
  }
  if (const auto* f = get("study.jobs")) st.jobs = std::max(f->integer<int>(), 1);

  if (const auto* f = get("tests.methods")) {
    rc.methods.clear();
    for (const auto& v : f->values) {
      if (v == "cox") rc.methods.push_back(TestMethod::cox);
      else if (v == "logrank") rc.methods.push_back(TestMethod::logrank);
      else f->fail("unknown test method '" + v + "' (cox, logrank)");
    }
  }
  if (const auto* f = get("tests.n_bootstrap")) {
    st.logrank.n_bootstrap = f->integer<int>();
    if (st.logrank.n_bootstrap < 1) f->fail("must be at least 1");
  }
  if (const auto* f = get("tests.grid_size")) {
    st.logrank.grid_size = f->integer<int>();
    if (st.logrank.grid_size < 1) f->fail("must be at least 1");
  }
  if (const auto* f = get("tests.min_weight")) st.logrank.min_weight = f->number();
  if (const auto* f = get("tests.cox_tolerance")) {
    st.cox.score_tolerance = f->number();
    if (!(st.cox.score_tolerance > 0.0)) f->fail("must be positive");
  }
  if (const auto* f = get("tests.cox_max_iterations")) {
    st.cox.max_iterations = f->integer<int>();
    if (st.cox.max_iterations < 1) f->fail("must be at least 1");
  }
  if (const auto* f = get("output.dir")) rc.out = f->one();
  if (const auto* f = get("output.jump_times")) rc.jump_times = f->boolean();

  for (const auto& [p, f] : fields)
    if (!used.count(p)) throw ValidationError(p + ": unknown key");
  return rc;
}

// ------------------------------------------------------------------ files

std::string hex64(std::uint64_t x) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(x));
  return buf;
}

// FNV-1a; only used to fingerprint outputs in the manifest
std::uint64_t fnv1a(const std::string& bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw StageError("cannot read " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& content) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw ValidationError("cannot write " + p.string());
  os << content;
  if (!os) throw ValidationError("write failed for " + p.string());
}

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec || !fs::is_directory(p)) throw ValidationError("output directory " + p.string() + " is not writable");
  const auto probe = p / ".msm_write_probe";
  {
    std::ofstream os(probe);
    if (!os) throw ValidationError("output directory " + p.string() + " is not writable");
  }
  fs::remove(probe, ec);
}

std::string rep_name(int r) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "rep_%04d.csv", r);
  return buf;
}

// key=value lines, one section of keys per stage
class Manifest {
 public:
  explicit Manifest(fs::path file) : file_(std::move(file)) {
    std::ifstream is(file_);
    for (std::string line; std::getline(is, line);) {
      const auto eq = line.find('=');
      if (eq != std::string::npos) kv_[line.substr(0, eq)] = line.substr(eq + 1);
    }
  }
  std::optional<std::string> get(const std::string& k) const {
    auto it = kv_.find(k);
    if (it == kv_.end()) return std::nullopt;
    return it->second;
  }
  void set(const std::string& k, const std::string& v) { kv_[k] = v; }
  void clear_stage(const std::string& stage) {
    for (auto it = kv_.begin(); it != kv_.end();)
      it = it->first.rfind(stage + ".", 0) == 0 ? kv_.erase(it) : std::next(it);
  }
  void save() {
    bool partial = false;
    for (const auto& [k, v] : kv_)
      if (k.size() > 7 && k.compare(k.size() - 7, 7, ".status") == 0 && v != "complete") partial = true;
    kv_["status"] = partial ? "partial" : "complete";
    std::string out;
    for (const auto& [k, v] : kv_) out += k + "=" + v + "\n";
    write_file(file_, out);
  }

 private:
  fs::path file_;
  std::map<std::string, std::string> kv_;
};

// the part of the configuration that determines the cohorts
std::string simulation_digest(const RunConfig& rc) {
  const auto text = rc.text;
  const auto cut = text.find("\n[study]");
  const auto& st = rc.study;
  return hex64(fnv1a(text.substr(0, cut) + "seed=" + std::to_string(st.cohort.seed) +
                     ";replicates=" + std::to_string(st.replicates)));
}

struct Context {
  RunConfig rc;
  fs::path out;
  Manifest manifest;
};

void require_upstream(const Context& cx, const std::string& stage, const std::string& needs) {
  const auto status = cx.manifest.get(needs + ".status");
  if (!status) throw StageError("stage '" + stage + "' needs the outputs of '" + needs + "' in " + cx.out.string() +
                                "; run 'msm " + needs + "' first");
  if (needs == "simulate" && cx.manifest.get("simulate.config") != simulation_digest(cx.rc))
    throw StageError("stage '" + stage + "': cohorts in " + cx.out.string() +
                     " were simulated with a different configuration; rerun 'msm simulate'");
}

struct StoredCohort {
  int replicate;
  std::uint64_t seed;
  fs::path file;
};

std::vector<StoredCohort> stored_cohorts(const Context& cx, const std::string& stage) {
  require_upstream(cx, stage, "simulate");
  const auto seeds = cx.out / "cohorts" / "seeds.csv";
  if (!fs::exists(seeds)) throw StageError("stage '" + stage + "': missing " + seeds.string());
  std::istringstream is(read_file(seeds));
  std::string line;
  std::getline(is, line);
  std::vector<StoredCohort> out;
  while (std::getline(is, line)) {
    const auto f = split(line, ',');
    if (f.size() != 4) throw StageError("malformed " + seeds.string());
    StoredCohort c{detail::parse_int<int>(f[0], "seeds.csv"), detail::parse_int<std::uint64_t>(f[1], "seeds.csv"),
                   cx.out / "cohorts" / f[2]};
    if (!fs::exists(c.file)) throw StageError("stage '" + stage + "': missing cohort file " + c.file.string());
    out.push_back(c);
  }
  return out;
}

Cohort load_cohort(const Context& cx, const StoredCohort& c) {
  std::istringstream is(read_file(c.file));
  return from_long(read_long_csv(is), cx.rc.study.model.space, cx.rc.study.model.censoring.tau);
}

// ------------------------------------------------------------------ stages

int cmd_simulate(Context& cx) {
  const auto& st = cx.rc.study;
  st.model.validate();
  const auto dir = cx.out / "cohorts";
  ensure_dir(dir);
  const auto grid = st.evaluation_points();
  const int k = st.model.space.size();
  std::vector<std::uint64_t> seeds(static_cast<std::size_t>(st.replicates));
  std::vector<std::string> digests(seeds.size());
  std::vector<std::vector<std::vector<std::uint64_t>>> occ(seeds.size());
  parallel_for(seeds.size(), st.jobs, [&](std::size_t r) {
    CohortSpec spec = st.cohort;
    spec.seed = replicate_seed(st.cohort.seed, r);
    seeds[r] = spec.seed;
    const auto cohort = simulate_cohort(st.model, spec);
    std::ostringstream os;
    write_long_csv(os, to_long(cohort));
    write_file(dir / rep_name(static_cast<int>(r)), os.str());
    digests[r] = hex64(fnv1a(os.str()));
    occ[r] = occupancy_counts(cohort, grid);
  });

  std::ostringstream seeds_csv;
  seeds_csv << "replicate,seed,file,digest\n";
  std::uint64_t all = fnv1a("");
  for (std::size_t r = 0; r < seeds.size(); ++r) {
    seeds_csv << r << ',' << seeds[r] << ',' << rep_name(static_cast<int>(r)) << ',' << digests[r] << '\n';
    all = fnv1a(digests[r], all);
  }
  write_file(dir / "seeds.csv", seeds_csv.str());

  std::ostringstream oc;
  oc << "t";
  for (int j = 1; j <= k; ++j) oc << ",state_" << j;
  oc << '\n';
  for (std::size_t g = 0; g < grid.size(); ++g) {
    oc << detail::format_double(grid[g]);
    for (int j = 0; j < k; ++j) {
      double sum = 0.0;
      for (const auto& o : occ) sum += static_cast<double>(o[g][static_cast<std::size_t>(j)]);
      oc << ',' << detail::format_double(sum / static_cast<double>(occ.size()));
    }
    oc << '\n';
  }
  write_file(cx.out / "occupancy.csv", oc.str());

  cx.manifest.clear_stage("simulate");
  cx.manifest.set("simulate.status", "complete");
  cx.manifest.set("simulate.config", simulation_digest(cx.rc));
  cx.manifest.set("simulate.master_seed", std::to_string(st.cohort.seed));
  cx.manifest.set("simulate.replicates", std::to_string(st.replicates));
  cx.manifest.set("simulate.digest", hex64(all));
  cx.manifest.save();
  std::cout << "simulate: " << st.replicates << " cohorts in " << dir.string() << ", digest " << hex64(all) << '\n';
  return kExitOk;
}

int cmd_truth(Context& cx) {
  const auto& st = cx.rc.study;
  st.model.validate();
  ensure_dir(cx.out);
  auto table = compute_truth(st.model, st.cohort.start_probs, st.truth_paths, st.starts, st.evaluation_points(),
                             truth_seed(st.cohort.seed), st.jobs);
  table.setting = cx.rc.study.label;
  std::ostringstream os;
  write_truth_csv(os, table);
  write_file(cx.out / "truth.csv", os.str());
  cx.manifest.clear_stage("truth");
  cx.manifest.set("truth.status", "complete");
  cx.manifest.set("truth.paths", std::to_string(st.truth_paths));
  cx.manifest.set("truth.digest", hex64(fnv1a(os.str())));
  cx.manifest.save();
  std::cout << "truth: " << st.truth_paths << " paths, " << table.curves.size() << " curves\n";
  return kExitOk;
}

bool runs(const RunConfig& rc, TestMethod m) {
  return std::find(rc.methods.begin(), rc.methods.end(), m) != rc.methods.end();
}

int cmd_test(Context& cx) {
  const auto& st = cx.rc.study;
  const auto cohorts = stored_cohorts(cx, "test");
  const auto dir = cx.out / "tests";
  ensure_dir(dir);
  MarkovTestOptions opt;
  opt.alpha = st.alpha;
  opt.run_cox = runs(cx.rc, TestMethod::cox);
  opt.run_logrank = runs(cx.rc, TestMethod::logrank);
  opt.cox = st.cox;
  opt.logrank = st.logrank;
  std::vector<ReplicateLog> log(cohorts.size());
  parallel_for(cohorts.size(), st.jobs, [&](std::size_t i) {
    const auto& c = cohorts[i];
    auto o = opt;
    o.logrank.seed = bootstrap_seed(c.seed);
    const auto rep = run_markov_tests(load_cohort(cx, c), o);
    std::ostringstream os;
    write_test_report(os, rep);
    write_file(dir / rep_name(c.replicate), os.str());
    auto& l = log[i];
    l.replicate = c.replicate;
    l.seed = c.seed;
    l.m_lr = rep.selected_logrank;
    l.m_cox = rep.selected_cox;
    for (const auto& r : rep.cox) l.not_converged += r.flag == TestFlag::not_converged;
    for (const auto& r : rep.logrank) l.not_converged += r.flag == TestFlag::not_converged;
  });
  std::ostringstream os;
  write_selection_log(os, log);
  write_file(cx.out / "selection.csv", os.str());

  int not_converged = 0;
  for (const auto& l : log) not_converged += l.not_converged;
  std::vector<std::string> ms;
  if (opt.run_cox) ms.push_back("cox");
  if (opt.run_logrank) ms.push_back("logrank");
  cx.manifest.clear_stage("test");
  cx.manifest.set("test.status", not_converged ? "not_converged" : "complete");
  cx.manifest.set("test.methods", join(ms));
  cx.manifest.set("test.not_converged", std::to_string(not_converged));
  cx.manifest.save();
  std::cout << "test: " << cohorts.size() << " cohorts, " << not_converged << " tests not converged\n";
  return not_converged ? kExitNotConverged : kExitOk;
}

NonMarkovSet parse_set(const std::string& s, const std::string& ctx) {
  std::vector<Transition> trs;
  Field f{ctx, {}};
  for (const auto& t : split(s, ';')) trs.push_back(parse_transition(t, f));
  return NonMarkovSet(std::move(trs));
}

std::map<int, ReplicateLog> read_selection(const Context& cx) {
  require_upstream(cx, "estimate", "test");
  const auto methods = split(cx.manifest.get("test.methods").value_or(""), ' ');
  auto has = [&](const char* m) { return std::find(methods.begin(), methods.end(), m) != methods.end(); };
  if (cx.rc.study.needs(EstimatorKind::haj_cox) && !has("cox"))
    throw StageError("stage 'estimate': haj_cox needs the cox test; rerun 'msm test' with tests.methods including cox");
  if (cx.rc.study.needs(EstimatorKind::haj_lr) && !has("logrank"))
    throw StageError("stage 'estimate': haj_lr needs the logrank test; rerun 'msm test' with it");
  const auto file = cx.out / "selection.csv";
  if (!fs::exists(file)) throw StageError("stage 'estimate': missing " + file.string());
  std::istringstream is(read_file(file));
  std::string line;
  std::getline(is, line);
  std::map<int, ReplicateLog> out;
  while (std::getline(is, line)) {
    // empty sets leave empty fields, so split keeping them
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string part; std::getline(ss, part, ',');) f.push_back(part);
    if (f.size() != 5) throw StageError("malformed " + file.string());
    ReplicateLog l;
    l.replicate = detail::parse_int<int>(f[0], "selection.csv");
    l.seed = detail::parse_int<std::uint64_t>(f[1], "selection.csv");
    l.m_lr = parse_set(f[2], "selection.csv");
    l.m_cox = parse_set(f[3], "selection.csv");
    out[l.replicate] = l;
  }
  return out;
}

int cmd_estimate(Context& cx) {
  const auto& st = cx.rc.study;
  const auto cohorts = stored_cohorts(cx, "estimate");
  const bool hybrid = st.needs(EstimatorKind::haj_lr) || st.needs(EstimatorKind::haj_cox);
  std::map<int, ReplicateLog> selection;
  if (hybrid) selection = read_selection(cx);
  const auto dir = cx.out / "estimates";
  ensure_dir(dir);
  const auto grid = st.evaluation_points();
  const double z = normal_quantile(1.0 - st.alpha / 2.0);
  parallel_for(cohorts.size(), st.jobs, [&](std::size_t i) {
    const auto& c = cohorts[i];
    NonMarkovSet m_lr, m_cox;
    if (hybrid) {
      auto it = selection.find(c.replicate);
      if (it == selection.end())
        throw StageError("stage 'estimate': no test selection for replicate " + std::to_string(c.replicate));
      m_lr = it->second.m_lr;
      m_cox = it->second.m_cox;
    }
    const auto cohort = load_cohort(cx, c);
    const auto full = nelson_aalen(cohort);
    std::ostringstream os;
    os << kCurveHeader << '\n';
    for (int h : cohort.state_space().transient_states())
      for (double s : st.starts) {
        const auto est = estimate_all(cohort, full, h, s, st.estimators, m_lr, m_cox);
        for (const auto& [kind, curve] : est.curves)
          if (curve) write_curve_rows(os, to_string(kind), *curve, grid, z, cx.rc.jump_times);
      }
    write_file(dir / rep_name(c.replicate), os.str());
  });
  std::vector<std::string> ests;
  for (auto e : st.estimators) ests.push_back(to_string(e));
  cx.manifest.clear_stage("estimate");
  cx.manifest.set("estimate.status", "complete");
  cx.manifest.set("estimate.estimators", join(ests));
  cx.manifest.save();
  std::cout << "estimate: " << cohorts.size() << " cohorts, estimators " << join(ests) << '\n';
  return kExitOk;
}

TruthTable load_truth(const Context& cx, const std::string& stage) {
  require_upstream(cx, stage, "truth");
  const auto file = cx.out / "truth.csv";
  if (!fs::exists(file)) throw StageError("stage '" + stage + "': missing " + file.string());
  std::istringstream is(read_file(file));
  auto t = read_truth_csv(is, cx.rc.study.model.space.size());
  t.setting = cx.rc.study.label;
  return t;
}

const char* kMeasures[] = {"bias", "variance", "rmse", "coverage"};

double measure(const MetricPoint& p, int m) {
  switch (m) {
    case 0: return p.bias;
    case 1: return p.variance;
    case 2: return p.rmse;
    default: return p.coverage;
  }
}

void write_evaluation_outputs(Context& cx, const StudyResult& res) {
  const auto& st = cx.rc.study;
  std::ostringstream os;
  write_evaluation_csv(os, evaluation_rows(st, res));
  write_file(cx.out / "evaluation.csv", os.str());

  // one file per measure: measure against t, one column per estimator
  const auto plots = cx.out / "plots";
  ensure_dir(plots);
  const int k = st.model.space.size();
  for (int m = 0; m < 4; ++m) {
    std::ostringstream pc;
    pc << "from,to,s,t";
    for (auto e : st.estimators) pc << ',' << to_string(e);
    pc << '\n';
    for (int h : st.model.space.transient_states())
      for (int j = 1; j <= k; ++j)
        for (std::size_t si = 0; si < st.starts.size(); ++si) {
          const auto& first = res.metrics.at(CurveKey{st.estimators.front(), h, j, si});
          for (std::size_t g = 0; g < first.size(); ++g) {
            pc << h << ',' << j << ',' << detail::format_double(st.starts[si]) << ','
               << detail::format_double(first[g].t);
            for (auto e : st.estimators) {
              const auto& p = res.metrics.at(CurveKey{e, h, j, si})[g];
              pc << ',';
              if (p.n_valid > 0) pc << detail::format_double(measure(p, m));
            }
            pc << '\n';
          }
        }
    write_file(plots / (std::string(kMeasures[m]) + ".csv"), pc.str());
  }
  cx.manifest.clear_stage("evaluate");
  cx.manifest.set("evaluate.status", "complete");
  cx.manifest.set("evaluate.digest", hex64(fnv1a(os.str())));
}

int cmd_evaluate(Context& cx) {
  const auto& st = cx.rc.study;
  const auto truth = load_truth(cx, "evaluate");
  require_upstream(cx, "evaluate", "estimate");
  if (cx.manifest.get("estimate.estimators") != [&] {
        std::vector<std::string> e;
        for (auto k : st.estimators) e.push_back(to_string(k));
        return join(e);
      }())
    throw StageError("stage 'evaluate': estimates were produced for a different estimator list; rerun 'msm estimate'");
  const auto cohorts = stored_cohorts(cx, "evaluate");
  const auto full_grid = st.evaluation_points();
  const int k = st.model.space.size();

  StudyResult res;
  std::map<CurveKey, MetricAccumulator> acc;
  std::vector<std::vector<double>> grids;
  for (double s : st.starts) grids.push_back(truncate_grid(full_grid, s));
  for (int h : st.model.space.transient_states())
    for (std::size_t si = 0; si < st.starts.size(); ++si) {
      const TruthCurve* tc = truth.find(h, st.starts[si]);
      if (!tc || tc->times != grids[si])
        throw StageError("stage 'evaluate': truth.csv does not match the configured grid; rerun 'msm truth'");
      for (auto e : st.estimators)
        for (int j = 1; j <= k; ++j)
          acc.emplace(CurveKey{e, h, j, si}, MetricAccumulator(grids[si], truth_column(*tc, j), st.alpha));
    }
  std::map<double, std::size_t> start_index;
  for (std::size_t si = 0; si < st.starts.size(); ++si) start_index[st.starts[si]] = si;

  for (const auto& c : cohorts) {
    const auto file = cx.out / "estimates" / rep_name(c.replicate);
    if (!fs::exists(file)) throw StageError("stage 'evaluate': missing " + file.string() + "; rerun 'msm estimate'");
    std::istringstream is(read_file(file));
    std::string line;
    std::getline(is, line);
    if (detail::trim_cr(line) != kCurveHeader) throw StageError("unexpected header in " + file.string());
    // (estimator, from, to, start) -> t -> (estimate, variance)
    std::map<CurveKey, std::map<double, std::pair<double, double>>> rows;
    const std::string ctx = file.filename().string();
    while (std::getline(is, line)) {
      const auto f = detail::split_csv_line(detail::trim_cr(line));
      if (f.size() != 9) throw StageError("malformed row in " + file.string());
      const auto e = parse_estimator(std::string(f[0]));
      const auto s = start_index.find(detail::parse_double(f[3], ctx));
      if (!e || s == start_index.end()) throw StageError("unexpected row in " + file.string());
      rows[CurveKey{*e, detail::parse_int<int>(f[1], ctx), detail::parse_int<int>(f[2], ctx), s->second}]
          [detail::parse_double(f[4], ctx)] = {detail::parse_double(f[5], ctx), detail::parse_double(f[6], ctx)};
    }
    for (auto& [key, a] : acc) {
      auto it = rows.find(key);
      if (it == rows.end()) {
        a.add_missing();
        continue;
      }
      RunEstimate r;
      for (double t : grids[key.start]) {
        auto p = it->second.find(t);
        if (p == it->second.end()) throw StageError("grid point missing in " + file.string());
        r.estimate.push_back(p->second.first);
        r.variance.push_back(p->second.second);
      }
      a.add(r);
    }
  }
  for (auto& [key, a] : acc) res.metrics.emplace(key, a.result());
  write_evaluation_outputs(cx, res);
  cx.manifest.save();
  std::cout << "evaluate: " << cohorts.size() << " replicates, " << res.metrics.size() << " curves\n";
  return kExitOk;
}

// in-memory run of the whole study; per-replicate cohorts and estimates are
// not kept, so desk-scale runs stay small on disk
int cmd_pipeline(Context& cx) {
  const auto& st = cx.rc.study;
  ensure_dir(cx.out);
  int done = 0;
  const auto res = run_study(st, nullptr, [&](const ReplicateLog&) {
    if (++done % 50 == 0) std::cerr << "pipeline: " << done << " of " << st.replicates << " replicates\n";
  });
  std::ostringstream tr;
  write_truth_csv(tr, res.truth);
  write_file(cx.out / "truth.csv", tr.str());
  std::ostringstream sel;
  write_selection_log(sel, res.log);
  write_file(cx.out / "selection.csv", sel.str());

  std::ostringstream ar;
  ar << "from,s,t,mean_landmark_at_risk\n";
  const auto full_grid = st.evaluation_points();
  for (const auto& [key, v] : res.mean_landmark_at_risk) {
    const auto grid = truncate_grid(full_grid, st.starts[key.second]);
    for (std::size_t g = 0; g < v.size(); ++g)
      ar << key.first << ',' << detail::format_double(st.starts[key.second]) << ','
         << detail::format_double(grid[g]) << ',' << detail::format_double(v[g]) << '\n';
  }
  write_file(cx.out / "at_risk.csv", ar.str());

  cx.manifest.clear_stage("pipeline");
  cx.manifest.set("pipeline.status", res.not_converged ? "not_converged" : "complete");
  cx.manifest.set("pipeline.master_seed", std::to_string(st.cohort.seed));
  cx.manifest.set("pipeline.replicates", std::to_string(st.replicates));
  cx.manifest.set("pipeline.not_converged", std::to_string(res.not_converged));
  cx.manifest.set("truth.status", "complete");
  cx.manifest.set("truth.digest", hex64(fnv1a(tr.str())));
  write_evaluation_outputs(cx, res);
  cx.manifest.save();

  std::cout << "pipeline: " << st.replicates << " replicates of " << st.label << "; selected log-rank";
  for (const auto& [t, n] : res.selected_lr) std::cout << ' ' << to_string(t) << ':' << n;
  std::cout << "; selected cox";
  for (const auto& [t, n] : res.selected_cox) std::cout << ' ' << to_string(t) << ':' << n;
  std::cout << "; " << res.not_converged << " tests not converged\n";
  return res.not_converged ? kExitNotConverged : kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transition probability estimation in multi-state models"};
  app.require_subcommand(1, 1);
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> jobs;
  app.add_option("--config", config_path, "INI configuration file")->required();
  app.add_option("--seed", seed, "master seed (overrides study.seed)");
  app.add_option("--out", out, "output directory (overrides output.dir)");
  app.add_option("--jobs", jobs, "worker threads (overrides study.jobs)")->check(CLI::PositiveNumber);

  using Cmd = int (*)(Context&);
  const std::vector<std::tuple<const char*, const char*, Cmd>> commands{
      {"simulate", "simulate one cohort per replicate", cmd_simulate},
      {"truth", "true transition probabilities by Monte Carlo", cmd_truth},
      {"test", "Markov tests per cohort and the selected sets", cmd_test},
      {"estimate", "AJ, LMAJ and HAJ curves per cohort", cmd_estimate},
      {"evaluate", "bias, variance, RMSE and coverage against the truth", cmd_evaluate},
      {"pipeline", "the whole study in one run", cmd_pipeline},
  };
  for (const auto& [name, help, fn] : commands) app.add_subcommand(name, help)->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInvalid;
  }

  try {
    Context cx{load_config(config_path), {}, Manifest({})};
    auto& st = cx.rc.study;
    if (seed) st.cohort.seed = *seed;
    if (jobs) st.jobs = *jobs;
    if (out) cx.rc.out = *out;
    st.label = label_of(cx.rc);
    cx.rc.text = describe(cx.rc);
    cx.out = cx.rc.out;
    ensure_dir(cx.out);
    cx.manifest = Manifest(cx.out / "manifest.txt");
    for (const auto& [name, help, fn] : commands)
      if (app.got_subcommand(name)) {
        const int code = fn(cx);
        write_file(cx.out / "config.ini", cx.rc.text);
        return code;
      }
  } catch (const ValidationError& e) {
    std::cerr << "msm: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const StageError& e) {
    std::cerr << "msm: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const std::exception& e) {
    std::cerr << "msm: internal error: " << e.what() << '\n';
    return 1;
  }
  return kExitInvalid;
}
