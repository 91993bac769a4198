#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "msm/cohort.hpp"
#include "msm/random.hpp"

namespace msm {

struct WeibullHazard {
  double a;  // scale
  double b;  // shape
};

enum class ParamVariant { markov, semi_markov };

/// Weibull intensities alpha(t) = a b t^(b-1) per transition.
class WeibullParams {
 public:
  WeibullParams() = default;
  explicit WeibullParams(ParamVariant variant) : variant_(variant) {}

  /// Estimates bundled for the illness-death model with recovery.
  static WeibullParams preset(ParamVariant variant) {
    WeibullParams p(variant);
    if (variant == ParamVariant::markov) {
      p.set({1, 2}, {0.0057, 0.7050});
      p.set({1, 3}, {0.0003, 0.9449});
      p.set({2, 1}, {0.0058, 0.8327});
      p.set({2, 3}, {0.0017, 0.9253});
    } else {
      p.set({1, 2}, {0.0037, 0.7453});
      p.set({1, 3}, {0.0006, 0.8682});
      p.set({2, 1}, {0.0015, 1.0228});
      p.set({2, 3}, {0.0046, 0.7549});
    }
    return p;
  }

  ParamVariant variant() const { return variant_; }

  void set(Transition tr, WeibullHazard h) {
    if (!(h.a > 0.0) || !(h.b > 0.0) || !std::isfinite(h.a) || !std::isfinite(h.b))
      throw ValidationError("weibull parameters for " + to_string(tr) + " must be positive");
    table_[tr] = h;
  }

  const WeibullHazard& at(Transition tr) const {
    auto it = table_.find(tr);
    if (it == table_.end()) throw ValidationError("no weibull parameters for " + to_string(tr));
    return it->second;
  }

  bool has(Transition tr) const { return table_.count(tr) != 0; }
  const std::map<Transition, WeibullHazard>& table() const { return table_; }

 private:
  ParamVariant variant_ = ParamVariant::markov;
  std::map<Transition, WeibullHazard> table_;
};

enum class SettingKind { markov, semi_markov, frailty, partial_frailty, mixed, pathological };

inline const char* to_string(SettingKind k) {
  switch (k) {
    case SettingKind::markov: return "markov";
    case SettingKind::semi_markov: return "semi_markov";
    case SettingKind::frailty: return "frailty";
    case SettingKind::partial_frailty: return "partial_frailty";
    case SettingKind::mixed: return "mixed";
    case SettingKind::pathological: return "pathological";
  }
  return "";
}

inline std::optional<SettingKind> parse_setting_kind(const std::string& s) {
  for (auto k : {SettingKind::markov, SettingKind::semi_markov, SettingKind::frailty,
                 SettingKind::partial_frailty, SettingKind::mixed, SettingKind::pathological})
    if (s == to_string(k)) return k;
  return std::nullopt;
}

/// Gamma(shape, scale) frailty; mean shape*scale, variance shape*scale^2.
struct FrailtyPreset {
  double shape;
  double scale;
  double mean() const { return shape * scale; }
  double variance() const { return shape * scale * scale; }
};

inline std::optional<FrailtyPreset> frailty_preset(char name) {
  switch (name) {
    case 'a': return FrailtyPreset{2.0, 0.5};
    case 'b': return FrailtyPreset{1.0, 1.0};
    case 'c': return FrailtyPreset{0.5, 2.0};
    default: return std::nullopt;
  }
}

struct SettingSpec {
  SettingKind kind = SettingKind::markov;
  std::optional<FrailtyPreset> frailty;
  std::vector<Transition> frailty_transitions;  // partial_frailty only
  double changepoint = 607.54;                  // mixed only; infinity disables the switch
  double path_threshold = 40.0;                 // pathological only
  double z_default = 0.3;
  std::map<Transition, double> z_overrides{{Transition{2, 1}, 3.0}};

  static SettingSpec make(SettingKind kind, std::optional<FrailtyPreset> frailty = std::nullopt) {
    SettingSpec s;
    s.kind = kind;
    s.frailty = frailty;
    if (kind == SettingKind::partial_frailty) s.frailty_transitions = {Transition{2, 1}};
    return s;
  }

  bool uses_frailty() const {
    return kind == SettingKind::frailty || kind == SettingKind::partial_frailty || kind == SettingKind::mixed;
  }

  double z(Transition tr) const {
    auto it = z_overrides.find(tr);
    return it == z_overrides.end() ? z_default : it->second;
  }

  bool frailty_applies(Transition tr) const {
    if (kind == SettingKind::frailty || kind == SettingKind::mixed) return true;
    if (kind == SettingKind::partial_frailty)
      return std::find(frailty_transitions.begin(), frailty_transitions.end(), tr) != frailty_transitions.end();
    return false;
  }

  ParamVariant param_variant() const {
    return kind == SettingKind::semi_markov ? ParamVariant::semi_markov : ParamVariant::markov;
  }

  void validate() const {
    if (uses_frailty()) {
      if (!frailty) throw ValidationError(std::string("setting ") + to_string(kind) + " requires a frailty preset");
      if (!(frailty->shape > 0.0) || !(frailty->scale > 0.0))
        throw ValidationError("frailty shape and scale must be positive");
    } else if (frailty) {
      throw ValidationError(std::string("setting ") + to_string(kind) + " takes no frailty preset");
    }
    if (kind == SettingKind::mixed && !(changepoint > 0.0))
      throw ValidationError("changepoint must be positive");
    if (kind == SettingKind::pathological) {
      if (!(path_threshold > 0.0)) throw ValidationError("pathological threshold must be positive");
      if (!(z_default > 0.0)) throw ValidationError("z multipliers must be positive");
      for (const auto& [tr, z] : z_overrides)
        if (!(z > 0.0)) throw ValidationError("z multiplier for " + to_string(tr) + " must be positive");
    }
  }
};

struct CensoringSpec {
  bool enabled = true;
  double rate = 0.00035;
  double threshold = 2500.0;
  double uniform_lo = 2500.0;
  double uniform_hi = 5200.0;
  double tau = 4892.0;

  void validate() const {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ValidationError("tau must be positive and finite");
    if (!enabled) return;
    if (!(rate > 0.0)) throw ValidationError("censoring rate must be positive");
    if (!(threshold > 0.0)) throw ValidationError("censoring threshold must be positive");
    if (!(uniform_lo > 0.0) || !(uniform_hi > uniform_lo))
      throw ValidationError("censoring uniform range must satisfy 0 < lo < hi");
  }

  /// Exact CDF of the censoring time.
  double cdf(double c) const {
    if (c <= 0.0) return 0.0;
    if (c >= tau) return 1.0;
    const double exp_cdf = 1.0 - std::exp(-rate * std::min(c, threshold));
    const double tail = std::exp(-rate * threshold);
    const double uni = std::clamp((c - uniform_lo) / (uniform_hi - uniform_lo), 0.0, 1.0);
    return exp_cdf + tail * uni;
  }
};

/// Censoring time from the two underlying draws.
inline double censoring_from(const CensoringSpec& spec, double c1, double c2) {
  return std::min(c1 <= spec.threshold ? c1 : c2, spec.tau);
}

inline double draw_censoring(const CensoringSpec& spec, Engine& rng) {
  if (!spec.enabled) return spec.tau;
  const double c1 = -std::log(open_uniform(rng)) / spec.rate;
  if (c1 <= spec.threshold) return std::min(c1, spec.tau);
  std::uniform_real_distribution<double> u(spec.uniform_lo, spec.uniform_hi);
  return censoring_from(spec, c1, u(rng));
}

// Closed-form transition times from a uniform u in (0, 1]. u = 1 gives t0.

inline double markov_time(WeibullHazard h, double t0, double u) {
  return std::pow(std::pow(t0, h.b) - std::log(u) / h.a, 1.0 / h.b);
}

inline double semi_markov_time(WeibullHazard h, double t0, double u) {
  return t0 + std::pow(-std::log(u) / h.a, 1.0 / h.b);
}

inline double frailty_time(WeibullHazard h, double t0, double w, double u) {
  return markov_time({w * h.a, h.b}, t0, u);
}

/// Clock-forward draw when the intensity is m_before*alpha before `switch_time`
/// and m_after*alpha after it. The unit exponential budget left at the switch
/// carries over, so the result is the exact inverse of the piecewise
/// cumulative hazard.
inline double switching_time(WeibullHazard h, double t0, double u, double switch_time, double m_before,
                             double m_after) {
  if (m_before == m_after || !(switch_time > t0)) {
    const double m = t0 < switch_time ? m_before : m_after;
    return markov_time({m * h.a, h.b}, t0, u);
  }
  const double t = markov_time({m_before * h.a, h.b}, t0, u);
  if (t <= switch_time) return t;
  const double spent = m_before * h.a * (std::pow(switch_time, h.b) - std::pow(t0, h.b));
  const double left = std::max(-std::log(u) - spent, 0.0);
  return std::pow(std::pow(switch_time, h.b) + left / (m_after * h.a), 1.0 / h.b);
}

inline double draw_markov_time(const WeibullParams& p, Transition tr, double t0, Engine& rng) {
  return markov_time(p.at(tr), t0, open_uniform(rng));
}

inline double draw_semi_markov_time(const WeibullParams& p, Transition tr, double t0, Engine& rng) {
  return semi_markov_time(p.at(tr), t0, open_uniform(rng));
}

inline double draw_frailty_time(const WeibullParams& p, Transition tr, double t0, double w, Engine& rng) {
  return frailty_time(p.at(tr), t0, w, open_uniform(rng));
}

inline double draw_frailty(const FrailtyPreset& f, Engine& rng) {
  std::gamma_distribution<double> g(f.shape, f.scale);
  return g(rng);
}

struct SimulationModel {
  StateSpace space = StateSpace::illness_death_with_recovery();
  SettingSpec setting;
  WeibullParams params = WeibullParams::preset(ParamVariant::markov);
  CensoringSpec censoring;

  static SimulationModel make(SettingSpec setting, CensoringSpec censoring = {}) {
    SimulationModel m;
    m.params = WeibullParams::preset(setting.param_variant());
    m.setting = std::move(setting);
    m.censoring = censoring;
    return m;
  }

  void validate() const {
    setting.validate();
    censoring.validate();
    for (const auto& tr : space.transitions()) (void)params.at(tr);
  }
};

/// Time of the next h -> j transition for a subject that entered h at t0,
/// from one uniform u. `frailty` is the subject's W; `stayer` tells whether the
/// subject started in state 1 and had not left it by the pathological threshold.
inline double transition_time(const SimulationModel& model, Transition tr, double t0, double frailty, bool stayer,
                              double u) {
  const auto& set = model.setting;
  const auto& h = model.params.at(tr);
  const double w = set.frailty_applies(tr) ? frailty : 1.0;
  switch (set.kind) {
    case SettingKind::semi_markov: return semi_markov_time(h, t0, u);
    case SettingKind::mixed: return switching_time(h, t0, u, set.changepoint, 1.0, w);
    // The branch is only known once the threshold has passed; before it every
    // subject runs on the baseline intensity.
    case SettingKind::pathological:
      return switching_time(h, t0, u, set.path_threshold, 1.0, stayer ? set.z(tr) : 1.0);
    default: return frailty_time(h, t0, w, u);
  }
}

/// One subject's path given its start state, censoring time and frailty.
/// Competing times for all targets are drawn from `rng` in target order at
/// every step, so models that differ only in intensity multipliers consume the
/// same uniforms.
inline SamplePath simulate_path(const SimulationModel& model, SubjectId id, int start_state, double censoring_time,
                                double frailty, Engine& rng) {
  const auto& space = model.space;
  const double tau = model.censoring.tau;
  if (space.is_absorbing(start_state)) throw ValidationError("start state must be transient");

  std::vector<Event> events;
  int state = start_state;
  double t0 = 0.0;
  double first_exit = std::numeric_limits<double>::infinity();
  while (!space.is_absorbing(state)) {
    const bool stayer = start_state == 1 && first_exit > model.setting.path_threshold;
    double best = std::numeric_limits<double>::infinity();
    int target = 0;
    for (int j : space.targets_from(state)) {
      double t = transition_time(model, {state, j}, t0, frailty, stayer, open_uniform(rng));
      if (!(t > t0)) t = std::nextafter(t0, std::numeric_limits<double>::infinity());
      if (t < best) {
        best = t;
        target = j;
      }
    }
    if (!(best < censoring_time)) break;
    events.push_back({best, target});
    if (events.size() == 1) first_exit = best;
    state = target;
    t0 = best;
  }
  const double c = space.is_absorbing(state) ? tau : censoring_time;
  return SamplePath(id, start_state, std::move(events), c, tau);
}

struct CohortSpec {
  int n = 488;
  std::vector<double> start_probs{0.4467, 0.5533};  // P(X(0) = state), state 1 first
  std::uint64_t seed = 1;

  void validate(const StateSpace& space) const {
    if (n < 1) throw ValidationError("cohort size must be at least 1");
    if (start_probs.empty() || static_cast<int>(start_probs.size()) > space.size())
      throw ValidationError("start distribution must cover 1..k states");
    double sum = 0.0;
    for (std::size_t i = 0; i < start_probs.size(); ++i) {
      const double p = start_probs[i];
      if (!(p >= 0.0)) throw ValidationError("start probabilities must be non-negative");
      if (p > 0.0 && space.is_absorbing(static_cast<int>(i) + 1))
        throw ValidationError("start distribution puts mass on an absorbing state");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ValidationError("start probabilities must sum to 1");
  }
};

enum class Substream : std::uint64_t { transitions = 1, censoring = 2, frailty = 3, start = 4 };

inline Engine subject_engine(std::uint64_t seed, std::uint64_t subject, Substream s) {
  return make_engine(seed, {subject, static_cast<std::uint64_t>(s)});
}

inline int draw_start_state(const std::vector<double>& probs, Engine& rng) {
  const double u = open_uniform(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return static_cast<int>(i) + 1;
  }
  for (std::size_t i = probs.size(); i-- > 0;)
    if (probs[i] > 0.0) return static_cast<int>(i) + 1;
  return 1;
}

/// Subject `index` (0-based) of the cohort generated from `seed`. A forced
/// frailty replaces the gamma draw; the frailty stream is consumed either way.
inline SamplePath simulate_subject(const SimulationModel& model, const CohortSpec& spec, std::uint64_t index,
                                   std::optional<double> forced_frailty = std::nullopt) {
  Engine start_rng = subject_engine(spec.seed, index, Substream::start);
  Engine cens_rng = subject_engine(spec.seed, index, Substream::censoring);
  Engine frail_rng = subject_engine(spec.seed, index, Substream::frailty);
  Engine trans_rng = subject_engine(spec.seed, index, Substream::transitions);
  const int start = draw_start_state(spec.start_probs, start_rng);
  const double c = draw_censoring(model.censoring, cens_rng);
  double w = 1.0;
  if (model.setting.frailty) w = draw_frailty(*model.setting.frailty, frail_rng);
  if (forced_frailty) w = *forced_frailty;
  return simulate_path(model, static_cast<SubjectId>(index) + 1, start, c, w, trans_rng);
}

inline Cohort simulate_cohort(const SimulationModel& model, const CohortSpec& spec) {
  model.validate();
  spec.validate(model.space);
  std::vector<SamplePath> paths;
  paths.reserve(static_cast<std::size_t>(spec.n));
  for (int i = 0; i < spec.n; ++i) paths.push_back(simulate_subject(model, spec, static_cast<std::uint64_t>(i)));
  return Cohort(model.space, model.censoring.tau, std::move(paths));
}

}  // namespace msm
