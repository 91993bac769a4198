#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>

#include "msm/cohort.hpp"
#include "msm/counting.hpp"

namespace msm {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;

/// Raised when a landmark subsample (state h at time s) contains nobody.
class EmptyLandmarkError : public std::runtime_error {
 public:
  EmptyLandmarkError(int state, double time)
      : std::runtime_error("no subjects at landmark (state " + std::to_string(state) + ", s = " +
                           std::to_string(time) + ")"),
        state_(state),
        time_(time) {}

  int state() const noexcept { return state_; }
  double time() const noexcept { return time_; }

 private:
  int state_;
  double time_;
};

/// Nelson-Aalen ingredients for one transition: aggregated jumps dN(t) and the
/// at-risk count Y_h(t) at each jump time.
struct TransitionIncrements {
  Transition transition;
  std::vector<double> times;
  std::vector<double> events;
  std::vector<double> at_risk;
};

inline std::vector<TransitionIncrements> transition_increments(const CountingProcesses& cp) {
  std::vector<TransitionIncrements> out;
  out.reserve(cp.counters.size());
  for (const auto& c : cp.counters) {
    TransitionIncrements inc{c.transition, {}, {}, {}};
    const auto& risk = cp.at_risk[static_cast<std::size_t>(c.transition.from - 1)];
    for (std::size_t i = 0; i < c.jump_times.size(); ++i) {
      const int y = risk.value_at(c.jump_times[i]);
      if (y <= 0) continue;  // J_h(u) = 0
      inc.times.push_back(c.jump_times[i]);
      inc.events.push_back(c.jump_sizes[i]);
      inc.at_risk.push_back(y);
    }
    out.push_back(std::move(inc));
  }
  return out;
}

/// Step function of Nelson-Aalen increments dA(t) on the union of jump times.
/// Keeps the raw (dN, Y) per jump so that Greenwood covariances can be formed.
class CumulativeIntensityMatrix {
 public:
  struct Jump {
    std::size_t transition;  // index into state_space().transitions()
    double events;
    double at_risk;
  };
  struct Step {
    double time;
    Matrix increment;
    std::vector<Jump> jumps;
  };

  /// `phases` (one per series, default all 0) orders jumps that share a time:
  /// each distinct (time, phase) becomes its own step, lower phase first.
  CumulativeIntensityMatrix(StateSpace space, std::vector<TransitionIncrements> series,
                            std::vector<int> phases = {})
      : space_(std::move(space)), series_(std::move(series)) {
    const auto& trs = space_.transitions();
    if (series_.size() != trs.size())
      throw std::invalid_argument("one increment series per permitted transition required");
    if (phases.empty()) phases.assign(series_.size(), 0);
    if (phases.size() != series_.size()) throw std::invalid_argument("one phase per series required");
    std::vector<std::tuple<double, int, std::size_t, std::size_t>> all;
    for (std::size_t k = 0; k < series_.size(); ++k) {
      if (series_[k].transition != trs[k])
        throw std::invalid_argument("increment series out of state-space order");
      for (std::size_t i = 0; i < series_[k].times.size(); ++i)
        all.emplace_back(series_[k].times[i], phases[k], k, i);
    }
    std::sort(all.begin(), all.end());
    const int n = space_.size();
    for (std::size_t a = 0; a < all.size();) {
      const double t = std::get<0>(all[a]);
      const int ph = std::get<1>(all[a]);
      Step step{t, Matrix::Zero(n, n), {}};
      for (; a < all.size() && std::get<0>(all[a]) == t && std::get<1>(all[a]) == ph; ++a) {
        const auto [time, phase, k, i] = all[a];
        const auto& s = series_[k];
        const int h = trs[k].from - 1, j = trs[k].to - 1;
        const double d = s.events[i] / s.at_risk[i];
        step.increment(h, j) += d;
        step.increment(h, h) -= d;
        step.jumps.push_back({k, s.events[i], s.at_risk[i]});
      }
      steps_.push_back(std::move(step));
    }
  }

  const StateSpace& state_space() const noexcept { return space_; }
  const std::vector<TransitionIncrements>& series() const noexcept { return series_; }
  const std::vector<Step>& steps() const noexcept { return steps_; }

  std::vector<double> grid() const {
    std::vector<double> g;
    g.reserve(steps_.size());
    for (const auto& s : steps_) g.push_back(s.time);
    return g;
  }

  /// A(t), the cumulative sum of increments over (0, t].
  Matrix value_at(double t) const {
    Matrix a = Matrix::Zero(space_.size(), space_.size());
    for (const auto& s : steps_) {
      if (s.time > t) break;
      a += s.increment;
    }
    return a;
  }

 private:
  StateSpace space_;
  std::vector<TransitionIncrements> series_;
  std::vector<Step> steps_;
};

/// Nelson-Aalen estimator of the cumulative transition intensities, optionally
/// on the landmark subsample.
inline CumulativeIntensityMatrix nelson_aalen(const Cohort& cohort,
                                              std::optional<LandmarkFilter> filter = std::nullopt) {
  return CumulativeIntensityMatrix(cohort.state_space(),
                                   transition_increments(counting_processes(cohort, filter)));
}

/// Transitions flagged as non-Markov.
class NonMarkovSet {
 public:
  NonMarkovSet() = default;
  explicit NonMarkovSet(std::vector<Transition> trs) : trs_(std::move(trs)) {
    std::sort(trs_.begin(), trs_.end());
    trs_.erase(std::unique(trs_.begin(), trs_.end()), trs_.end());
  }

  static NonMarkovSet all(const StateSpace& space) { return NonMarkovSet(space.transitions()); }

  bool contains(Transition tr) const { return std::binary_search(trs_.begin(), trs_.end(), tr); }
  bool empty() const noexcept { return trs_.empty(); }
  std::size_t size() const noexcept { return trs_.size(); }
  const std::vector<Transition>& transitions() const noexcept { return trs_; }

  void check_subset_of(const StateSpace& space) const {
    for (const auto& tr : trs_)
      if (!space.permits(tr))
        throw ValidationError("non-Markov set contains unknown transition " + to_string(tr));
  }

  bool operator==(const NonMarkovSet&) const = default;

 private:
  std::vector<Transition> trs_;
};

/// Hybrid intensities: landmark series for transitions in M, full-sample otherwise.
/// A landmark jump tied with a full-sample jump is applied as a separate factor
/// right after it, so every factor stays row-stochastic.
inline CumulativeIntensityMatrix hybrid_intensity(const CumulativeIntensityMatrix& full,
                                                  const CumulativeIntensityMatrix& landmark,
                                                  const NonMarkovSet& non_markov) {
  non_markov.check_subset_of(full.state_space());
  std::vector<TransitionIncrements> series;
  std::vector<int> phases;
  for (std::size_t k = 0; k < full.series().size(); ++k) {
    const bool use_landmark = non_markov.contains(full.series()[k].transition);
    series.push_back(use_landmark ? landmark.series()[k] : full.series()[k]);
    phases.push_back(use_landmark ? 1 : 0);
  }
  return CumulativeIntensityMatrix(full.state_space(), std::move(series), std::move(phases));
}

/// Ordered product of (I + dA(u)) over jump times s < u <= t.
inline Matrix product_integral(const CumulativeIntensityMatrix& a, double s, double t) {
  if (s > t) throw std::invalid_argument("product_integral requires s <= t");
  const int n = a.state_space().size();
  Matrix p = Matrix::Identity(n, n);
  for (const auto& step : a.steps()) {
    if (step.time <= s) continue;
    if (step.time > t) break;
    p = p * (Matrix::Identity(n, n) + step.increment);
  }
  return p;
}

/// Covariance of row `from` of dA(u), including the diagonal entry. Columns
/// are target states (0-based). Transitions out of the same state may carry
/// different at-risk sets (hybrid); the off-diagonal covariance then uses the
/// larger risk set as the shared population.
inline Matrix increment_row_covariance(const CumulativeIntensityMatrix& a,
                                       const CumulativeIntensityMatrix::Step& step, int from) {
  const int n = a.state_space().size();
  const auto& trs = a.state_space().transitions();
  Matrix cov = Matrix::Zero(n, n);
  const int h = from - 1;
  for (const auto& ja : step.jumps) {
    if (trs[ja.transition].from != from) continue;
    const int j = trs[ja.transition].to - 1;
    for (const auto& jb : step.jumps) {
      if (trs[jb.transition].from != from) continue;
      const int jj = trs[jb.transition].to - 1;
      double c;
      if (ja.transition == jb.transition) {
        c = (ja.at_risk - ja.events) * ja.events / (ja.at_risk * ja.at_risk * ja.at_risk);
      } else {
        c = -ja.events * jb.events / (ja.at_risk * jb.at_risk * std::max(ja.at_risk, jb.at_risk));
      }
      cov(j, jj) += c;
      cov(h, jj) -= c;
      cov(j, h) -= c;
      cov(h, h) += c;
    }
  }
  return cov;
}

/// Cov(vec dA(u)) with column-stacked vec; rows of dA are uncorrelated.
inline Matrix increment_covariance(const CumulativeIntensityMatrix& a,
                                   const CumulativeIntensityMatrix::Step& step) {
  const int n = a.state_space().size();
  Matrix cov = Matrix::Zero(n * n, n * n);
  for (int r = 0; r < n; ++r) {
    Matrix rc = increment_row_covariance(a, step, r + 1);
    for (int c = 0; c < n; ++c)
      for (int c2 = 0; c2 < n; ++c2) cov(c * n + r, c2 * n + r) = rc(c, c2);
  }
  return cov;
}

/// Greenwood-type covariance of vec P(s, t) (column-stacked), accumulated with
/// the one-step recursion
///   V(t) = ((I+dA)' x I) V(t-) ((I+dA)' x I)' + (I x P(s,t-)) Cov(dA) (I x P(s,t-))'.
inline Matrix greenwood_full_covariance(const CumulativeIntensityMatrix& a, double s, double t) {
  const int n = a.state_space().size();
  const Matrix id = Matrix::Identity(n, n);
  Matrix p = id;
  Matrix v = Matrix::Zero(n * n, n * n);
  for (const auto& step : a.steps()) {
    if (step.time <= s) continue;
    if (step.time > t) break;
    const Matrix f = id + step.increment;
    Matrix left = Matrix::Zero(n * n, n * n);  // (I+dA)' x I
    Matrix right = Matrix::Zero(n * n, n * n);  // I x P(s,t-)
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < n; ++c) {
        left.block(r * n, c * n, n, n) = f(c, r) * id;
        if (r == c) right.block(r * n, c * n, n, n) = p;
      }
    v = left * v * left.transpose() + right * increment_covariance(a, step) * right.transpose();
    p = p * f;
  }
  return v;
}

/// Row h of an estimated transition probability matrix P(s, t) with pointwise
/// Greenwood variances. times[0] == s; later entries are jump times in (s, max].
struct ProbabilityCurve {
  double start_time = 0.0;
  int from_state = 0;
  int n_states = 0;
  std::vector<double> times;
  std::vector<double> values;     // times.size() x n_states, row-major
  std::vector<double> variances;  // same layout

  std::size_t size() const noexcept { return times.size(); }
  double value(std::size_t i, int to) const { return values[i * n_states + (to - 1)]; }
  double variance(std::size_t i, int to) const { return variances[i * n_states + (to - 1)]; }

  /// Index of the last time <= t (right-constant between jumps).
  std::size_t index_at(double t) const {
    if (t < start_time) throw std::domain_error("curve evaluated before its start time");
    auto it = std::upper_bound(times.begin(), times.end(), t);
    return static_cast<std::size_t>(it - times.begin()) - 1;
  }
  double value_at(double t, int to) const { return value(index_at(t), to); }
  double variance_at(double t, int to) const { return variance(index_at(t), to); }
};

/// e_h * prod_(s,t] (I + dA) with its Greenwood variance, for every jump time.
/// Works on the row directly: Cov(p(t)) = (I+dA)' Cov(p(t-)) (I+dA) + sum_h' p_h'^2 Cov(dA_h'.)
inline ProbabilityCurve transition_curve(const CumulativeIntensityMatrix& a, int from, double s) {
  const int n = a.state_space().size();
  if (from < 1 || from > n) throw std::invalid_argument("transition_curve: unknown state");
  ProbabilityCurve c;
  c.start_time = s;
  c.from_state = from;
  c.n_states = n;
  RowVector p = RowVector::Zero(n);
  p(from - 1) = 1.0;
  Matrix cov = Matrix::Zero(n, n);
  auto push = [&](double t) {
    c.times.push_back(t);
    for (int j = 0; j < n; ++j) {
      c.values.push_back(p(j));
      c.variances.push_back(std::max(cov(j, j), 0.0));  // rounding below an exact zero
    }
  };
  push(s);
  const Matrix id = Matrix::Identity(n, n);
  const auto& steps = a.steps();
  for (std::size_t k = 0; k < steps.size(); ++k) {
    const auto& step = steps[k];
    if (step.time <= s) continue;
    const Matrix f = id + step.increment;
    Matrix noise = Matrix::Zero(n, n);
    for (int r = 0; r < n; ++r)
      if (p(r) != 0.0) noise += p(r) * p(r) * increment_row_covariance(a, step, r + 1);
    cov = f.transpose() * cov * f + noise;
    p = p * f;
    if (k + 1 == steps.size() || steps[k + 1].time != step.time) push(step.time);
  }
  return c;
}

/// Aalen-Johansen, row `from`.
inline ProbabilityCurve estimate_aj(const Cohort& cohort, double s, int from) {
  return transition_curve(nelson_aalen(cohort), from, s);
}

/// Aalen-Johansen, one curve per transient state.
inline std::vector<ProbabilityCurve> estimate_aj(const Cohort& cohort, double s) {
  const auto a = nelson_aalen(cohort);
  std::vector<ProbabilityCurve> out;
  for (int h : cohort.state_space().transient_states()) out.push_back(transition_curve(a, h, s));
  return out;
}

inline CumulativeIntensityMatrix landmark_nelson_aalen(const Cohort& cohort, double s, int from) {
  const LandmarkFilter filter{from, s};
  bool any = false;
  for (const auto& p : cohort.paths())
    if (qualifies(p, filter)) {
      any = true;
      break;
    }
  if (!any) throw EmptyLandmarkError(from, s);
  return nelson_aalen(cohort, filter);
}

/// Landmark Aalen-Johansen: all intensities from subjects in `from` at `s`.
inline ProbabilityCurve estimate_lmaj(const Cohort& cohort, double s, int from) {
  return transition_curve(landmark_nelson_aalen(cohort, s, from), from, s);
}

/// Hybrid Aalen-Johansen: landmark intensities for transitions in M only.
inline ProbabilityCurve estimate_haj(const Cohort& cohort, double s, int from,
                                     const NonMarkovSet& non_markov) {
  non_markov.check_subset_of(cohort.state_space());
  const auto full = nelson_aalen(cohort);
  if (non_markov.empty()) return transition_curve(hybrid_intensity(full, full, non_markov), from, s);
  const auto lm = landmark_nelson_aalen(cohort, s, from);
  return transition_curve(hybrid_intensity(full, lm, non_markov), from, s);
}

inline double normal_quantile(double p) {
  return boost::math::quantile(boost::math::normal_distribution<double>(), p);
}

struct Interval {
  double lo;
  double hi;
};

/// Plain Wald interval p +- z * sqrt(var); not clipped.
inline Interval wald_interval(double estimate, double variance, double z) {
  const double se = std::sqrt(std::max(variance, 0.0));
  return {estimate - z * se, estimate + z * se};
}

inline constexpr std::string_view kCurveHeader = "estimator,from,to,s,t,estimate,variance,ci_lo,ci_hi";

/// Writes a curve at the union of its jump times and the report grid (t >= s).
/// Confidence limits are clipped to [0, 1] here only.
inline void write_curve_rows(std::ostream& os, std::string_view estimator, const ProbabilityCurve& c,
                             const std::vector<double>& report_grid, double z,
                             bool include_jump_times = true) {
  std::set<double> ts;
  if (include_jump_times) ts.insert(c.times.begin(), c.times.end());
  for (double t : report_grid)
    if (t >= c.start_time) ts.insert(t);
  const std::string s = detail::format_double(c.start_time);
  for (double t : ts) {
    const std::size_t i = c.index_at(t);
    const std::string tt = detail::format_double(t);
    for (int j = 1; j <= c.n_states; ++j) {
      const double p = c.value(i, j), v = c.variance(i, j);
      const auto ci = wald_interval(p, v, z);
      os << estimator << ',' << c.from_state << ',' << j << ',' << s << ',' << tt << ','
         << detail::format_double(p) << ',' << detail::format_double(v) << ','
         << detail::format_double(std::clamp(ci.lo, 0.0, 1.0)) << ','
         << detail::format_double(std::clamp(ci.hi, 0.0, 1.0)) << '\n';
    }
  }
}

}  // namespace msm
