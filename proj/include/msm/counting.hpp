#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <optional>
#include <vector>

#include "msm/cohort.hpp"

namespace msm {

/// Landmark condition: subject occupies `state` at `time` and is still under
/// observation there.
struct LandmarkFilter {
  int state = 0;
  double time = 0.0;
};

inline bool qualifies(const SamplePath& path, const LandmarkFilter& filter) {
  return path.is_observed_at(filter.time) && filter.time <= path.max_time() &&
         path.state_at(filter.time) == filter.state;
}

/// Aggregated counting process N_hj(t): jump times with tie multiplicities.
struct TransitionCounter {
  Transition transition;
  std::vector<double> jump_times;
  std::vector<int> jump_sizes;

  int total() const {
    int n = 0;
    for (int d : jump_sizes) n += d;
    return n;
  }
};

/// Left-continuous at-risk count Y_h(t) = #{i : X_i(t-) = h, C_i >= t}.
/// values[i] holds Y on (breakpoints[i-1], breakpoints[i]]; values.back() applies
/// after the last breakpoint.
class AtRiskProcess {
 public:
  AtRiskProcess() = default;
  AtRiskProcess(int state, std::vector<double> breakpoints, std::vector<int> values)
      : state_(state), breakpoints_(std::move(breakpoints)), values_(std::move(values)) {}

  int state() const noexcept { return state_; }
  const std::vector<double>& breakpoints() const noexcept { return breakpoints_; }
  const std::vector<int>& values() const noexcept { return values_; }

  int value_at(double t) const {
    if (values_.empty()) return 0;
    auto idx = std::lower_bound(breakpoints_.begin(), breakpoints_.end(), t) - breakpoints_.begin();
    return values_[static_cast<std::size_t>(idx)];
  }

  /// J_h(t)
  bool any_at_risk(double t) const { return value_at(t) > 0; }

 private:
  int state_ = 0;
  std::vector<double> breakpoints_;
  std::vector<int> values_;
};

namespace detail {

/// Builds a left-continuous step count from (entry, exit] intervals.
inline AtRiskProcess at_risk_from_intervals(int state,
                                            std::vector<std::pair<double, int>> deltas) {
  std::sort(deltas.begin(), deltas.end());
  std::vector<double> bps;
  std::vector<int> vals{0};
  int current = 0;
  for (std::size_t i = 0; i < deltas.size();) {
    const double t = deltas[i].first;
    while (i < deltas.size() && deltas[i].first == t) current += deltas[i++].second;
    bps.push_back(t);
    vals.push_back(current);
  }
  return AtRiskProcess(state, std::move(bps), std::move(vals));
}

inline TransitionCounter counter_from_times(Transition tr, std::vector<double> times) {
  std::sort(times.begin(), times.end());
  TransitionCounter c{tr, {}, {}};
  for (std::size_t i = 0; i < times.size();) {
    const double t = times[i];
    int d = 0;
    while (i < times.size() && times[i] == t) {
      ++d;
      ++i;
    }
    c.jump_times.push_back(t);
    c.jump_sizes.push_back(d);
  }
  return c;
}

}  // namespace detail

inline TransitionCounter count_transitions(const Cohort& cohort, Transition tr,
                                           std::optional<LandmarkFilter> filter = std::nullopt) {
  std::vector<double> times;
  for (const auto& path : cohort.paths()) {
    if (filter && !qualifies(path, *filter)) continue;
    for_each_spell(path, cohort.state_space(), [&](const Spell& sp) {
      if (sp.state == tr.from && sp.to == tr.to) times.push_back(sp.exit);
    });
  }
  return detail::counter_from_times(tr, std::move(times));
}

inline AtRiskProcess at_risk(const Cohort& cohort, int state,
                             std::optional<LandmarkFilter> filter = std::nullopt) {
  std::vector<std::pair<double, int>> deltas;
  for (const auto& path : cohort.paths()) {
    if (filter && !qualifies(path, *filter)) continue;
    for_each_spell(path, cohort.state_space(), [&](const Spell& sp) {
      if (sp.state != state) return;
      deltas.emplace_back(sp.entry, +1);
      deltas.emplace_back(sp.exit, -1);
    });
  }
  return detail::at_risk_from_intervals(state, std::move(deltas));
}

/// All counters (one per permitted transition, in state-space order) and at-risk
/// processes (one per state, index state-1) in a single pass over the cohort.
struct CountingProcesses {
  std::vector<TransitionCounter> counters;
  std::vector<AtRiskProcess> at_risk;
  std::size_t n_subjects = 0;
};

inline CountingProcesses counting_processes(const Cohort& cohort,
                                            std::optional<LandmarkFilter> filter = std::nullopt) {
  const auto& space = cohort.state_space();
  const auto& trs = space.transitions();
  std::vector<std::vector<double>> times(trs.size());
  std::vector<std::vector<std::pair<double, int>>> deltas(static_cast<std::size_t>(space.size()));
  std::size_t n = 0;
  for (const auto& path : cohort.paths()) {
    if (filter && !qualifies(path, *filter)) continue;
    ++n;
    for_each_spell(path, space, [&](const Spell& sp) {
      auto& d = deltas[static_cast<std::size_t>(sp.state - 1)];
      d.emplace_back(sp.entry, +1);
      d.emplace_back(sp.exit, -1);
      if (sp.to != 0) times[*space.index_of({sp.state, sp.to})].push_back(sp.exit);
    });
  }
  CountingProcesses out;
  out.n_subjects = n;
  for (std::size_t k = 0; k < trs.size(); ++k)
    out.counters.push_back(detail::counter_from_times(trs[k], std::move(times[k])));
  for (int s = 1; s <= space.size(); ++s)
    out.at_risk.push_back(
        detail::at_risk_from_intervals(s, std::move(deltas[static_cast<std::size_t>(s - 1)])));
  return out;
}

}  // namespace msm
