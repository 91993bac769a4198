#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "msm/cohort.hpp"
#include "msm/cox_test.hpp"
#include "msm/random.hpp"

namespace msm {

struct LogRankOptions {
  int grid_size = 60;       // equally spaced landmark times over [0, max_time]
  int n_bootstrap = 500;
  double min_weight = 2.5;  // retention threshold on |A||B|/(|A|+|B|)
  std::uint64_t seed = 1;
};

struct LogRankTestResult {
  Transition transition;
  double statistic = 0.0;
  double p_value = 1.0;
  std::vector<double> grid_times;  // retained landmark times
  int n_bootstrap = 0;
  TestFlag flag = TestFlag::none;
};

inline std::vector<double> linspace(double lo, double hi, int n) {
  std::vector<double> out;
  if (n <= 0) return out;
  if (n == 1) return {lo};
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(lo + (hi - lo) * i / (n - 1));
  return out;
}

/// Log-rank-type test of the Markov property for transition h -> j.
///
/// For a landmark time s and a state l, subjects at risk in h after s are
/// split into A = {X(s) = l} and B = the rest; the local statistic compares the
/// h -> j hazards of A and B over (s, max_time] and is standardised by its
/// hypergeometric variance. The global statistic is the largest absolute local
/// statistic over retained (l, s). Its null law is approximated by a wild
/// bootstrap that multiplies each subject's martingale-residual contribution by
/// an independent standard normal.
inline LogRankTestResult logrank_grid_test(const Cohort& cohort, Transition tr,
                                           const LogRankOptions& opt = {}) {
  const auto& space = cohort.state_space();
  if (!space.permits(tr))
    throw ValidationError("log-rank test: transition " + to_string(tr) + " not permitted");

  LogRankTestResult res;
  res.transition = tr;
  res.n_bootstrap = opt.n_bootstrap;

  struct HSpell {
    std::size_t subject;
    double entry;
    double exit;
    bool event;
    std::size_t lo;  // first event index with time > entry
    std::size_t hi;  // one past the last event index with time <= exit
  };
  std::vector<HSpell> spells;
  std::vector<double> event_list;
  const auto& paths = cohort.paths();
  for (std::size_t i = 0; i < paths.size(); ++i)
    for_each_spell(paths[i], space, [&](const Spell& sp) {
      if (sp.state != tr.from) return;
      const bool ev = sp.to == tr.to;
      spells.push_back({i, sp.entry, sp.exit, ev, 0, 0});
      if (ev) event_list.push_back(sp.exit);
    });
  if (event_list.empty()) {
    res.flag = TestFlag::untestable;
    return res;
  }

  std::sort(event_list.begin(), event_list.end());
  std::vector<double> times;
  std::vector<double> d_events;
  for (std::size_t a = 0; a < event_list.size();) {
    const double t = event_list[a];
    double d = 0.0;
    for (; a < event_list.size() && event_list[a] == t; ++a) d += 1.0;
    times.push_back(t);
    d_events.push_back(d);
  }
  const std::size_t n_times = times.size();
  for (auto& sp : spells) {
    sp.lo = static_cast<std::size_t>(std::upper_bound(times.begin(), times.end(), sp.entry) - times.begin());
    sp.hi = static_cast<std::size_t>(std::upper_bound(times.begin(), times.end(), sp.exit) - times.begin());
  }

  std::vector<double> at_risk(n_times, 0.0);
  {
    std::vector<double> diff(n_times + 1, 0.0);
    for (const auto& sp : spells) {
      diff[sp.lo] += 1.0;
      diff[sp.hi] -= 1.0;
    }
    double run = 0.0;
    for (std::size_t e = 0; e < n_times; ++e) at_risk[e] = (run += diff[e]);
  }

  // Only subjects with an h-sojourn can contribute; compress to those.
  std::vector<std::ptrdiff_t> row_of(paths.size(), -1);
  std::size_t n_rows = 0;
  for (const auto& sp : spells)
    if (row_of[sp.subject] < 0) row_of[sp.subject] = static_cast<std::ptrdiff_t>(n_rows++);

  const std::vector<int> qualifying = space.transient_states();
  std::vector<std::vector<double>> columns;  // standardised per-subject contributions
  std::vector<double> observed;              // local statistics
  std::vector<double> used_times;

  for (double s : linspace(0.0, cohort.max_time(), opt.grid_size)) {
    const std::size_t e_first =
        static_cast<std::size_t>(std::upper_bound(times.begin(), times.end(), s) - times.begin());
    if (e_first >= n_times) continue;
    bool retained = false;
    std::vector<std::vector<signed char>> partitions;  // groups already used at this s
    for (int l : qualifying) {
      // Group membership per contributing subject: +1 in A, -1 in B, 0 not in pool.
      std::vector<signed char> group(n_rows, 0);
      for (const auto& sp : spells) {
        if (sp.exit <= s) continue;
        const auto& p = paths[sp.subject];
        group[static_cast<std::size_t>(row_of[sp.subject])] =
            (p.is_observed_at(s) && p.state_at(s) == l) ? 1 : -1;
      }
      bool duplicate = false;
      for (const auto& prev : partitions) {
        bool same = true, mirrored = true;
        for (std::size_t r = 0; r < n_rows && (same || mirrored); ++r) {
          same = same && prev[r] == group[r];
          mirrored = mirrored && prev[r] == -group[r];
        }
        if (same || mirrored) {
          duplicate = true;
          break;
        }
      }
      if (duplicate) continue;

      double n_a = 0.0, n_b = 0.0;
      for (auto g : group) {
        if (g > 0) n_a += 1.0;
        if (g < 0) n_b += 1.0;
      }
      if (n_a == 0.0 || n_b == 0.0) continue;
      if (n_a * n_b / (n_a + n_b) <= opt.min_weight) continue;

      std::vector<double> diff(n_times + 1, 0.0);
      std::vector<double> d_a(n_times, 0.0);
      for (const auto& sp : spells) {
        if (sp.exit <= s || group[static_cast<std::size_t>(row_of[sp.subject])] <= 0) continue;
        diff[std::max(sp.lo, e_first)] += 1.0;
        diff[sp.hi] -= 1.0;
        if (sp.event) d_a[sp.hi - 1] += 1.0;
      }
      std::vector<double> frac(n_times, 0.0);
      std::vector<double> c1(n_times + 1, 0.0), c2(n_times + 1, 0.0);
      double u = 0.0, v = 0.0, run = 0.0;
      for (std::size_t e = 0; e < n_times; ++e) {
        run += diff[e];
        if (e >= e_first && at_risk[e] > 0.0) {
          const double y = at_risk[e], d = d_events[e];
          frac[e] = run / y;
          u += d_a[e] - frac[e] * d;
          if (y > 1.0) v += frac[e] * (1.0 - frac[e]) * (y - d) / (y - 1.0) * d;
          c1[e + 1] = c1[e] + d / y;
          c2[e + 1] = c2[e] + frac[e] * d / y;
        } else {
          c1[e + 1] = c1[e];
          c2[e + 1] = c2[e];
        }
      }
      if (!(v > 0.0)) continue;

      const double sd = std::sqrt(v);
      std::vector<double> col(n_rows, 0.0);
      for (const auto& sp : spells) {
        if (sp.exit <= s) continue;
        const std::size_t r = static_cast<std::size_t>(row_of[sp.subject]);
        const double a = group[r] > 0 ? 1.0 : 0.0;
        const std::size_t lo = std::max(sp.lo, e_first), hi = sp.hi;
        double contrib = -(a * (c1[hi] - c1[lo]) - (c2[hi] - c2[lo]));
        if (sp.event) contrib += a - frac[hi - 1];
        col[r] += contrib / sd;
      }
      columns.push_back(std::move(col));
      observed.push_back(u / sd);
      partitions.push_back(std::move(group));
      retained = true;
    }
    if (retained) used_times.push_back(s);
  }

  res.grid_times = used_times;
  if (columns.empty()) {
    res.flag = TestFlag::untestable;
    return res;
  }

  double stat = 0.0;
  for (double z : observed) stat = std::max(stat, std::abs(z));
  res.statistic = stat;

  const auto m = static_cast<Eigen::Index>(columns.size());
  const auto nr = static_cast<Eigen::Index>(n_rows);
  Eigen::MatrixXd contrib(nr, m);
  for (Eigen::Index c = 0; c < m; ++c)
    for (Eigen::Index r = 0; r < nr; ++r) contrib(r, c) = columns[static_cast<std::size_t>(c)][static_cast<std::size_t>(r)];

  const auto nb = static_cast<Eigen::Index>(opt.n_bootstrap);
  Eigen::MatrixXd multipliers(nb, nr);
  for (Eigen::Index b = 0; b < nb; ++b) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Engine rng = make_engine(opt.seed, {static_cast<std::uint64_t>(tr.from), static_cast<std::uint64_t>(tr.to),
                                        static_cast<std::uint64_t>(b)});
    for (Eigen::Index r = 0; r < nr; ++r) multipliers(b, r) = normal(rng);
  }
  const Eigen::MatrixXd boot = multipliers * contrib;
  int exceed = 0;
  for (Eigen::Index b = 0; b < nb; ++b)
    if (boot.row(b).cwiseAbs().maxCoeff() >= stat) ++exceed;
  res.p_value = (1.0 + exceed) / (opt.n_bootstrap + 1.0);
  return res;
}

}  // namespace msm
