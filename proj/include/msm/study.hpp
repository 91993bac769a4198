#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "msm/estimators.hpp"
#include "msm/markov_tests.hpp"
#include "msm/metrics.hpp"
#include "msm/parallel.hpp"
#include "msm/simulation.hpp"
#include "msm/truth.hpp"

namespace msm {

enum class EstimatorKind { aj, lmaj, haj_lr, haj_cox };

inline const char* to_string(EstimatorKind e) {
  switch (e) {
    case EstimatorKind::aj: return "aj";
    case EstimatorKind::lmaj: return "lmaj";
    case EstimatorKind::haj_lr: return "haj_lr";
    case EstimatorKind::haj_cox: return "haj_cox";
  }
  return "";
}

inline std::optional<EstimatorKind> parse_estimator(const std::string& s) {
  for (auto e : {EstimatorKind::aj, EstimatorKind::lmaj, EstimatorKind::haj_lr, EstimatorKind::haj_cox})
    if (s == to_string(e)) return e;
  return std::nullopt;
}

/// Default evaluation grid: 800 equally spaced points on [0, tau].
inline std::vector<double> evaluation_grid(double tau, int points = 800) { return linspace(0.0, tau, points); }

/// All requested estimators for one cohort at one (h, s). Curves are empty
/// where the estimator is undefined. Markov tests must already have been run
/// when an HAJ estimator is requested.
struct CohortEstimates {
  std::map<EstimatorKind, std::optional<ProbabilityCurve>> curves;
};

inline CohortEstimates estimate_all(const Cohort& cohort, const CumulativeIntensityMatrix& full, int from, double s,
                                    const std::vector<EstimatorKind>& kinds, const NonMarkovSet& m_lr,
                                    const NonMarkovSet& m_cox) {
  CohortEstimates out;
  std::optional<CumulativeIntensityMatrix> lm;
  bool lm_empty = false;
  auto landmark = [&]() -> const CumulativeIntensityMatrix* {
    if (!lm && !lm_empty) {
      try {
        lm = landmark_nelson_aalen(cohort, s, from);
      } catch (const EmptyLandmarkError&) {
        lm_empty = true;
      }
    }
    return lm ? &*lm : nullptr;
  };
  auto hybrid = [&](const NonMarkovSet& m) -> std::optional<ProbabilityCurve> {
    if (m.empty()) return transition_curve(hybrid_intensity(full, full, m), from, s);
    const auto* l = landmark();
    if (!l) return std::nullopt;
    return transition_curve(hybrid_intensity(full, *l, m), from, s);
  };
  for (auto k : kinds) {
    switch (k) {
      case EstimatorKind::aj: out.curves[k] = transition_curve(full, from, s); break;
      case EstimatorKind::lmaj: {
        const auto* l = landmark();
        out.curves[k] = l ? std::optional<ProbabilityCurve>(transition_curve(*l, from, s)) : std::nullopt;
        break;
      }
      case EstimatorKind::haj_lr: out.curves[k] = hybrid(m_lr); break;
      case EstimatorKind::haj_cox: out.curves[k] = hybrid(m_cox); break;
    }
  }
  return out;
}

/// Number of subjects in `from` at s whose path is still in a transient state
/// and under observation just before each grid time.
inline std::vector<double> landmark_at_risk(const Cohort& cohort, int from, double s, const std::vector<double>& grid) {
  std::vector<double> ends;
  const LandmarkFilter f{from, s};
  for (const auto& p : cohort.paths()) {
    if (!qualifies(p, f)) continue;
    const bool absorbed = cohort.state_space().is_absorbing(p.final_state());
    ends.push_back(absorbed ? p.events().back().time : p.censoring_time());
  }
  std::sort(ends.begin(), ends.end());
  std::vector<double> out;
  out.reserve(grid.size());
  for (double t : grid)
    out.push_back(static_cast<double>(ends.end() - std::lower_bound(ends.begin(), ends.end(), t)));
  return out;
}

/// Subjects observed in each state at each grid time.
inline std::vector<std::vector<std::uint64_t>> occupancy_counts(const Cohort& cohort, const std::vector<double>& grid) {
  const int k = cohort.state_space().size();
  std::vector<std::vector<std::uint64_t>> out(grid.size(), std::vector<std::uint64_t>(static_cast<std::size_t>(k), 0));
  for (const auto& p : cohort.paths())
    for (std::size_t g = 0; g < grid.size(); ++g)
      if (p.is_observed_at(grid[g])) ++out[g][static_cast<std::size_t>(p.state_at(grid[g]) - 1)];
  return out;
}

struct StudyConfig {
  std::string label = "markov";
  SimulationModel model;
  CohortSpec cohort;  // cohort.seed is the master seed
  int replicates = 500;
  std::uint64_t truth_paths = 200000;
  std::vector<double> starts{0.0, 245.57, 495.64};
  std::vector<double> grid;  // empty: default evaluation grid
  double alpha = 0.05;
  std::vector<EstimatorKind> estimators{EstimatorKind::aj, EstimatorKind::lmaj, EstimatorKind::haj_lr,
                                        EstimatorKind::haj_cox};
  LogRankOptions logrank;
  CoxOptions cox;
  int jobs = 1;

  bool needs(EstimatorKind e) const { return std::find(estimators.begin(), estimators.end(), e) != estimators.end(); }
  std::vector<double> evaluation_points() const { return grid.empty() ? evaluation_grid(model.censoring.tau) : grid; }
};

inline std::uint64_t replicate_seed(std::uint64_t master, std::uint64_t r) { return derive_seed(master, r); }
inline std::uint64_t truth_seed(std::uint64_t master) { return derive_seed(master, ~std::uint64_t{0}); }
inline std::uint64_t bootstrap_seed(std::uint64_t cohort_seed) { return derive_seed(cohort_seed, 0xb007ULL); }

/// Markov tests for one cohort, as configured for the study.
inline MarkovTestReport study_tests(const StudyConfig& cfg, const Cohort& cohort, std::uint64_t cohort_seed) {
  MarkovTestOptions opt;
  opt.alpha = cfg.alpha;
  opt.run_cox = cfg.needs(EstimatorKind::haj_cox);
  opt.run_logrank = cfg.needs(EstimatorKind::haj_lr);
  opt.cox = cfg.cox;
  opt.logrank = cfg.logrank;
  opt.logrank.seed = bootstrap_seed(cohort_seed);
  return run_markov_tests(cohort, opt);
}

struct CurveKey {
  EstimatorKind estimator;
  int from;
  int to;
  std::size_t start;  // index into StudyConfig::starts
  auto operator<=>(const CurveKey&) const = default;
};

struct ReplicateLog {
  int replicate = 0;
  std::uint64_t seed = 0;
  NonMarkovSet m_lr;
  NonMarkovSet m_cox;
  int not_converged = 0;  // tests flagged not_converged in this replicate
};

struct StudyResult {
  TruthTable truth;
  std::map<CurveKey, std::vector<MetricPoint>> metrics;
  std::map<std::pair<int, std::size_t>, std::vector<double>> mean_landmark_at_risk;  // (from, start index)
  std::vector<ReplicateLog> log;
  std::map<Transition, int> selected_lr;   // replicates with the transition in M
  std::map<Transition, int> selected_cox;
  int not_converged = 0;
};

struct ReplicateOutput {
  ReplicateLog log;
  // (from, start) -> estimator -> per-target run estimate (nullopt: undefined)
  std::map<std::pair<int, std::size_t>, std::map<EstimatorKind, std::optional<std::vector<RunEstimate>>>> runs;
  std::map<std::pair<int, std::size_t>, std::vector<double>> at_risk;
};

inline ReplicateOutput run_replicate(const StudyConfig& cfg, int r, const std::map<std::size_t, std::vector<double>>& grids) {
  ReplicateOutput out;
  CohortSpec spec = cfg.cohort;
  spec.seed = replicate_seed(cfg.cohort.seed, static_cast<std::uint64_t>(r));
  const Cohort cohort = simulate_cohort(cfg.model, spec);
  out.log.replicate = r;
  out.log.seed = spec.seed;
  if (cfg.needs(EstimatorKind::haj_lr) || cfg.needs(EstimatorKind::haj_cox)) {
    const auto rep = study_tests(cfg, cohort, spec.seed);
    out.log.m_lr = rep.selected_logrank;
    out.log.m_cox = rep.selected_cox;
    for (const auto& c : rep.cox) out.log.not_converged += c.flag == TestFlag::not_converged;
    for (const auto& l : rep.logrank) out.log.not_converged += l.flag == TestFlag::not_converged;
  }
  const auto full = nelson_aalen(cohort);
  const int k = cohort.state_space().size();
  for (int h : cohort.state_space().transient_states())
    for (std::size_t si = 0; si < cfg.starts.size(); ++si) {
      const auto& grid = grids.at(si);
      const double s = cfg.starts[si];
      auto est = estimate_all(cohort, full, h, s, cfg.estimators, out.log.m_lr, out.log.m_cox);
      auto& slot = out.runs[{h, si}];
      for (auto& [kind, curve] : est.curves) {
        if (!curve) {
          slot[kind] = std::nullopt;
          continue;
        }
        std::vector<RunEstimate> per_target;
        for (int j = 1; j <= k; ++j) per_target.push_back(sample_curve(*curve, j, grid));
        slot[kind] = std::move(per_target);
      }
      out.at_risk[{h, si}] = landmark_at_risk(cohort, h, s, grid);
    }
  return out;
}

/// Simulation study for one setting: truth, G replicates, streaming metrics.
/// Replicates run on `cfg.jobs` threads and are reduced in replicate order, so
/// results do not depend on the thread count.
inline StudyResult run_study(const StudyConfig& cfg, const TruthTable* precomputed_truth = nullptr,
                             const std::function<void(const ReplicateLog&)>& on_replicate = {}) {
  cfg.model.validate();
  cfg.cohort.validate(cfg.model.space);
  if (cfg.replicates < 1) throw ValidationError("replicates must be at least 1");
  const double tau = cfg.model.censoring.tau;
  for (double s : cfg.starts)
    if (!(s >= 0.0) || !(s < tau)) throw ValidationError("starting times must lie in [0, tau)");
  const auto full_grid = cfg.evaluation_points();

  StudyResult res;
  res.truth = precomputed_truth ? *precomputed_truth
                                : compute_truth(cfg.model, cfg.cohort.start_probs, cfg.truth_paths, cfg.starts,
                                                full_grid, truth_seed(cfg.cohort.seed), cfg.jobs);
  res.truth.setting = cfg.label;

  std::map<std::size_t, std::vector<double>> grids;
  for (std::size_t si = 0; si < cfg.starts.size(); ++si) grids[si] = truncate_grid(full_grid, cfg.starts[si]);

  const auto transient = cfg.model.space.transient_states();
  const int k = cfg.model.space.size();
  std::map<CurveKey, MetricAccumulator> acc;
  std::map<std::pair<int, std::size_t>, std::vector<double>> at_risk_sum;
  for (int h : transient)
    for (std::size_t si = 0; si < cfg.starts.size(); ++si) {
      const TruthCurve* tc = res.truth.find(h, cfg.starts[si]);
      if (!tc || tc->times != grids[si]) throw ValidationError("truth table does not match the evaluation grid");
      at_risk_sum[{h, si}].assign(grids[si].size(), 0.0);
      for (auto e : cfg.estimators)
        for (int j = 1; j <= k; ++j)
          acc.emplace(CurveKey{e, h, j, si}, MetricAccumulator(grids[si], truth_column(*tc, j), cfg.alpha));
    }

  const int batch = std::max(cfg.jobs, 1);
  for (int r0 = 0; r0 < cfg.replicates; r0 += batch) {
    const int nb = std::min(batch, cfg.replicates - r0);
    std::vector<ReplicateOutput> outs(static_cast<std::size_t>(nb));
    parallel_for(static_cast<std::size_t>(nb), cfg.jobs,
                 [&](std::size_t i) { outs[i] = run_replicate(cfg, r0 + static_cast<int>(i), grids); });
    for (auto& o : outs) {
      for (auto& [key, by_est] : o.runs)
        for (auto& [kind, per_target] : by_est)
          for (int j = 1; j <= k; ++j) {
            auto& a = acc.at(CurveKey{kind, key.first, j, key.second});
            if (per_target)
              a.add((*per_target)[static_cast<std::size_t>(j - 1)]);
            else
              a.add_missing();
          }
      for (auto& [key, v] : o.at_risk) {
        auto& sum = at_risk_sum[key];
        for (std::size_t g = 0; g < v.size(); ++g) sum[g] += v[g];
      }
      for (const auto& tr : o.log.m_lr.transitions()) ++res.selected_lr[tr];
      for (const auto& tr : o.log.m_cox.transitions()) ++res.selected_cox[tr];
      res.not_converged += o.log.not_converged;
      if (on_replicate) on_replicate(o.log);
      res.log.push_back(std::move(o.log));
    }
  }

  for (auto& [key, a] : acc) res.metrics.emplace(key, a.result());
  for (auto& [key, sum] : at_risk_sum) {
    for (auto& x : sum) x /= static_cast<double>(cfg.replicates);
    res.mean_landmark_at_risk[key] = std::move(sum);
  }
  return res;
}

inline std::vector<EvaluationRow> evaluation_rows(const StudyConfig& cfg, const StudyResult& res) {
  std::vector<EvaluationRow> rows;
  for (const auto& [key, points] : res.metrics)
    for (const auto& p : points)
      rows.push_back({cfg.label, to_string(key.estimator), key.from, key.to, cfg.starts[key.start], p});
  return rows;
}

inline std::string format_set(const NonMarkovSet& m) {
  std::string out;
  for (const auto& tr : m.transitions()) {
    if (!out.empty()) out += ';';
    out += to_string(tr);
  }
  return out;
}

inline void write_selection_log(std::ostream& os, const std::vector<ReplicateLog>& log) {
  os << "replicate,seed,m_logrank,m_cox,not_converged\n";
  for (const auto& l : log)
    os << l.replicate << ',' << l.seed << ',' << format_set(l.m_lr) << ',' << format_set(l.m_cox) << ','
       << l.not_converged << '\n';
}

}  // namespace msm
