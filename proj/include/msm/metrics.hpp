#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "msm/estimators.hpp"
#include "msm/truth.hpp"

namespace msm {

/// Estimates of one P_hj(s, .) on the evaluation grid from a single run.
struct RunEstimate {
  std::vector<double> estimate;
  std::vector<double> variance;
};

inline RunEstimate sample_curve(const ProbabilityCurve& c, int to, const std::vector<double>& grid) {
  RunEstimate r;
  r.estimate.reserve(grid.size());
  r.variance.reserve(grid.size());
  std::size_t i = 0;
  for (double t : grid) {
    if (t < c.start_time) throw std::domain_error("grid point before curve start");
    while (i + 1 < c.times.size() && c.times[i + 1] <= t) ++i;
    r.estimate.push_back(c.value(i, to));
    r.variance.push_back(c.variance(i, to));
  }
  return r;
}

struct MetricPoint {
  double t = 0.0;
  double truth = 0.0;
  double bias = 0.0;
  double variance = 0.0;
  double rmse = 0.0;
  double coverage = 0.0;
  std::uint64_t n_valid = 0;
  bool missing = true;  // no valid runs or undefined truth
};

/// Bias, sample variance, RMSE and Wald coverage over runs; std::nullopt marks
/// a run whose estimate is undefined.
inline std::vector<MetricPoint> evaluate(const std::vector<std::optional<RunEstimate>>& runs,
                                         const std::vector<double>& grid, const std::vector<double>& truth,
                                         double alpha) {
  if (truth.size() != grid.size()) throw ValidationError("evaluate: truth and grid differ in length");
  const double z = normal_quantile(1.0 - alpha / 2.0);
  std::vector<MetricPoint> out(grid.size());
  for (std::size_t g = 0; g < grid.size(); ++g) {
    auto& m = out[g];
    m.t = grid[g];
    m.truth = truth[g];
    double sum = 0.0;
    std::uint64_t n = 0;
    for (const auto& r : runs) {
      if (!r) continue;
      if (r->estimate.size() != grid.size()) throw ValidationError("evaluate: run and grid differ in length");
      sum += r->estimate[g];
      ++n;
    }
    m.n_valid = n;
    if (n == 0 || !std::isfinite(truth[g])) continue;
    m.missing = false;
    const double mean = sum / static_cast<double>(n);
    double ss = 0.0, hits = 0.0;
    for (const auto& r : runs) {
      if (!r) continue;
      const double d = r->estimate[g] - mean;
      ss += d * d;
      const auto ci = wald_interval(r->estimate[g], r->variance[g], z);
      if (ci.lo <= truth[g] && truth[g] <= ci.hi) hits += 1.0;
    }
    m.bias = mean - truth[g];
    m.variance = n > 1 ? ss / static_cast<double>(n - 1) : 0.0;
    m.rmse = std::sqrt(m.variance + m.bias * m.bias);
    m.coverage = hits / static_cast<double>(n);
  }
  return out;
}

/// Streaming form of `evaluate` for runs fed one at a time.
class MetricAccumulator {
 public:
  MetricAccumulator(std::vector<double> grid, std::vector<double> truth, double alpha)
      : grid_(std::move(grid)), truth_(std::move(truth)), z_(normal_quantile(1.0 - alpha / 2.0)),
        n_(grid_.size(), 0), mean_(grid_.size(), 0.0), m2_(grid_.size(), 0.0), hits_(grid_.size(), 0) {
    if (truth_.size() != grid_.size()) throw ValidationError("accumulator: truth and grid differ in length");
  }

  void add(const RunEstimate& r) {
    if (r.estimate.size() != grid_.size()) throw ValidationError("accumulator: run and grid differ in length");
    for (std::size_t g = 0; g < grid_.size(); ++g) {
      const double x = r.estimate[g];
      ++n_[g];
      const double d = x - mean_[g];
      mean_[g] += d / static_cast<double>(n_[g]);
      m2_[g] += d * (x - mean_[g]);
      const auto ci = wald_interval(x, r.variance[g], z_);
      if (ci.lo <= truth_[g] && truth_[g] <= ci.hi) ++hits_[g];
    }
  }

  void add_missing() { ++missing_runs_; }

  std::uint64_t missing_runs() const noexcept { return missing_runs_; }
  const std::vector<double>& grid() const noexcept { return grid_; }

  std::vector<MetricPoint> result() const {
    std::vector<MetricPoint> out(grid_.size());
    for (std::size_t g = 0; g < grid_.size(); ++g) {
      auto& m = out[g];
      m.t = grid_[g];
      m.truth = truth_[g];
      m.n_valid = n_[g];
      if (n_[g] == 0 || !std::isfinite(truth_[g])) continue;
      m.missing = false;
      m.bias = mean_[g] - truth_[g];
      m.variance = n_[g] > 1 ? m2_[g] / static_cast<double>(n_[g] - 1) : 0.0;
      m.rmse = std::sqrt(m.variance + m.bias * m.bias);
      m.coverage = static_cast<double>(hits_[g]) / static_cast<double>(n_[g]);
    }
    return out;
  }

 private:
  std::vector<double> grid_;
  std::vector<double> truth_;
  double z_;
  std::vector<std::uint64_t> n_;
  std::vector<double> mean_;
  std::vector<double> m2_;
  std::vector<std::uint64_t> hits_;
  std::uint64_t missing_runs_ = 0;
};

/// Truth column for P_hj(s, .) on the curve's own grid.
inline std::vector<double> truth_column(const TruthCurve& c, int to) {
  std::vector<double> out;
  out.reserve(c.times.size());
  for (std::size_t g = 0; g < c.times.size(); ++g) out.push_back(c.value(g, to));
  return out;
}

struct EvaluationRow {
  std::string setting;
  std::string estimator;
  int from = 0;
  int to = 0;
  double s = 0.0;
  MetricPoint point;
};

inline constexpr std::string_view kEvaluationHeader =
    "setting,estimator,from,to,s,t,truth,bias,variance,rmse,coverage,n_valid_runs";

/// Missing points keep their row with empty measure fields.
inline void write_evaluation_csv(std::ostream& os, const std::vector<EvaluationRow>& rows) {
  os << kEvaluationHeader << '\n';
  for (const auto& r : rows) {
    const auto& m = r.point;
    os << r.setting << ',' << r.estimator << ',' << r.from << ',' << r.to << ',' << detail::format_double(r.s)
       << ',' << detail::format_double(m.t) << ',';
    if (std::isfinite(m.truth)) os << detail::format_double(m.truth);
    os << ',';
    if (!m.missing)
      os << detail::format_double(m.bias) << ',' << detail::format_double(m.variance) << ','
         << detail::format_double(m.rmse) << ',' << detail::format_double(m.coverage);
    else
      os << ",,,";
    os << ',' << m.n_valid << '\n';
  }
}

}  // namespace msm
