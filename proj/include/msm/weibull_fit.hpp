#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <gsl/gsl_errno.h>
#include <gsl/gsl_multimin.h>

#include "msm/cohort.hpp"
#include "msm/simulation.hpp"

namespace msm {

/// One sojourn: observed until `time`, under observation since `truncation`.
struct WeibullRecord {
  double time;
  double truncation;
  bool censored;
};

class FitError : public std::runtime_error {
 public:
  FitError(const std::string& what, std::optional<WeibullHazard> last = std::nullopt)
      : std::runtime_error(what), last_iterate(last) {}
  std::optional<WeibullHazard> last_iterate;
};

/// Sojourns in tr.from, with an event when the next state is tr.to. With
/// `clock_reset` the time axis restarts at each entry.
inline std::vector<WeibullRecord> weibull_records(const Cohort& cohort, Transition tr, bool clock_reset = false) {
  std::vector<WeibullRecord> out;
  for (const auto& path : cohort.paths())
    for_each_spell(path, cohort.state_space(), [&](const Spell& sp) {
      if (sp.state != tr.from || !(sp.exit > sp.entry)) return;
      const bool censored = sp.to != tr.to;
      if (clock_reset)
        out.push_back({sp.exit - sp.entry, 0.0, censored});
      else
        out.push_back({sp.exit, sp.entry, censored});
    });
  return out;
}

/// Log-likelihood in (log a, log b) with its gradient.
struct WeibullLogLik {
  double value;
  std::array<double, 2> gradient;
};

inline WeibullLogLik weibull_loglik(const std::vector<WeibullRecord>& recs, double log_a, double log_b) {
  const double a = std::exp(log_a), b = std::exp(log_b);
  WeibullLogLik r{0.0, {0.0, 0.0}};
  for (const auto& x : recs) {
    const double lt = std::log(x.time);
    const double tb = std::exp(b * lt);
    double ll = -a * tb;
    double ga = -a * tb;
    double gb = -a * tb * b * lt;
    if (x.truncation > 0.0) {
      const double lw = std::log(x.truncation);
      const double wb = std::exp(b * lw);
      ll += a * wb;
      ga += a * wb;
      gb += a * wb * b * lw;
    }
    if (!x.censored) {
      ll += log_a + log_b + (b - 1.0) * lt;
      ga += 1.0;
      gb += 1.0 + b * lt;
    }
    r.value += ll;
    r.gradient[0] += ga;
    r.gradient[1] += gb;
  }
  return r;
}

struct WeibullFitOptions {
  double gradient_tolerance = 1e-6;  // on the per-event gradient
  int max_iterations = 1000;
};

struct WeibullFit {
  WeibullHazard estimate;
  double loglik;
  int iterations;
};

namespace detail {

// Optimised in (c, log b) with log a = c - b * m, m the mean log event time:
// a t^b = exp(c + b (log t - m)) keeps the two coordinates nearly uncorrelated.
struct WeibullObjective {
  const std::vector<WeibullRecord>* recs;
  double m;

  std::pair<double, double> natural(const gsl_vector* v) const {
    const double log_b = gsl_vector_get(v, 1);
    return {gsl_vector_get(v, 0) - std::exp(log_b) * m, log_b};
  }
  WeibullLogLik eval(const gsl_vector* v) const {
    const auto [log_a, log_b] = natural(v);
    auto r = weibull_loglik(*recs, log_a, log_b);
    r.gradient[1] -= r.gradient[0] * std::exp(log_b) * m;
    return r;
  }
};

inline double weibull_f(const gsl_vector* v, void* p) {
  return -static_cast<WeibullObjective*>(p)->eval(v).value;
}

inline void weibull_df(const gsl_vector* v, void* p, gsl_vector* g) {
  const auto r = static_cast<WeibullObjective*>(p)->eval(v);
  gsl_vector_set(g, 0, -r.gradient[0]);
  gsl_vector_set(g, 1, -r.gradient[1]);
}

inline void weibull_fdf(const gsl_vector* v, void* p, double* f, gsl_vector* g) {
  const auto r = static_cast<WeibullObjective*>(p)->eval(v);
  *f = -r.value;
  gsl_vector_set(g, 0, -r.gradient[0]);
  gsl_vector_set(g, 1, -r.gradient[1]);
}

}  // namespace detail

/// Maximum likelihood fit of a Weibull intensity under right censoring and
/// left truncation, by BFGS in the centred coordinates above.
inline WeibullFit fit_weibull(const std::vector<WeibullRecord>& recs, std::optional<WeibullHazard> init = std::nullopt,
                              const WeibullFitOptions& opt = {}) {
  double events = 0.0, exposure = 0.0;
  std::vector<double> event_times;
  for (const auto& r : recs) {
    if (!(r.time > r.truncation) || r.truncation < 0.0)
      throw ValidationError("weibull record needs 0 <= truncation < time");
    exposure += r.time - r.truncation;
    if (!r.censored) {
      events += 1.0;
      event_times.push_back(r.time);
    }
  }
  if (events == 0.0) throw FitError("weibull fit: all records censored");
  if (events < 2.0) throw FitError("weibull fit: fewer than two events");
  std::sort(event_times.begin(), event_times.end());
  const bool has_censoring = event_times.size() != recs.size();
  const bool any_truncation =
      std::any_of(recs.begin(), recs.end(), [](const WeibullRecord& r) { return r.truncation > 0.0; });
  if (event_times.front() == event_times.back() && !has_censoring && !any_truncation)
    throw FitError("weibull fit: identical event times leave the shape unidentifiable");

  const WeibullHazard start = init.value_or(WeibullHazard{events / exposure, 1.0});
  if (!(start.a > 0.0) || !(start.b > 0.0)) throw ValidationError("weibull fit: initial values must be positive");

  double m = 0.0;
  for (double t : event_times) m += std::log(t);
  m /= events;
  detail::WeibullObjective obj{&recs, m};
  gsl_multimin_function_fdf fn;
  fn.n = 2;
  fn.f = &detail::weibull_f;
  fn.df = &detail::weibull_df;
  fn.fdf = &detail::weibull_fdf;
  fn.params = &obj;

  gsl_vector* x = gsl_vector_alloc(2);
  gsl_vector_set(x, 0, std::log(start.a) + start.b * m);
  gsl_vector_set(x, 1, std::log(start.b));
  gsl_multimin_fdfminimizer* s = gsl_multimin_fdfminimizer_alloc(gsl_multimin_fdfminimizer_vector_bfgs2, 2);
  gsl_error_handler_t* old_handler = gsl_set_error_handler_off();
  gsl_multimin_fdfminimizer_set(s, &fn, x, 0.01, 0.1);

  const double tol = opt.gradient_tolerance * events;
  bool converged = false;
  int it = 0, restarts = 0;
  for (; it < opt.max_iterations; ++it) {
    if (gsl_multimin_test_gradient(s->gradient, tol) == GSL_SUCCESS) {
      converged = true;
      break;
    }
    if (gsl_multimin_fdfminimizer_iterate(s) != GSL_SUCCESS) {
      // a stalled line search drops the curvature memory; restart from here
      if (++restarts > 5) break;
      gsl_vector_memcpy(x, s->x);
      gsl_multimin_fdfminimizer_set(s, &fn, x, 0.01, 0.1);
    }
  }
  const auto [log_a, log_b] = obj.natural(s->x);
  const WeibullHazard last{std::exp(log_a), std::exp(log_b)};
  const double value = -s->f;
  gsl_multimin_fdfminimizer_free(s);
  gsl_vector_free(x);
  gsl_set_error_handler(old_handler);

  if (!converged || !std::isfinite(value) || !std::isfinite(last.a) || !std::isfinite(last.b))
    throw FitError("weibull fit did not converge", last);
  return {last, value, it};
}

}  // namespace msm
