#pragma once

#include <algorithm>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "msm/parallel.hpp"
#include "msm/simulation.hpp"

namespace msm {

/// Monte Carlo P_hj(s, t) for one (h, s) on a grid of t >= s.
struct TruthCurve {
  int from = 0;
  double s = 0.0;
  int n_states = 0;
  std::uint64_t denominator = 0;  // paths with X(s) = h
  std::vector<double> times;
  std::vector<double> values;  // times.size() x n_states, row-major

  bool defined() const noexcept { return denominator > 0; }
  double value(std::size_t i, int to) const { return values[i * static_cast<std::size_t>(n_states) + (to - 1)]; }
};

struct TruthTable {
  std::string setting;
  std::uint64_t n_paths = 0;
  std::vector<TruthCurve> curves;

  const TruthCurve* find(int from, double s) const {
    for (const auto& c : curves)
      if (c.from == from && c.s == s) return &c;
    return nullptr;
  }
};

/// Points of `grid` at or after s.
inline std::vector<double> truncate_grid(const std::vector<double>& grid, double s) {
  std::vector<double> out;
  for (double t : grid)
    if (t >= s) out.push_back(t);
  return out;
}

/// Empirical P_hj(s, t) from uncensored paths for every transient h and every
/// s in `starts`, on `grid` truncated to t >= s. Paths are simulated with the
/// model's start distribution and with censoring switched off.
inline TruthTable compute_truth(const SimulationModel& model, const std::vector<double>& start_probs,
                                std::uint64_t n_paths, const std::vector<double>& starts,
                                const std::vector<double>& grid, std::uint64_t seed, int jobs = 1) {
  if (n_paths < 1) throw ValidationError("truth needs at least one path");
  SimulationModel m = model;
  m.censoring.enabled = false;
  m.validate();
  CohortSpec spec;
  spec.n = 1;
  spec.start_probs = start_probs;
  spec.seed = seed;
  spec.validate(m.space);
  const double tau = m.censoring.tau;
  for (double s : starts)
    if (!(s >= 0.0) || s > tau) throw ValidationError("starting times must lie in [0, tau]");
  for (double t : grid)
    if (!(t >= 0.0) || t > tau) throw ValidationError("grid points must lie in [0, tau]");
  if (!std::is_sorted(grid.begin(), grid.end())) throw ValidationError("grid must be sorted");

  const int k = m.space.size();
  const auto transient = m.space.transient_states();
  const std::size_t ns = starts.size(), ng = grid.size();
  std::vector<std::size_t> first(ns);
  for (std::size_t si = 0; si < ns; ++si)
    first[si] = static_cast<std::size_t>(std::lower_bound(grid.begin(), grid.end(), starts[si]) - grid.begin());

  // counts[(si * k + h-1) * ng * k + g * k + j-1]
  const std::size_t block = ng * static_cast<std::size_t>(k);
  const std::size_t chunk_size = 4096;
  const std::size_t n_chunks = (n_paths + chunk_size - 1) / chunk_size;
  std::vector<std::vector<std::uint64_t>> counts(n_chunks);
  std::vector<std::vector<std::uint64_t>> denoms(n_chunks);

  parallel_for(n_chunks, jobs, [&](std::size_t c) {
    auto& cnt = counts[c];
    auto& den = denoms[c];
    cnt.assign(ns * static_cast<std::size_t>(k) * block, 0);
    den.assign(ns * static_cast<std::size_t>(k), 0);
    std::vector<int> state_on_grid(ng);
    const std::uint64_t lo = c * chunk_size, hi = std::min<std::uint64_t>(n_paths, lo + chunk_size);
    for (std::uint64_t i = lo; i < hi; ++i) {
      const SamplePath path = simulate_subject(m, spec, i);
      const auto& ev = path.events();
      std::size_t e = 0;
      int st = path.initial_state();
      for (std::size_t g = 0; g < ng; ++g) {
        while (e < ev.size() && ev[e].time <= grid[g]) st = ev[e++].to_state;
        state_on_grid[g] = st;
      }
      for (std::size_t si = 0; si < ns; ++si) {
        const int h = path.state_at(starts[si]);
        const std::size_t hk = si * static_cast<std::size_t>(k) + static_cast<std::size_t>(h - 1);
        ++den[hk];
        std::uint64_t* row = cnt.data() + hk * block;
        for (std::size_t g = first[si]; g < ng; ++g) ++row[g * static_cast<std::size_t>(k) + (state_on_grid[g] - 1)];
      }
    }
  });

  TruthTable table;
  table.n_paths = n_paths;
  for (std::size_t si = 0; si < ns; ++si)
    for (int h : transient) {
      const std::size_t hk = si * static_cast<std::size_t>(k) + static_cast<std::size_t>(h - 1);
      TruthCurve tc;
      tc.from = h;
      tc.s = starts[si];
      tc.n_states = k;
      for (std::size_t c = 0; c < n_chunks; ++c) tc.denominator += denoms[c][hk];
      for (std::size_t g = first[si]; g < ng; ++g) {
        tc.times.push_back(grid[g]);
        for (int j = 0; j < k; ++j) {
          std::uint64_t num = 0;
          for (std::size_t c = 0; c < n_chunks; ++c) num += counts[c][hk * block + g * static_cast<std::size_t>(k) + static_cast<std::size_t>(j)];
          tc.values.push_back(tc.defined() ? static_cast<double>(num) / static_cast<double>(tc.denominator)
                                           : std::numeric_limits<double>::quiet_NaN());
        }
      }
      table.curves.push_back(std::move(tc));
    }
  return table;
}

inline constexpr std::string_view kTruthHeader = "from,to,s,t,probability,denominator";

/// Undefined entries are written with an empty probability field.
inline void write_truth_csv(std::ostream& os, const TruthTable& table) {
  os << kTruthHeader << '\n';
  for (const auto& c : table.curves) {
    const std::string s = detail::format_double(c.s);
    for (std::size_t g = 0; g < c.times.size(); ++g) {
      const std::string t = detail::format_double(c.times[g]);
      for (int j = 1; j <= c.n_states; ++j) {
        os << c.from << ',' << j << ',' << s << ',' << t << ',';
        if (c.defined()) os << detail::format_double(c.value(g, j));
        os << ',' << c.denominator << '\n';
      }
    }
  }
}

inline TruthTable read_truth_csv(std::istream& is, int n_states) {
  std::string line;
  if (!std::getline(is, line) || detail::trim_cr(line) != kTruthHeader)
    throw ValidationError("truth file: unexpected header");
  TruthTable table;
  std::map<std::pair<int, double>, std::size_t> index;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    const auto row = detail::trim_cr(line);
    if (row.empty()) continue;
    const auto f = detail::split_csv_line(row);
    const std::string ctx = "truth line " + std::to_string(line_no);
    if (f.size() != 6) throw ValidationError(ctx + ": expected 6 fields");
    const int from = detail::parse_int<int>(f[0], ctx);
    const int to = detail::parse_int<int>(f[1], ctx);
    const double s = detail::parse_double(f[2], ctx);
    const double t = detail::parse_double(f[3], ctx);
    const auto den = detail::parse_int<std::uint64_t>(f[5], ctx);
    if (to < 1 || to > n_states) throw ValidationError(ctx + ": state out of range");
    auto [it, inserted] = index.try_emplace({from, s}, table.curves.size());
    if (inserted) {
      TruthCurve tc;
      tc.from = from;
      tc.s = s;
      tc.n_states = n_states;
      tc.denominator = den;
      table.curves.push_back(std::move(tc));
    }
    auto& tc = table.curves[it->second];
    if (to == 1) {
      tc.times.push_back(t);
      tc.values.resize(tc.values.size() + static_cast<std::size_t>(n_states),
                       std::numeric_limits<double>::quiet_NaN());
    }
    if (tc.times.empty() || tc.times.back() != t) throw ValidationError(ctx + ": rows out of order");
    if (!f[4].empty()) tc.values[(tc.times.size() - 1) * static_cast<std::size_t>(n_states) + (to - 1)] =
        detail::parse_double(f[4], ctx);
  }
  return table;
}

}  // namespace msm
