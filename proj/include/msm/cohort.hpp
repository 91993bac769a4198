#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "msm/sample_path.hpp"
#include "msm/state_space.hpp"

namespace msm {

/// Collection of sample paths sharing a state space and study horizon.
class Cohort {
 public:
  Cohort(StateSpace space, double max_time, std::vector<SamplePath> paths = {})
      : space_(std::move(space)), max_time_(max_time), paths_(std::move(paths)) {
    std::unordered_set<SubjectId> seen;
    seen.reserve(paths_.size());
    for (const auto& p : paths_) {
      const std::string who = "subject " + std::to_string(p.id()) + ": ";
      if (!seen.insert(p.id()).second) throw ValidationError(who + "duplicate subject id");
      if (p.max_time() != max_time_) throw ValidationError(who + "max_time differs from cohort");
      if (!space_.contains(p.initial_state())) throw ValidationError(who + "unknown initial state");
      if (space_.is_absorbing(p.initial_state()))
        throw ValidationError(who + "path starts in an absorbing state");
      int state = p.initial_state();
      for (const auto& ev : p.events()) {
        if (space_.is_absorbing(state))
          throw ValidationError(who + "event after entering absorbing state");
        if (!space_.permits({state, ev.to_state}))
          throw ValidationError(who + "forbidden transition " + to_string({state, ev.to_state}));
        state = ev.to_state;
      }
      if (space_.is_absorbing(state) && p.censoring_time() != max_time_)
        throw ValidationError(who + "absorbed path must carry censoring_time == max_time");
    }
  }

  const StateSpace& state_space() const noexcept { return space_; }
  double max_time() const noexcept { return max_time_; }
  const std::vector<SamplePath>& paths() const noexcept { return paths_; }
  std::size_t size() const noexcept { return paths_.size(); }
  bool empty() const noexcept { return paths_.empty(); }

  bool operator==(const Cohort&) const = default;

 private:
  StateSpace space_;
  double max_time_;
  std::vector<SamplePath> paths_;
};

/// One row of the long (counting-process) format: a sojourn in `from` over
/// (entry, exit], ending in a transition to `to` (status 1) or censoring (status 0).
struct LongRecord {
  SubjectId id = 0;
  int from = 0;
  std::optional<int> to;
  double entry = 0.0;
  double exit = 0.0;
  int status = 0;

  bool operator==(const LongRecord&) const = default;
};

inline std::vector<LongRecord> to_long(const Cohort& cohort) {
  std::vector<LongRecord> rows;
  for (const auto& path : cohort.paths()) {
    for_each_spell(path, cohort.state_space(), [&](const Spell& sp) {
      if (sp.terminal) return;
      if (sp.to != 0)
        rows.push_back({path.id(), sp.state, sp.to, sp.entry, sp.exit, 1});
      else
        rows.push_back({path.id(), sp.state, std::nullopt, sp.entry, sp.exit, 0});
    });
  }
  return rows;
}

/// Rebuilds a cohort from long records. Subjects keep the order of their first
/// appearance; rows of one subject may come in any order but must tile (0, C].
inline Cohort from_long(const std::vector<LongRecord>& records, const StateSpace& space,
                        double max_time) {
  std::vector<SubjectId> order;
  std::unordered_map<SubjectId, std::vector<const LongRecord*>> by_id;
  for (const auto& r : records) {
    auto [it, inserted] = by_id.try_emplace(r.id);
    if (inserted) order.push_back(r.id);
    it->second.push_back(&r);
  }

  std::vector<SamplePath> paths;
  paths.reserve(order.size());
  for (SubjectId id : order) {
    auto& rows = by_id[id];
    std::stable_sort(rows.begin(), rows.end(),
                     [](const LongRecord* a, const LongRecord* b) { return a->entry < b->entry; });
    const std::string who = "subject " + std::to_string(id) + ": ";
    if (rows.front()->entry != 0.0) throw ValidationError(who + "first record must start at 0");

    std::vector<Event> events;
    double censoring = max_time;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const LongRecord& r = *rows[i];
      if (!(r.entry < r.exit)) throw ValidationError(who + "record with entry >= exit");
      if (r.status != 0 && r.status != 1) throw ValidationError(who + "status must be 0 or 1");
      if (i > 0) {
        const LongRecord& prev = *rows[i - 1];
        if (r.entry < prev.exit) throw ValidationError(who + "overlapping intervals");
        if (r.entry > prev.exit) throw ValidationError(who + "gap between intervals");
        if (prev.status == 0) throw ValidationError(who + "record after censoring");
        if (r.from != *prev.to) throw ValidationError(who + "record does not continue from previous state");
      }
      const bool last = i + 1 == rows.size();
      if (r.status == 1) {
        if (!r.to) throw ValidationError(who + "observed transition without target state");
        if (!space.permits({r.from, *r.to}))
          throw ValidationError(who + "forbidden transition " + to_string({r.from, *r.to}));
        events.push_back({r.exit, *r.to});
        if (last) censoring = space.is_absorbing(*r.to) ? max_time : r.exit;
      } else {
        censoring = r.exit;
      }
    }
    paths.emplace_back(id, rows.front()->from, std::move(events), censoring, max_time);
  }
  return Cohort(space, max_time, std::move(paths));
}

namespace detail {

inline std::string format_double(double x) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, const std::string& context) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw ValidationError(context + ": cannot parse number '" + std::string(s) + "'");
  return v;
}

template <class Int>
Int parse_int(std::string_view s, const std::string& context) {
  Int v{};
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw ValidationError(context + ": cannot parse integer '" + std::string(s) + "'");
  return v;
}

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

inline std::string_view trim_cr(std::string_view s) {
  if (!s.empty() && s.back() == '\r') s.remove_suffix(1);
  return s;
}

}  // namespace detail

inline constexpr std::string_view kLongHeader = "id,from,to,entry,exit,status";

/// Long-format CSV. Censored rows leave `to` empty. Times use the shortest
/// representation that round-trips exactly.
inline void write_long_csv(std::ostream& os, const std::vector<LongRecord>& rows) {
  os << kLongHeader << '\n';
  for (const auto& r : rows) {
    os << r.id << ',' << r.from << ',';
    if (r.to) os << *r.to;
    os << ',' << detail::format_double(r.entry) << ',' << detail::format_double(r.exit) << ','
       << r.status << '\n';
  }
}

inline std::vector<LongRecord> read_long_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || detail::trim_cr(line) != kLongHeader)
    throw ValidationError("long CSV: expected header '" + std::string(kLongHeader) + "'");
  std::vector<LongRecord> rows;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    std::string_view sv = detail::trim_cr(line);
    if (sv.empty()) continue;
    const std::string ctx = "long CSV line " + std::to_string(lineno);
    auto f = detail::split_csv_line(sv);
    if (f.size() != 6) throw ValidationError(ctx + ": expected 6 fields");
    LongRecord r;
    r.id = detail::parse_int<SubjectId>(f[0], ctx);
    r.from = detail::parse_int<int>(f[1], ctx);
    if (!f[2].empty()) r.to = detail::parse_int<int>(f[2], ctx);
    r.entry = detail::parse_double(f[3], ctx);
    r.exit = detail::parse_double(f[4], ctx);
    r.status = detail::parse_int<int>(f[5], ctx);
    rows.push_back(r);
  }
  return rows;
}

}  // namespace msm
