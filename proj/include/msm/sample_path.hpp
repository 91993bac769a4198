#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "msm/state_space.hpp"

namespace msm {

using SubjectId = std::int64_t;

struct Event {
  double time = 0.0;
  int to_state = 0;

  bool operator==(const Event&) const = default;
};

/// One subject's right-continuous, piecewise-constant trajectory observed up to
/// its censoring time. A path that ends in an absorbing state is fully observed
/// and carries censoring_time == max_time (checked by Cohort).
class SamplePath {
 public:
  SamplePath(SubjectId id, int initial_state, std::vector<Event> events, double censoring_time,
             double max_time)
      : id_(id),
        initial_state_(initial_state),
        events_(std::move(events)),
        censoring_time_(censoring_time),
        max_time_(max_time) {
    auto fail = [this](const std::string& what) {
      throw ValidationError("subject " + std::to_string(id_) + ": " + what);
    };
    if (!(max_time_ > 0.0)) fail("max_time must be positive");
    if (!(censoring_time_ > 0.0) || censoring_time_ > max_time_)
      fail("censoring time must lie in (0, max_time]");
    double prev = 0.0;
    int state = initial_state_;
    for (const auto& ev : events_) {
      if (!(ev.time > prev)) fail("event times must be positive and strictly increasing");
      if (ev.time > censoring_time_) fail("event after censoring time");
      if (ev.to_state == state) fail("event does not change state");
      prev = ev.time;
      state = ev.to_state;
    }
  }

  SubjectId id() const noexcept { return id_; }
  int initial_state() const noexcept { return initial_state_; }
  const std::vector<Event>& events() const noexcept { return events_; }
  double censoring_time() const noexcept { return censoring_time_; }
  double max_time() const noexcept { return max_time_; }

  int final_state() const noexcept {
    return events_.empty() ? initial_state_ : events_.back().to_state;
  }

  /// X(t) of the censored process; right-continuous, so at an event time the new
  /// state is returned. Times past censoring return the last observed state.
  int state_at(double t) const {
    if (!(t >= 0.0) || t > max_time_)
      throw std::domain_error("state_at: t outside [0, max_time]");
    const double tc = std::min(t, censoring_time_);
    auto it = std::upper_bound(events_.begin(), events_.end(), tc,
                               [](double x, const Event& ev) { return x < ev.time; });
    return it == events_.begin() ? initial_state_ : std::prev(it)->to_state;
  }

  /// Left limit X(t-).
  int state_before(double t) const {
    const double tc = std::min(t, censoring_time_);
    auto it = std::lower_bound(events_.begin(), events_.end(), tc,
                               [](const Event& ev, double x) { return ev.time < x; });
    return it == events_.begin() ? initial_state_ : std::prev(it)->to_state;
  }

  /// H(t) = 1{C >= t}.
  bool is_observed_at(double t) const noexcept { return censoring_time_ >= t; }

  bool operator==(const SamplePath&) const = default;

 private:
  SubjectId id_;
  int initial_state_;
  std::vector<Event> events_;
  double censoring_time_;
  double max_time_;
};

/// Sojourn of a subject in one state over (entry, exit]. `to` is set when the
/// sojourn ends with an observed transition; `terminal` marks the absorbing tail.
struct Spell {
  int state = 0;
  double entry = 0.0;
  double exit = 0.0;
  int to = 0;  // 0: censored or absorbing tail
  bool terminal = false;
};

/// Calls fn(Spell) for each sojourn of the path in time order, including a final
/// absorbing sojourn when absorbed before the censoring time.
template <class Fn>
void for_each_spell(const SamplePath& path, const StateSpace& space, Fn&& fn) {
  double entry = 0.0;
  int state = path.initial_state();
  for (const auto& ev : path.events()) {
    fn(Spell{state, entry, ev.time, ev.to_state, false});
    entry = ev.time;
    state = ev.to_state;
  }
  if (path.censoring_time() > entry)
    fn(Spell{state, entry, path.censoring_time(), 0, space.is_absorbing(state)});
}

}  // namespace msm
