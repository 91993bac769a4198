#pragma once

#include <algorithm>
#include <compare>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace msm {

/// Thrown when input data or configuration violates a model invariant.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Ordered pair of states (1-based) describing a direct transition.
struct Transition {
  int from = 0;
  int to = 0;

  auto operator<=>(const Transition&) const = default;
};

inline std::string to_string(Transition tr) {
  return std::to_string(tr.from) + "->" + std::to_string(tr.to);
}

/// Finite state space {1, ..., k} with the set of permitted direct transitions.
/// States without outgoing transitions are absorbing.
class StateSpace {
 public:
  StateSpace(int size, std::vector<Transition> transitions)
      : size_(size), transitions_(std::move(transitions)) {
    if (size_ < 2) throw ValidationError("state space needs at least 2 states");
    std::sort(transitions_.begin(), transitions_.end());
    if (std::adjacent_find(transitions_.begin(), transitions_.end()) != transitions_.end())
      throw ValidationError("duplicate transition in state space");
    for (const auto& tr : transitions_) {
      if (tr.from < 1 || tr.from > size_ || tr.to < 1 || tr.to > size_)
        throw ValidationError("transition " + to_string(tr) + " references a state outside 1.." +
                              std::to_string(size_));
      if (tr.from == tr.to) throw ValidationError("self transition " + to_string(tr));
    }
  }

  /// Illness-death model with recovery: 1 <-> 2, both -> 3 (absorbing).
  static StateSpace illness_death_with_recovery() {
    return StateSpace(3, {{1, 2}, {1, 3}, {2, 1}, {2, 3}});
  }

  /// Classical survival model, alive -> dead.
  static StateSpace two_state() { return StateSpace(2, {{1, 2}}); }

  int size() const noexcept { return size_; }
  const std::vector<Transition>& transitions() const noexcept { return transitions_; }

  bool contains(int state) const noexcept { return state >= 1 && state <= size_; }

  bool is_absorbing(int state) const noexcept {
    return std::none_of(transitions_.begin(), transitions_.end(),
                        [state](const Transition& tr) { return tr.from == state; });
  }

  bool permits(Transition tr) const noexcept {
    return std::binary_search(transitions_.begin(), transitions_.end(), tr);
  }

  std::optional<std::size_t> index_of(Transition tr) const noexcept {
    auto it = std::lower_bound(transitions_.begin(), transitions_.end(), tr);
    if (it == transitions_.end() || *it != tr) return std::nullopt;
    return static_cast<std::size_t>(it - transitions_.begin());
  }

  std::vector<int> targets_from(int state) const {
    std::vector<int> out;
    for (const auto& tr : transitions_)
      if (tr.from == state) out.push_back(tr.to);
    return out;
  }

  std::vector<int> absorbing_states() const {
    std::vector<int> out;
    for (int s = 1; s <= size_; ++s)
      if (is_absorbing(s)) out.push_back(s);
    return out;
  }

  std::vector<int> transient_states() const {
    std::vector<int> out;
    for (int s = 1; s <= size_; ++s)
      if (!is_absorbing(s)) out.push_back(s);
    return out;
  }

  bool operator==(const StateSpace&) const = default;

 private:
  int size_;
  std::vector<Transition> transitions_;
};

}  // namespace msm
