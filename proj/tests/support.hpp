#pragma once

#include <random>
#include <vector>

#include "msm/cohort.hpp"

namespace msm_test {

using namespace msm;

/// Random valid cohort. Times are drawn on a coarse lattice when `lattice` is
/// set so that ties across subjects are common.
inline Cohort random_cohort(std::mt19937_64& rng, const StateSpace& space, int n, double tau,
                            bool lattice = false) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  auto draw_gap = [&](double scale) {
    double g = -std::log(1.0 - unif(rng)) * scale;
    if (lattice) g = std::ceil(g);
    return std::max(g, lattice ? 1.0 : 1e-9);
  };
  const auto transient = space.transient_states();
  std::vector<SamplePath> paths;
  for (int i = 0; i < n; ++i) {
    const int start = transient[static_cast<std::size_t>(unif(rng) * transient.size())];
    double c = lattice ? std::ceil(unif(rng) * tau) : unif(rng) * tau;
    if (unif(rng) < 0.3) c = tau;
    std::vector<Event> events;
    int state = start;
    double t = 0.0;
    while (!space.is_absorbing(state)) {
      t += draw_gap(tau / 4.0);
      if (t > c) break;
      const auto targets = space.targets_from(state);
      const int to = targets[static_cast<std::size_t>(unif(rng) * targets.size())];
      events.push_back({t, to});
      state = to;
    }
    if (space.is_absorbing(state)) c = tau;
    paths.emplace_back(i + 1, start, std::move(events), c, tau);
  }
  return Cohort(space, tau, std::move(paths));
}

}  // namespace msm_test
