#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace msm {

using Engine = std::mt19937_64;

namespace detail {

inline std::seed_seq make_seed_seq(std::uint64_t seed, std::initializer_list<std::uint64_t> stream) {
  std::vector<std::uint32_t> words;
  words.reserve(2 + 2 * stream.size());
  auto push = [&](std::uint64_t v) {
    words.push_back(static_cast<std::uint32_t>(v & 0xffffffffu));
    words.push_back(static_cast<std::uint32_t>(v >> 32));
  };
  push(seed);
  for (auto s : stream) push(s);
  return std::seed_seq(words.begin(), words.end());
}

}  // namespace detail

/// Engine for the substream identified by `stream` under a master seed. The
/// same (seed, stream) always yields the same sequence.
inline Engine make_engine(std::uint64_t seed, std::initializer_list<std::uint64_t> stream) {
  auto seq = detail::make_seed_seq(seed, stream);
  return Engine(seq);
}

/// 64-bit seed for a child stream, e.g. one simulation replicate.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  auto seq = detail::make_seed_seq(seed, {index, 0x5eedULL});
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[1]) << 32) | out[0];
}

/// Uniform draw on the open interval (0, 1).
inline double open_uniform(Engine& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double x;
  do x = u(rng);
  while (x <= 0.0 || x >= 1.0);
  return x;
}

}  // namespace msm
