#pragma once

// Helpers shared by the unit tests.

#include <random>

#include "sima/worldcore.hpp"
#include "sima/worlds.hpp"

namespace sima::test {

/// Uniformly random keyboard-and-mouse input stamped `tick`.
inline ActionEvent random_action(std::mt19937_64& rng, std::int64_t tick, double key_density = 0.15) {
  ActionEvent a;
  a.tick = tick;
  std::bernoulli_distribution press(key_density);
  for (int k = 0; k < kKeyCount; ++k) {
    if (press(rng)) a.keys.set(static_cast<Key>(k));
  }
  std::uniform_int_distribution<int> bucket(-kMouseMax, kMouseMax);
  a.mouse_dx = static_cast<std::int8_t>(bucket(rng));
  a.mouse_dy = static_cast<std::int8_t>(bucket(rng));
  a.left_button = press(rng);
  a.right_button = press(rng);
  return a;
}

inline WorldState task_state(const std::string& task_id, std::uint64_t seed) {
  return instantiate_task(worlds::find_task(task_id), seed);
}

/// Independent FNV-1a over row-major (symbol, color) bytes.
inline std::uint64_t reference_frame_hash(const Frame& f) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const Cell& c : f.cells) {
    for (std::uint8_t b : {c.symbol, c.color}) {
      h ^= b;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace sima::test
