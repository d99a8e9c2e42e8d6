// Copyright (c) 2026 The pcmae Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace pcmae {

/// SplitMix64 finalizer (Steele, Lea & Flood 2014). Used to derive
/// independent stream seeds from a master seed and stream coordinates.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Seedable generator with a fully specified output sequence.
///
/// The engine is MT19937-64, whose output is fixed by the C++ standard. The
/// standard distributions are implementation-defined, so the conversions
/// below are written out:
///   uniform()   = (next() >> 11) * 2^-53                    in [0, 1)
///   below(n)    = rejection sampling on next() % n with the
///                 threshold (2^64 - n) % n                  in [0, n)
///   normal()    = Box-Muller on two uniforms, cosine branch only
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Stream seeded by splitmix64 folded over (seed, coords...).
  static Rng derive(std::uint64_t seed, std::initializer_list<std::uint64_t> coords) {
    std::uint64_t h = splitmix64(seed);
    for (std::uint64_t c : coords) h = splitmix64(h ^ splitmix64(c + 0x632BE59BD9B4E019ULL));
    return Rng(h);
  }

  std::uint64_t next() { return engine_(); }

  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      const std::uint64_t r = next();
      if (r >= threshold) return r % n;
    }
  }

  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  std::mt19937_64 engine_;
};

}  // namespace pcmae
