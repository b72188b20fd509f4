// ebt/rng.hpp
//
// Seeded random streams. Distributions are implemented here rather than with
// <random>'s distribution classes, whose output sequences are
// implementation-defined; the engine itself (mt19937_64) is fully specified.

#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace ebt {

// splitmix64 finalizer, used to derive sub-stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t hash_name(std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(mix64(seed)) {}

  std::uint64_t seed() const { return seed_; }

  // Independent stream keyed by a name ("data", "train", "eval", "perturb").
  Rng substream(std::string_view name) const {
    return Rng(mix64(seed_ ^ hash_name(name)));
  }
  Rng substream(std::string_view name, std::uint64_t index) const {
    return Rng(mix64(mix64(seed_ ^ hash_name(name)) + index));
  }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1) with 53 bits of mantissa.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer on [lo, hi], rejection sampled to avoid modulo bias.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

  // Box-Muller; caches the second variate.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace ebt
