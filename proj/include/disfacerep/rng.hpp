#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace disfacerep {

// 64-bit FNV-1a; used to derive substream seeds from sample ids.
std::uint64_t fnv1a64(std::string_view bytes);
std::uint64_t splitmix64(std::uint64_t x);

// Deterministic random stream. Distributions are implemented here rather than
// through <random> so draws do not depend on the standard library vendor.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 bits of resolution.
  double uniform();
  double uniform(double lo, double hi);
  // Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n);
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

  // Independent child stream keyed by tag; does not advance this stream.
  Rng substream(std::uint64_t tag) const;
  Rng substream(std::string_view tag) const { return substream(fnv1a64(tag)); }

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

inline Rng seeded_rng(std::uint64_t seed) { return Rng(seed); }

}  // namespace disfacerep
