#pragma once

#include <cstdint>
#include <random>

namespace msmcal {

// splitmix64 finalizer; used to derive independent per-replicate seeds.
std::uint64_t splitmix64(std::uint64_t x);

// Seed for substream `stream` of a master seed.
std::uint64_t substream_seed(std::uint64_t seed, std::uint64_t stream);

/// Seedable generator (64-bit Mersenne Twister) with portable variate
/// transforms, so streams are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Uniform on the open interval (0, 1) with 53 random bits.
  double uniform();
  // Standard normal by the Box-Muller transform.
  double normal();
  bool bernoulli(double p) { return uniform() < p; }
  // Uniform integer in [0, n), unbiased.
  std::uint64_t below(std::uint64_t n);

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace msmcal
