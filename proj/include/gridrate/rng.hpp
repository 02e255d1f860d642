#pragma once

#include <cstdint>
#include <cmath>

namespace gridrate {

// Counter-based uniform stream built on the splitmix64 finalizer. The k-th
// output is a pure function of (seed, k), so any two implementations that
// follow this recipe produce bit-identical streams.
inline std::uint64_t splitmix64_finalize(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t kGolden64 = 0x9E3779B97F4A7C15ULL;

// Sub-seed for trial t of a run: finalize(master + (t+1)*golden). Injective
// in t for a fixed master seed.
inline std::uint64_t mix_seed(std::uint64_t master, std::uint64_t index) {
  return splitmix64_finalize(master + (index + 1) * kGolden64);
}

class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += kGolden64;
    return splitmix64_finalize(state_);
  }

  // Uniform on (0,1]: the +1 keeps log() out of trouble in Box-Muller.
  double next_uniform() {
    return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller. Draws two uniforms per pair and caches
  // the second deviate, so n gaussians consume exactly 2*ceil(n/2) uniforms.
  double next_gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = next_uniform();
    const double u2 = next_uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace gridrate
