#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "gridrate/lattice.hpp"
#include "gridrate/prior.hpp"
#include "gridrate/rng.hpp"

namespace gridrate {

struct ChannelRealization {
  LatticeSpec spec;
  std::vector<double> symbols;       // d
  double sigma2 = 1.0;
  std::vector<double> observations;  // y = S d + v
  std::uint64_t seed = 0;
};

// y = S d + sigma * g where g is the standard-normal stream of `rng`.
// Scaling a unit-variance stream keeps the noise shape shared across sweeps
// that reuse the same seed at different SNR points.
inline std::vector<double> simulate_observation(const InterferenceMatrix& s,
                                                const std::vector<double>& symbols,
                                                double sigma2, CounterRng& rng) {
  if (symbols.size() != s.n_vars)
    throw std::invalid_argument("simulate_observation: symbol/matrix dimension mismatch");
  if (!(sigma2 > 0.0)) throw std::invalid_argument("simulate_observation: sigma2 must be > 0");
  std::vector<double> y = s.multiply(symbols);
  const double sigma = std::sqrt(sigma2);
  for (double& v : y) v += sigma * rng.next_gaussian();
  return y;
}

// One full channel draw: the trial stream first yields the N^2 symbols, then
// the N^2 noise deviates.
inline ChannelRealization make_realization(const LatticeSpec& spec, const InterferenceMatrix& s,
                                           const InputPrior& prior, double sigma2,
                                           std::uint64_t seed) {
  spec.validate();
  CounterRng rng(seed);
  ChannelRealization r;
  r.spec = spec;
  r.sigma2 = sigma2;
  r.seed = seed;
  r.symbols = sample_symbols(prior, s.n_vars, rng);
  r.observations = simulate_observation(s, r.symbols, sigma2, rng);
  return r;
}

inline ChannelRealization make_realization(const LatticeSpec& spec, const InputPrior& prior,
                                           double sigma2, std::uint64_t seed) {
  return make_realization(spec, build_interference_matrix(spec), prior, sigma2, seed);
}

}  // namespace gridrate
