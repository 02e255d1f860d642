#pragma once

#include <cmath>
#include <cstdint>
#include <exception>
#include <numbers>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "gridrate/channel.hpp"
#include "gridrate/exact.hpp"
#include "gridrate/factor_graph.hpp"
#include "gridrate/gbp.hpp"
#include "gridrate/lattice.hpp"
#include "gridrate/prior.hpp"
#include "gridrate/region_graph.hpp"
#include "gridrate/rng.hpp"

namespace gridrate {

enum class Engine { gbp, brute, strip };

inline const char* engine_name(Engine e) {
  switch (e) {
    case Engine::gbp: return "gbp";
    case Engine::brute: return "brute";
    case Engine::strip: return "strip";
  }
  return "?";
}

inline Engine parse_engine(const std::string& s) {
  if (s == "gbp") return Engine::gbp;
  if (s == "brute") return Engine::brute;
  if (s == "strip") return Engine::strip;
  throw std::invalid_argument("unknown engine '" + s + "' (expected gbp, brute, or strip)");
}

struct TrialResult {
  std::uint64_t seed = 0;
  double free_energy_per_symbol = 0.0;  // F~ in nats, prior absorbed
  double sir_nats = 0.0;
  double sir_bits = 0.0;
  bool converged = false;
  int iterations = 0;
};

struct RateEstimate {
  // Effective configuration, echoed into every output record.
  Topology topology = Topology::isi4;
  int size_n = 0;
  double alpha = 0.0;
  double snr_db = 0.0;
  double sigma2 = 0.0;
  std::string prior;
  Engine engine = Engine::gbp;
  int window = 3;
  double damping = 0.5;
  double tolerance = 1e-8;
  int max_iters = 2000;
  int trials = 0;
  std::uint64_t master_seed = 0;
  // Aggregates over trials, accumulated in trial-index order.
  double mean_sir_bits = 0.0;
  double std_sir_bits = 0.0;
  double stderr_sir_bits = 0.0;
  double mean_free_energy_per_symbol_nats = 0.0;
  double converged_fraction = 0.0;
  double mean_iterations = 0.0;
  std::vector<TrialResult> per_trial;
};

struct SirValue {
  double nats = 0.0;
  double bits = 0.0;
};

// I = F~ - 1/2 nats: the Gaussian kernel's conditional differential entropy
// contributes exactly 1/2 nat per symbol once the normalizing constant is
// dropped on both sides, and the input prior is already inside Z~. Negative
// small-sample values pass through unclamped.
inline SirValue sir_from_free_energy(double f_tilde_per_symbol) {
  if (!std::isfinite(f_tilde_per_symbol))
    throw std::invalid_argument("sir_from_free_energy: non-finite input");
  SirValue v;
  v.nats = f_tilde_per_symbol - 0.5;
  v.bits = v.nats / std::numbers::ln2;
  return v;
}

struct EstimatorOptions {
  Engine engine = Engine::gbp;
  int window = 3;
  GbpConfig gbp;
  int threads = 1;
};

namespace detail {

inline FreeEnergyEstimate run_engine(const ChannelRealization& real, const InputPrior& prior,
                                     const InterferenceMatrix& s, Engine engine,
                                     const GbpPlan* plan, const GbpConfig& cfg) {
  auto [fg, ledger] = build_factor_graph(s, real.observations, real.sigma2, prior);
  FreeEnergyEstimate est;
  switch (engine) {
    case Engine::gbp: {
      est = plan ? run_gbp(*plan, fg, ledger, cfg).estimate
                 : run_gbp(build_region_graph(real.spec.size_n, 3), fg, ledger, cfg).estimate;
      break;
    }
    case Engine::brute: {
      est.minus_log_z = -brute_force_log_partition(fg, ledger);
      est.per_symbol = est.minus_log_z / static_cast<double>(fg.n_vars);
      est.converged = true;
      break;
    }
    case Engine::strip: {
      est.minus_log_z = -strip_dp_log_partition(fg, real.spec, ledger);
      est.per_symbol = est.minus_log_z / static_cast<double>(fg.n_vars);
      est.converged = true;
      break;
    }
  }
  return est;
}

}  // namespace detail

// F~ = -(1/N^2) ln Z~ for one realization, by the requested engine.
inline FreeEnergyEstimate free_energy_per_symbol(const ChannelRealization& real,
                                                 const InputPrior& prior, Engine engine,
                                                 int window = 3, const GbpConfig& cfg = {}) {
  const auto s = build_interference_matrix(real.spec);
  if (engine != Engine::gbp) return detail::run_engine(real, prior, s, engine, nullptr, cfg);
  auto g = build_region_graph(real.spec.size_n, window);
  auto [fg0, ledger0] = build_factor_graph(s, real.observations, real.sigma2, prior);
  assign_factors(g, fg0);
  const auto plan = make_gbp_plan(g, fg0);
  return run_gbp(plan, fg0, ledger0, cfg).estimate;
}

// Monte-Carlo SIR estimate: trial t draws its symbols and noise from the
// counter stream seeded with mix_seed(master_seed, t), so a trial's
// realization is independent of how many trials run and of the SNR/alpha
// grid point it is embedded in.
inline RateEstimate monte_carlo_sir(const LatticeSpec& spec, double sigma2,
                                    const InputPrior& prior, int trials,
                                    std::uint64_t master_seed,
                                    const EstimatorOptions& opts = {}) {
  if (trials < 1) throw std::invalid_argument("monte_carlo_sir: trials must be >= 1");
  spec.validate();
  prior.validate();
  const auto s = build_interference_matrix(spec);

  // Structure (scopes, region graph, message plan) is trial-independent;
  // build it once from a zero-observation model.
  RegionGraph graph;
  GbpPlan plan;
  if (opts.engine == Engine::gbp) {
    graph = build_region_graph(spec.size_n, opts.window);
    auto [fg0, ledger0] = build_factor_graph(s, std::vector<double>(s.n_vars, 0.0), sigma2, prior);
    assign_factors(graph, fg0);
    plan = make_gbp_plan(graph, fg0);
  }

  std::vector<TrialResult> results(static_cast<std::size_t>(trials));
  const int n_threads = std::max(1, std::min(opts.threads, trials));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n_threads));

  auto worker = [&](int tid) {
    try {
      for (int t = tid; t < trials; t += n_threads) {
        const std::uint64_t seed = mix_seed(master_seed, static_cast<std::uint64_t>(t));
        const auto real = make_realization(spec, s, prior, sigma2, seed);
        const auto est = detail::run_engine(real, prior, s,
                                            opts.engine == Engine::gbp ? Engine::gbp : opts.engine,
                                            opts.engine == Engine::gbp ? &plan : nullptr, opts.gbp);
        const auto sir = sir_from_free_energy(est.per_symbol);
        results[static_cast<std::size_t>(t)] =
            {seed, est.per_symbol, sir.nats, sir.bits, est.converged, est.iterations};
      }
    } catch (...) {
      errors[static_cast<std::size_t>(tid)] = std::current_exception();
    }
  };
  if (n_threads == 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(n_threads));
    for (int tid = 0; tid < n_threads; ++tid) pool.emplace_back(worker, tid);
    for (auto& th : pool) th.join();
  }
  for (auto& err : errors)
    if (err) std::rethrow_exception(err);

  RateEstimate est;
  est.topology = spec.topology;
  est.size_n = spec.size_n;
  est.alpha = spec.alpha;
  est.sigma2 = sigma2;
  est.snr_db = sigma2_to_snr_db(sigma2);
  est.prior = format_prior(prior);
  est.engine = opts.engine;
  est.window = opts.window;
  est.damping = opts.gbp.damping;
  est.tolerance = opts.gbp.tolerance;
  est.max_iters = opts.gbp.max_iters;
  est.trials = trials;
  est.master_seed = master_seed;
  est.per_trial = std::move(results);

  double mean = 0.0, mean_f = 0.0, mean_it = 0.0, conv = 0.0;
  for (const auto& t : est.per_trial) {
    mean += t.sir_bits;
    mean_f += t.free_energy_per_symbol;
    mean_it += t.iterations;
    conv += t.converged ? 1.0 : 0.0;
  }
  const double m = static_cast<double>(trials);
  mean /= m;
  double var = 0.0;
  for (const auto& t : est.per_trial) var += (t.sir_bits - mean) * (t.sir_bits - mean);
  est.mean_sir_bits = mean;
  est.std_sir_bits = trials > 1 ? std::sqrt(var / (m - 1.0)) : 0.0;
  est.stderr_sir_bits = est.std_sir_bits / std::sqrt(m);
  est.mean_free_energy_per_symbol_nats = mean_f / m;
  est.converged_fraction = conv / m;
  est.mean_iterations = mean_it / m;
  return est;
}

struct RmsErrorRow {
  int size_n = 0;
  double rms_percent = 0.0;
  int trials = 0;
};

// Per lattice size: RMS of the relative gap between the message-passing and
// exact per-symbol free energies over `trials` fresh realizations, in percent.
inline std::vector<RmsErrorRow> rms_error_vs_exact(Topology topology, double alpha, double sigma2,
                                                   const InputPrior& prior, int n_lo, int n_hi,
                                                   int trials, std::uint64_t master_seed,
                                                   int window = 3, const GbpConfig& cfg = {}) {
  if (trials < 1) throw std::invalid_argument("rms_error_vs_exact: trials must be >= 1");
  if (n_lo < 3 || n_hi < n_lo) throw std::invalid_argument("rms_error_vs_exact: bad size range");
  std::vector<RmsErrorRow> rows;
  for (int n = n_lo; n <= n_hi; ++n) {
    const LatticeSpec spec{topology, n, alpha};
    const auto s = build_interference_matrix(spec);
    auto graph = build_region_graph(n, window);
    auto [fg0, ledger0] = build_factor_graph(s, std::vector<double>(s.n_vars, 0.0), sigma2, prior);
    assign_factors(graph, fg0);
    const auto plan = make_gbp_plan(graph, fg0);

    double acc = 0.0;
    for (int t = 0; t < trials; ++t) {
      const auto real =
          make_realization(spec, s, prior, sigma2, mix_seed(master_seed, static_cast<std::uint64_t>(t)));
      auto [fg, ledger] = build_factor_graph(s, real.observations, real.sigma2, prior);
      const double approx = run_gbp(plan, fg, ledger, cfg).estimate.per_symbol;
      const double exact =
          -strip_dp_log_partition(fg, spec, ledger) / static_cast<double>(fg.n_vars);
      const double rel = (approx - exact) / exact;
      acc += rel * rel;
    }
    rows.push_back({n, 100.0 * std::sqrt(acc / static_cast<double>(trials)), trials});
  }
  return rows;
}

}  // namespace gridrate
