#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "gridrate/factor_graph.hpp"
#include "gridrate/lattice.hpp"
#include "gridrate/logdomain.hpp"

namespace gridrate {

// ---------------------------------------------------------------------------
// Brute force: ln sum over all q^n assignments of the product of factors.
// Factor table indices are carried incrementally as exact integers while an
// odometer walks the assignments; only the per-state log sum is recomputed.

inline double brute_force_log_partition(const FactorGraph& fg) {
  const std::uint32_t q = fg.domain_size();
  const std::uint32_t n = fg.n_vars;
  if (q < 1 || n < 1) throw std::invalid_argument("brute_force_log_partition: empty model");
  if (n * std::log2(static_cast<double>(q)) > 24.0)
    throw GuardError("brute_force_log_partition: state space exceeds 2^24");

  // var -> (factor index, stride of that var inside the factor table)
  std::vector<std::vector<std::pair<std::uint32_t, std::uint64_t>>> strides(n);
  for (std::uint32_t fi = 0; fi < fg.factors.size(); ++fi) {
    std::uint64_t stride = 1;
    for (std::uint32_t v : fg.factors[fi].scope) {
      strides[v].emplace_back(fi, stride);
      stride *= q;
    }
  }

  std::vector<std::uint64_t> idx(fg.factors.size(), 0);
  std::vector<std::uint32_t> digits(n, 0);
  OnlineLse lse;
  for (;;) {
    double log_val = 0.0;
    for (std::size_t fi = 0; fi < fg.factors.size(); ++fi)
      log_val += fg.factors[fi].log_table[idx[fi]];
    lse.add(log_val);

    std::uint32_t v = 0;
    for (; v < n; ++v) {
      if (++digits[v] < q) {
        for (const auto& [fi, st] : strides[v]) idx[fi] += st;
        break;
      }
      digits[v] = 0;
      for (const auto& [fi, st] : strides[v]) idx[fi] -= st * (q - 1);
    }
    if (v == n) break;
  }
  return lse.value();
}

// ---------------------------------------------------------------------------
// Sequential (strip) elimination: introduce variables in a fixed order,
// absorb each factor once its whole scope is live, and sum a variable out as
// soon as no unabsorbed factor mentions it. For raster order on a grid with
// one-ring interference the live frontier never exceeds 2N+1 variables.

namespace detail {

struct StripPlan {
  std::vector<std::uint32_t> order;                 // introduction order
  std::vector<std::vector<std::uint32_t>> absorb;   // step -> factor indices
  std::vector<std::vector<std::uint32_t>> eliminate;  // step -> vars to sum out
  std::size_t max_frontier = 0;
};

inline StripPlan make_strip_plan(const FactorGraph& fg, std::vector<std::uint32_t> order) {
  if (order.size() != fg.n_vars)
    throw std::invalid_argument("make_strip_plan: order must list every variable once");
  std::vector<std::uint32_t> pos(fg.n_vars, UINT32_MAX);
  for (std::uint32_t t = 0; t < order.size(); ++t) {
    if (order[t] >= fg.n_vars || pos[order[t]] != UINT32_MAX)
      throw std::invalid_argument("make_strip_plan: order is not a permutation");
    pos[order[t]] = t;
  }

  StripPlan plan;
  plan.order = std::move(order);
  plan.absorb.resize(fg.n_vars);
  plan.eliminate.resize(fg.n_vars);

  std::vector<std::uint32_t> last_use(fg.n_vars, 0);
  for (std::uint32_t v = 0; v < fg.n_vars; ++v) last_use[v] = pos[v];
  for (std::uint32_t fi = 0; fi < fg.factors.size(); ++fi) {
    std::uint32_t intro = 0;
    for (std::uint32_t v : fg.factors[fi].scope) intro = std::max(intro, pos[v]);
    plan.absorb[intro].push_back(fi);
    for (std::uint32_t v : fg.factors[fi].scope) last_use[v] = std::max(last_use[v], intro);
  }
  for (std::uint32_t v = 0; v < fg.n_vars; ++v) plan.eliminate[last_use[v]].push_back(v);

  std::size_t live = 0;
  for (std::uint32_t t = 0; t < fg.n_vars; ++t) {
    ++live;
    plan.max_frontier = std::max(plan.max_frontier, live);
    live -= plan.eliminate[t].size();
  }
  return plan;
}

}  // namespace detail

inline double strip_dp_log_partition(const FactorGraph& fg, std::vector<std::uint32_t> order) {
  const std::uint32_t q = fg.domain_size();
  auto plan = detail::make_strip_plan(fg, std::move(order));
  if (plan.max_frontier * std::log2(static_cast<double>(q)) > 25.0)
    throw GuardError("strip_dp_log_partition: frontier of " + std::to_string(plan.max_frontier) +
                     " variables exceeds the 2^25 state budget");

  std::vector<std::uint32_t> frontier;          // var ids, digit k of the table
  std::vector<double> table = {0.0};            // log table over frontier states
  std::vector<double> scratch;

  for (std::uint32_t t = 0; t < fg.n_vars; ++t) {
    // Introduce order[t] as the new most significant digit.
    const std::size_t old_sz = table.size();
    table.resize(old_sz * q);
    for (std::uint32_t a = 1; a < q; ++a)
      std::copy_n(table.begin(), old_sz, table.begin() + static_cast<std::ptrdiff_t>(a * old_sz));
    frontier.push_back(plan.order[t]);

    for (std::uint32_t fi : plan.absorb[t]) {
      const Factor& f = fg.factors[fi];
      // Factor-table stride per frontier digit (0 where the digit is not in scope).
      std::vector<std::uint64_t> digit_stride(frontier.size(), 0);
      for (std::size_t sp = 0; sp < f.scope.size(); ++sp) {
        const auto it = std::find(frontier.begin(), frontier.end(), f.scope[sp]);
        if (it == frontier.end())
          throw std::logic_error("strip_dp_log_partition: absorbed factor var not live");
        std::uint64_t st = 1;
        for (std::size_t k = 0; k < sp; ++k) st *= q;
        digit_stride[static_cast<std::size_t>(it - frontier.begin())] = st;
      }
      std::vector<std::uint32_t> digits(frontier.size(), 0);
      std::uint64_t fidx = 0;
      for (std::size_t s = 0; s < table.size(); ++s) {
        table[s] += f.log_table[fidx];
        for (std::size_t d = 0; d < digits.size(); ++d) {
          if (++digits[d] < q) {
            fidx += digit_stride[d];
            break;
          }
          digits[d] = 0;
          fidx -= digit_stride[d] * (q - 1);
        }
      }
    }

    for (std::uint32_t v : plan.eliminate[t]) {
      const auto it = std::find(frontier.begin(), frontier.end(), v);
      const std::size_t p = static_cast<std::size_t>(it - frontier.begin());
      std::uint64_t lo = 1;
      for (std::size_t k = 0; k < p; ++k) lo *= q;
      const std::uint64_t hi = table.size() / (lo * q);
      scratch.resize(table.size() / q);
      std::vector<double> vals(q);
      for (std::uint64_t h = 0; h < hi; ++h)
        for (std::uint64_t l = 0; l < lo; ++l) {
          for (std::uint32_t a = 0; a < q; ++a) vals[a] = table[(h * q + a) * lo + l];
          scratch[h * lo + l] = log_sum_exp(vals);
        }
      table.swap(scratch);
      frontier.erase(it);
    }
  }
  if (!frontier.empty() || table.size() != 1)
    throw std::logic_error("strip_dp_log_partition: elimination did not close");
  return table[0];
}

inline std::vector<std::uint32_t> raster_order(int size_n, bool transposed = false) {
  std::vector<std::uint32_t> order(static_cast<std::size_t>(size_n) * size_n);
  if (!transposed) {
    std::iota(order.begin(), order.end(), 0u);
  } else {
    std::size_t t = 0;
    for (int c = 0; c < size_n; ++c)
      for (int r = 0; r < size_n; ++r) order[t++] = static_cast<std::uint32_t>(r * size_n + c);
  }
  return order;
}

inline double strip_dp_log_partition(const FactorGraph& fg, int size_n, bool transposed = false) {
  // The frontier stays small only while scopes span few consecutive rows in
  // the elimination direction; reject anything wider than a 3-row band.
  for (const auto& f : fg.factors) {
    int lo = size_n, hi = -1;
    for (std::uint32_t v : f.scope) {
      const int band = transposed ? static_cast<int>(v) % size_n : static_cast<int>(v) / size_n;
      lo = std::min(lo, band);
      hi = std::max(hi, band);
    }
    if (hi - lo + 1 > 3)
      throw GuardError("strip_dp_log_partition: unsupported structure, factor " +
                       std::to_string(f.id) + " spans more than 3 rows");
  }
  return strip_dp_log_partition(fg, raster_order(size_n, transposed));
}

// Ledger-including forms: these return ln Z~ of the original (unnormalized)
// model.
inline double brute_force_log_partition(const FactorGraph& fg, const LogConstantLedger& ledger) {
  return reconcile_log_partition(brute_force_log_partition(fg), ledger);
}

inline double strip_dp_log_partition(const FactorGraph& fg, const LatticeSpec& spec,
                                     const LogConstantLedger& ledger, bool transposed = false) {
  return reconcile_log_partition(strip_dp_log_partition(fg, spec.size_n, transposed), ledger);
}

// ---------------------------------------------------------------------------
// Gauss-Hermite quadrature (weight e^{-x^2}), nodes by Newton iteration on
// the orthonormal recurrence. For a standard normal V,
//   E[f(V)] = pi^{-1/2} * sum_i w_i f(sqrt(2) x_i).

struct GaussHermite {
  std::vector<double> nodes;
  std::vector<double> weights;
};

inline GaussHermite gauss_hermite(int n) {
  if (n < 2 || n > 256) throw std::invalid_argument("gauss_hermite: n out of range");
  GaussHermite gh;
  gh.nodes.resize(n);
  gh.weights.resize(n);
  const double pim4 = 0.7511255444649425;  // pi^{-1/4}
  const int m = (n + 1) / 2;
  double z = 0.0, z_prev = 0.0, z_prev2 = 0.0;
  for (int i = 0; i < m; ++i) {
    if (i == 0) {
      z = std::sqrt(2.0 * n + 1.0) - 1.85575 * std::pow(2.0 * n + 1.0, -1.0 / 6.0);
    } else if (i == 1) {
      z -= 1.14 * std::pow(static_cast<double>(n), 0.426) / z;
    } else if (i == 2) {
      z = 1.86 * z - 0.86 * z_prev;
    } else if (i == 3) {
      z = 1.91 * z - 0.91 * z_prev;
    } else {
      z = 2.0 * z - z_prev2;
    }
    double pp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p1 = pim4, p2 = 0.0;
      for (int j = 0; j < n; ++j) {
        const double p3 = p2;
        p2 = p1;
        p1 = z * std::sqrt(2.0 / (j + 1)) * p2 - std::sqrt(static_cast<double>(j) / (j + 1)) * p3;
      }
      pp = std::sqrt(2.0 * n) * p2;
      const double dz = p1 / pp;
      z -= dz;
      if (std::abs(dz) < 1e-15) break;
    }
    z_prev2 = z_prev;
    z_prev = z;
    gh.nodes[i] = -z;  // ascending order, negative half first
    gh.nodes[n - 1 - i] = z;
    gh.weights[i] = 2.0 / (pp * pp);
    gh.weights[n - 1 - i] = gh.weights[i];
  }
  if (n % 2 == 1) gh.nodes[n / 2] = 0.0;  // exact symmetry for the middle node
  return gh;
}

// Mutual information of a +/-1 input through an additive Gaussian channel at
// linear SNR 1/sigma2, in bits:
//   I = 1 - E_v[ log2(1 + exp(-2 (1 + sqrt(sigma2) v) / sigma2)) ].
inline double bpsk_awgn_mutual_information(double snr_linear, int n_nodes = 96) {
  if (!(snr_linear > 0.0))
    throw std::invalid_argument("bpsk_awgn_mutual_information: snr must be > 0");
  const auto gh = gauss_hermite(n_nodes);
  const double sigma2 = 1.0 / snr_linear;
  const double sigma = std::sqrt(sigma2);
  const double inv_sqrt_pi = 0.5641895835477563;
  double acc = 0.0;
  for (int i = 0; i < n_nodes; ++i) {
    const double v = std::sqrt(2.0) * gh.nodes[i];
    acc += gh.weights[i] * softplus(-2.0 * (1.0 + sigma * v) / sigma2);
  }
  return 1.0 - inv_sqrt_pi * acc / std::log(2.0);
}

}  // namespace gridrate
