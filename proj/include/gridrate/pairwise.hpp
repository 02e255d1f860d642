#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <utility>
#include <vector>

#include "gridrate/factor_graph.hpp"
#include "gridrate/lattice.hpp"
#include "gridrate/prior.hpp"

namespace gridrate {

// Quadratic-expansion view of the same posterior: expanding |y - Sx|^2 gives
// pair couplings R_ij = (S^T S)_ij and local fields h = S^T y, plus an
// x-independent constant. Used only to cross-check the direct factor graph.
struct PairwiseView {
  std::uint32_t n_vars = 0;
  std::vector<double> domain;
  // log phi_i(x) tables, one per variable, aligned with domain.
  std::vector<std::vector<double>> unary_log;
  // i < j, log psi_ij(x_i, x_j) = coupling * x_i * x_j.
  std::map<std::pair<std::uint32_t, std::uint32_t>, double> pair_coupling;
  double constant_nats = 0.0;  // additive constant folded out of the tables
};

namespace detail {

struct Quadratic {
  std::vector<double> r_diag;
  std::map<std::pair<std::uint32_t, std::uint32_t>, double> r_off;  // i < j
  std::vector<double> h;
  double yty = 0.0;
};

inline Quadratic expand_quadratic(const InterferenceMatrix& s, const std::vector<double>& y) {
  if (y.size() != s.n_vars) throw std::invalid_argument("expand_quadratic: dimension mismatch");
  Quadratic q;
  q.r_diag.assign(s.n_vars, 0.0);
  q.h.assign(s.n_vars, 0.0);
  for (std::uint32_t k = 0; k < s.n_vars; ++k) {
    q.yty += y[k] * y[k];
    const auto& row = s.rows[k];
    for (std::size_t a = 0; a < row.size(); ++a) {
      q.h[row[a].first] += row[a].second * y[k];
      q.r_diag[row[a].first] += row[a].second * row[a].second;
      for (std::size_t b = a + 1; b < row.size(); ++b) {
        auto key = std::minmax(row[a].first, row[b].first);
        q.r_off[{key.first, key.second}] += row[a].second * row[b].second;
      }
    }
  }
  return q;
}

}  // namespace detail

// Binary +/-1 case: x^2 = 1, so R_ii folds into the constant and the uniform
// prior contributes -N^2 ln 2. x^T R x = sum_i R_ii + 2 sum_{i<j} R_ij x_i x_j,
// so the per-pair log coupling is -R_ij x_i x_j / sigma^2.
inline PairwiseView build_pairwise_view(const InterferenceMatrix& s, const std::vector<double>& y,
                                        double sigma2) {
  if (!(sigma2 > 0.0)) throw std::invalid_argument("build_pairwise_view: sigma2 must be > 0");
  const auto q = detail::expand_quadratic(s, y);

  PairwiseView pv;
  pv.n_vars = s.n_vars;
  pv.domain = {+1.0, -1.0};
  double diag_sum = 0.0;
  for (double d : q.r_diag) diag_sum += d;
  pv.constant_nats = -(q.yty + diag_sum) / (2.0 * sigma2) -
                     static_cast<double>(s.n_vars) * std::log(2.0);
  pv.unary_log.resize(s.n_vars);
  for (std::uint32_t i = 0; i < s.n_vars; ++i) {
    pv.unary_log[i].resize(pv.domain.size());
    for (std::size_t a = 0; a < pv.domain.size(); ++a)
      pv.unary_log[i][a] = q.h[i] * pv.domain[a] / sigma2;
  }
  for (const auto& [key, rij] : q.r_off) pv.pair_coupling[key] = -rij / sigma2;
  return pv;
}

// General alphabet: the diagonal term -R_ii x^2/(2 sigma^2) no longer drops
// out, so it joins ln Pr(x) inside the unary tables.
inline PairwiseView build_pairwise_view(const InterferenceMatrix& s, const std::vector<double>& y,
                                        double sigma2, const InputPrior& prior) {
  if (!(sigma2 > 0.0)) throw std::invalid_argument("build_pairwise_view: sigma2 must be > 0");
  prior.validate();
  const auto q = detail::expand_quadratic(s, y);

  PairwiseView pv;
  pv.n_vars = s.n_vars;
  std::vector<double> log_prior;
  for (std::size_t a = 0; a < prior.alphabet.size(); ++a) {
    if (prior.probabilities[a] > 0.0) {
      pv.domain.push_back(prior.alphabet[a]);
      log_prior.push_back(std::log(prior.probabilities[a]));
    }
  }
  pv.constant_nats = -q.yty / (2.0 * sigma2);
  pv.unary_log.resize(s.n_vars);
  for (std::uint32_t i = 0; i < s.n_vars; ++i) {
    pv.unary_log[i].resize(pv.domain.size());
    for (std::size_t a = 0; a < pv.domain.size(); ++a) {
      const double x = pv.domain[a];
      pv.unary_log[i][a] =
          (q.h[i] * x - 0.5 * q.r_diag[i] * x * x) / sigma2 + log_prior[a];
    }
  }
  for (const auto& [key, rij] : q.r_off) pv.pair_coupling[key] = -rij / sigma2;
  return pv;
}

// Rewrites the pairwise view as a FactorGraph so both model routes feed the
// same exact-inference code. Pair factor index convention matches Factor:
// first scope variable is the least significant digit.
inline std::pair<FactorGraph, LogConstantLedger> pairwise_to_factor_graph(const PairwiseView& pv) {
  FactorGraph fg;
  LogConstantLedger ledger;
  fg.n_vars = pv.n_vars;
  fg.domain = pv.domain;
  const std::size_t q = pv.domain.size();
  ledger.add("pairwise-constant", pv.constant_nats);

  std::uint32_t next_id = 0;
  for (std::uint32_t i = 0; i < pv.n_vars; ++i) {
    Factor f;
    f.id = next_id++;
    f.scope = {i};
    f.log_table = pv.unary_log[i];
    const double shift = *std::max_element(f.log_table.begin(), f.log_table.end());
    for (double& v : f.log_table) v -= shift;
    ledger.add("pairwise-unary-shift[" + std::to_string(i) + "]", shift);
    fg.factors.push_back(std::move(f));
  }
  for (const auto& [key, coupling] : pv.pair_coupling) {
    Factor f;
    f.id = next_id++;
    f.scope = {key.first, key.second};
    f.log_table.resize(q * q);
    for (std::size_t b = 0; b < q; ++b)
      for (std::size_t a = 0; a < q; ++a)
        f.log_table[b * q + a] = coupling * pv.domain[a] * pv.domain[b];
    const double shift = *std::max_element(f.log_table.begin(), f.log_table.end());
    for (double& v : f.log_table) v -= shift;
    ledger.add("pairwise-pair-shift", shift);
    fg.factors.push_back(std::move(f));
  }
  return {std::move(fg), std::move(ledger)};
}

}  // namespace gridrate
