#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gridrate/lattice.hpp"
#include "gridrate/logdomain.hpp"
#include "gridrate/prior.hpp"

namespace gridrate {

// Log-domain factor over a sorted variable scope. Table index encodes the
// joint assignment with scope[0] as the least significant digit, base q.
struct Factor {
  std::uint32_t id = 0;
  std::vector<std::uint32_t> scope;
  std::vector<double> log_table;
};

// Discrete model whose partition sum, together with the ledger constants,
// reproduces ln Z~ = ln sum_x Pr(x) exp(-|y - Sx|^2 / (2 sigma^2)).
struct FactorGraph {
  std::uint32_t n_vars = 0;
  std::vector<double> domain;  // shared alphabet (zero-probability values pruned)
  std::vector<Factor> factors;

  std::uint32_t domain_size() const { return static_cast<std::uint32_t>(domain.size()); }

  std::size_t table_size(const std::vector<std::uint32_t>& scope) const {
    std::size_t sz = 1;
    for (std::size_t i = 0; i < scope.size(); ++i) sz *= domain.size();
    return sz;
  }
};

// Every additive constant dropped while normalizing factor tables, in nats.
// reconcile_log_partition folds them back, so normalization never changes
// the recovered ln Z~.
struct LogConstantLedger {
  struct Entry {
    std::string label;
    double nats;
  };
  std::vector<Entry> entries;
  double total = 0.0;

  void add(std::string label, double nats) {
    entries.push_back({std::move(label), nats});
    total += nats;
  }
};

inline double reconcile_log_partition(double raw_log_sum, const LogConstantLedger& ledger) {
  if (!std::isfinite(raw_log_sum) || !std::isfinite(ledger.total))
    throw std::invalid_argument("reconcile_log_partition: non-finite input");
  return raw_log_sum + ledger.total;
}

// One observation factor per channel output (scope = interference row
// support) plus one prior factor per variable. Tables are max-normalized;
// the shifts go to the ledger.
inline std::pair<FactorGraph, LogConstantLedger> build_factor_graph(const InterferenceMatrix& s,
                                                                    const std::vector<double>& y,
                                                                    double sigma2,
                                                                    const InputPrior& prior) {
  if (!(sigma2 > 0.0)) throw std::invalid_argument("build_factor_graph: sigma2 must be > 0");
  if (y.size() != s.n_vars) throw std::invalid_argument("build_factor_graph: dimension mismatch");
  prior.validate();

  FactorGraph fg;
  LogConstantLedger ledger;
  fg.n_vars = s.n_vars;
  for (std::size_t i = 0; i < prior.alphabet.size(); ++i) {
    if (prior.probabilities[i] > 0.0) {
      fg.domain.push_back(prior.alphabet[i]);
    } else {
      // Structural domain prune, not a constant.
      char buf[64];
      std::snprintf(buf, sizeof buf, "domain-prune value=%.17g", prior.alphabet[i]);
      ledger.add(buf, 0.0);
    }
  }
  const std::uint32_t q = fg.domain_size();

  std::vector<double> log_prior;
  for (std::size_t i = 0; i < prior.alphabet.size(); ++i)
    if (prior.probabilities[i] > 0.0) log_prior.push_back(std::log(prior.probabilities[i]));

  fg.factors.reserve(2 * fg.n_vars);

  // Observation factors.
  for (std::uint32_t k = 0; k < s.n_vars; ++k) {
    Factor f;
    f.id = k;
    std::vector<double> coeff;  // aligned with sorted scope
    {
      auto row = s.rows[k];
      std::sort(row.begin(), row.end(),
                [](const auto& a, const auto& b) { return a.first < b.first; });
      for (const auto& [j, a] : row) {
        f.scope.push_back(j);
        coeff.push_back(a);
      }
    }
    const std::size_t nstates = fg.table_size(f.scope);
    f.log_table.resize(nstates);
    std::vector<std::uint32_t> digits(f.scope.size(), 0);
    for (std::size_t st = 0; st < nstates; ++st) {
      double acc = 0.0;
      for (std::size_t d = 0; d < digits.size(); ++d) acc += coeff[d] * fg.domain[digits[d]];
      const double resid = y[k] - acc;
      f.log_table[st] = -resid * resid / (2.0 * sigma2);
      for (std::size_t d = 0; d < digits.size(); ++d) {
        if (++digits[d] < q) break;
        digits[d] = 0;
      }
    }
    const double shift = *std::max_element(f.log_table.begin(), f.log_table.end());
    for (double& v : f.log_table) v -= shift;
    ledger.add("obs-shift[" + std::to_string(k) + "]", shift);
    fg.factors.push_back(std::move(f));
  }

  // Prior factors.
  const double prior_shift = *std::max_element(log_prior.begin(), log_prior.end());
  for (std::uint32_t i = 0; i < s.n_vars; ++i) {
    Factor f;
    f.id = s.n_vars + i;
    f.scope = {i};
    f.log_table = log_prior;
    for (double& v : f.log_table) v -= prior_shift;
    ledger.add("prior-shift[" + std::to_string(i) + "]", prior_shift);
    fg.factors.push_back(std::move(f));
  }

  return {std::move(fg), std::move(ledger)};
}

// Line-oriented debug form: `factor <id> scope=<ids> logtable=<values>`.
inline void dump_factor_graph(const FactorGraph& fg, std::ostream& os) {
  char buf[64];
  for (const auto& f : fg.factors) {
    os << "factor " << f.id << " scope=";
    for (std::size_t i = 0; i < f.scope.size(); ++i) {
      if (i) os << ',';
      os << f.scope[i];
    }
    os << " logtable=";
    for (std::size_t i = 0; i < f.log_table.size(); ++i) {
      if (i) os << ',';
      std::snprintf(buf, sizeof buf, "%.17g", f.log_table[i]);
      os << buf;
    }
    os << '\n';
  }
}

}  // namespace gridrate
