#pragma once

#include <cmath>
#include <cstdio>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "gridrate/rng.hpp"

namespace gridrate {

// Finite input alphabet with per-symbol probabilities.
struct InputPrior {
  std::vector<double> alphabet;
  std::vector<double> probabilities;

  void validate() const {
    if (alphabet.empty() || alphabet.size() != probabilities.size())
      throw std::invalid_argument("prior: alphabet/probability size mismatch");
    double sum = 0.0;
    for (std::size_t i = 0; i < alphabet.size(); ++i) {
      if (probabilities[i] < 0.0) throw std::invalid_argument("prior: negative probability");
      sum += probabilities[i];
      for (std::size_t j = i + 1; j < alphabet.size(); ++j)
        if (alphabet[i] == alphabet[j]) throw std::invalid_argument("prior: duplicate alphabet value");
    }
    if (std::abs(sum - 1.0) > 1e-12)
      throw std::invalid_argument("prior: probabilities must sum to 1");
  }

  static InputPrior uniform_binary() { return {{+1.0, -1.0}, {0.5, 0.5}}; }

  // (K+1)-ary alphabet {K, K-2, ..., -K} with binomial weights: the sum of K
  // independent equiprobable +-1 symbols.
  static InputPrior binomial(int k) {
    if (k < 1) throw std::invalid_argument("binomial prior: K >= 1 required");
    InputPrior p;
    double coeff = 1.0;  // C(k, j)
    for (int j = 0; j <= k; ++j) {
      p.alphabet.push_back(static_cast<double>(k - 2 * j));
      p.probabilities.push_back(coeff * std::pow(0.5, k));
      coeff = coeff * (k - j) / (j + 1);
    }
    return p;
  }
};

// Canonical text form "v:p;v:p;...", CSV-safe (no commas).
inline std::string format_prior(const InputPrior& prior) {
  std::string out;
  char buf[64];
  for (std::size_t i = 0; i < prior.alphabet.size(); ++i) {
    if (i) out += ';';
    std::snprintf(buf, sizeof buf, "%.17g", prior.alphabet[i]);
    out += buf;
    out += ':';
    std::snprintf(buf, sizeof buf, "%.17g", prior.probabilities[i]);
    out += buf;
  }
  return out;
}

// Accepts "binary", "binomialK", or an explicit "v:p;v:p" list.
inline InputPrior parse_prior(const std::string& text) {
  if (text == "binary" || text.empty()) return InputPrior::uniform_binary();
  if (text.rfind("binomial", 0) == 0) {
    const int k = std::stoi(text.substr(8));
    return InputPrior::binomial(k);
  }
  InputPrior p;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t semi = text.find(';', pos);
    if (semi == std::string::npos) semi = text.size();
    const std::string item = text.substr(pos, semi - pos);
    const std::size_t colon = item.find(':');
    if (colon == std::string::npos)
      throw std::invalid_argument("prior: expected value:prob items separated by ';'");
    p.alphabet.push_back(std::stod(item.substr(0, colon)));
    p.probabilities.push_back(std::stod(item.substr(colon + 1)));
    pos = semi + 1;
  }
  p.validate();
  return p;
}

inline std::vector<double> sample_symbols(const InputPrior& prior, std::size_t count,
                                          CounterRng& rng) {
  prior.validate();
  if (count == 0) throw std::invalid_argument("sample_symbols: count must be >= 1");
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    const double u = rng.next_uniform();
    double cum = 0.0;
    double value = prior.alphabet.back();
    for (std::size_t j = 0; j < prior.alphabet.size(); ++j) {
      cum += prior.probabilities[j];
      if (u <= cum) { value = prior.alphabet[j]; break; }
    }
    out[i] = value;
  }
  return out;
}

}  // namespace gridrate
