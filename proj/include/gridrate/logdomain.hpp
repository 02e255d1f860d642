#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <vector>

namespace gridrate {

inline double log_sum_exp(std::span<const double> xs) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : xs)
    if (x > m) m = x;
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

inline double log_sum_exp(const std::vector<double>& xs) {
  return log_sum_exp(std::span<const double>(xs));
}

// Streaming log-sum-exp: rescales the running sum whenever a new maximum
// arrives, so arbitrarily long accumulations stay in range.
class OnlineLse {
 public:
  void add(double x) {
    if (x <= max_) {
      sum_ += std::exp(x - max_);
    } else {
      sum_ = sum_ * std::exp(max_ - x) + 1.0;
      max_ = x;
    }
  }

  double value() const {
    if (!std::isfinite(max_)) return max_;
    return max_ + std::log(sum_);
  }

 private:
  double max_ = -std::numeric_limits<double>::infinity();
  double sum_ = 0.0;
};

// log(1 + e^x) without overflow for large |x|.
inline double softplus(double x) {
  if (x > 35.0) return x + std::log1p(std::exp(-x));
  if (x < -35.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

}  // namespace gridrate
