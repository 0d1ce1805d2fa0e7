// Test-only statistics helpers: chi-square goodness of fit with a p-value
// from the regularized incomplete gamma function. Independent of the library
// under test.
#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace teststats {

// Regularized lower incomplete gamma P(a, x) via series / continued fraction.
inline double regularized_gamma_p(double a, double x) {
  if (x < 0.0 || a <= 0.0) throw std::invalid_argument("regularized_gamma_p: bad args");
  if (x == 0.0) return 0.0;
  double gln = std::lgamma(a);
  if (x < a + 1.0) {
    // series
    double ap = a, sum = 1.0 / a, del = sum;
    for (int i = 0; i < 500; ++i) {
      ap += 1.0;
      del *= x / ap;
      sum += del;
      if (std::fabs(del) < std::fabs(sum) * 1e-15) break;
    }
    return sum * std::exp(-x + a * std::log(x) - gln);
  }
  // continued fraction (Lentz)
  double b = x + 1.0 - a, c = 1e300, d = 1.0 / b, h = d;
  for (int i = 1; i <= 500; ++i) {
    double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::fabs(d) < 1e-300) d = 1e-300;
    c = b + an / c;
    if (std::fabs(c) < 1e-300) c = 1e-300;
    d = 1.0 / d;
    double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < 1e-15) break;
  }
  double q = std::exp(-x + a * std::log(x) - gln) * h;
  return 1.0 - q;
}

// Upper tail of the chi-square distribution with df degrees of freedom.
inline double chi_square_sf(double stat, int df) {
  return 1.0 - regularized_gamma_p(df / 2.0, stat / 2.0);
}

// Goodness-of-fit p-value. Bins with expected count below 5 are merged into
// their left neighbor to keep the chi-square approximation valid.
inline double chi_square_gof_p(const std::vector<long>& counts, const std::vector<double>& probs) {
  if (counts.size() != probs.size()) throw std::invalid_argument("chi_square_gof_p: size mismatch");
  long total = 0;
  for (long c : counts) total += c;
  std::vector<double> exp_merged;
  std::vector<double> obs_merged;
  for (size_t i = 0; i < counts.size(); ++i) {
    double e = probs[i] * total;
    if (!exp_merged.empty() && (e < 5.0 || exp_merged.back() < 5.0)) {
      exp_merged.back() += e;
      obs_merged.back() += counts[i];
    } else {
      exp_merged.push_back(e);
      obs_merged.push_back(counts[i]);
    }
  }
  if (exp_merged.size() < 2) return 1.0;  // nothing to test after merging
  double stat = 0.0;
  for (size_t i = 0; i < exp_merged.size(); ++i) {
    double d = obs_merged[i] - exp_merged[i];
    stat += d * d / exp_merged[i];
  }
  return chi_square_sf(stat, static_cast<int>(exp_merged.size()) - 1);
}

}  // namespace teststats
