#include "ponder/haltdist.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace ponder::haltdist {

ExitDistribution posterior_from_halting(const HaltingVector& h) {
  const int n = static_cast<int>(h.lambdas.size());
  if (n < 1) throw std::invalid_argument("posterior_from_halting: empty halting vector");
  for (int i = 0; i + 1 < n; ++i) {
    double l = h.lambdas[i];
    if (!(l > 0.0 && l < 1.0))
      throw std::invalid_argument("posterior_from_halting: lambda_" + std::to_string(i + 1) +
                                  " = " + std::to_string(l) + " outside (0,1)");
  }
  ExitDistribution out;
  out.probs.resize(n);
  if (n <= 32) {
    double survival = 1.0;
    for (int i = 0; i + 1 < n; ++i) {
      out.probs[i] = h.lambdas[i] * survival;
      survival *= 1.0 - h.lambdas[i];
    }
    out.probs[n - 1] = survival;  // residual rule: lambda_n forced to 1
  } else {
    // Log-space survival to avoid underflow at large depth.
    double log_survival = 0.0;
    for (int i = 0; i + 1 < n; ++i) {
      out.probs[i] = h.lambdas[i] * std::exp(log_survival);
      log_survival += std::log1p(-h.lambdas[i]);
    }
    out.probs[n - 1] = std::exp(log_survival);
  }
  return out;
}

ExitDistribution geometric_prior(double lambda_prior, int n) {
  if (!(lambda_prior > 0.0 && lambda_prior < 1.0))
    throw std::invalid_argument("geometric_prior: lambda outside (0,1)");
  if (n < 1) throw std::invalid_argument("geometric_prior: n < 1");
  ExitDistribution out;
  out.probs.resize(n);
  if (n <= 32) {
    double survival = 1.0;
    for (int i = 0; i + 1 < n; ++i) {
      out.probs[i] = lambda_prior * survival;
      survival *= 1.0 - lambda_prior;
    }
    out.probs[n - 1] = survival;
  } else {
    double log_one_minus = std::log1p(-lambda_prior);
    for (int i = 0; i + 1 < n; ++i)
      out.probs[i] = lambda_prior * std::exp(i * log_one_minus);
    out.probs[n - 1] = std::exp((n - 1) * log_one_minus);
  }
  return out;
}

TruncationIndex truncation_index(const ExitDistribution& p, double mass) {
  double acc = 0.0;
  const int n = p.n();
  for (int i = 0; i < n; ++i) {
    acc += p.probs[i];
    if (acc >= mass) return TruncationIndex{i + 1};
  }
  return TruncationIndex{n};
}

double kl_truncated(const ExitDistribution& p, const ExitDistribution& prior,
                    TruncationIndex j) {
  if (j.j > p.n() || j.j > prior.n())
    throw std::invalid_argument("kl_truncated: truncation index beyond distribution length");
  double kl = 0.0;
  for (int i = 0; i < j.j; ++i) {
    double pi = p.probs[i];
    if (pi == 0.0) continue;
    double qi = prior.probs[i];
    if (qi == 0.0)
      throw std::domain_error("kl_truncated: prior has zero mass at layer " +
                              std::to_string(i + 1) + " where posterior is positive");
    kl += pi * std::log(pi / qi);
  }
  return kl;
}

double kl_truncated_renormalized(const ExitDistribution& p, const ExitDistribution& prior,
                                 TruncationIndex j) {
  double zp = 0.0, zq = 0.0;
  for (int i = 0; i < j.j; ++i) {
    zp += p.probs[i];
    zq += prior.probs[i];
  }
  if (zp == 0.0 || zq == 0.0)
    throw std::domain_error("kl_truncated_renormalized: zero mass on truncated support");
  double kl = 0.0;
  for (int i = 0; i < j.j; ++i) {
    double pi = p.probs[i] / zp;
    if (pi == 0.0) continue;
    double qi = prior.probs[i] / zq;
    if (qi == 0.0)
      throw std::domain_error("kl_truncated_renormalized: prior has zero mass at layer " +
                              std::to_string(i + 1));
    kl += pi * std::log(pi / qi);
  }
  return kl;
}

std::vector<double> cdf(const ExitDistribution& p) {
  std::vector<double> out(p.probs.size());
  double acc = 0.0;
  for (size_t i = 0; i < p.probs.size(); ++i) {
    acc += p.probs[i];
    out[i] = acc;
  }
  return out;
}

int sample_exit_index(const ExitDistribution& p, RngStream& rng) {
  const int n = p.n();
  double survival = 1.0;
  for (int i = 0; i + 1 < n; ++i) {
    double cond = survival > 0.0 ? p.probs[i] / survival : 1.0;
    if (rng.bernoulli(cond)) return i + 1;
    survival -= p.probs[i];
  }
  return n;
}

double expected_exit_depth(const ExitDistribution& p) {
  double e = 0.0;
  for (int i = 0; i < p.n(); ++i) e += (i + 1) * p.probs[i];
  return e;
}

std::vector<double> expectation_mixture(const ExitDistribution& weights,
                                        const std::vector<std::vector<double>>& per_layer_values) {
  if (static_cast<size_t>(weights.n()) != per_layer_values.size())
    throw std::invalid_argument("expectation_mixture: weights/values length mismatch");
  if (per_layer_values.empty()) throw std::invalid_argument("expectation_mixture: empty input");
  const size_t dim = per_layer_values[0].size();
  std::vector<double> out(dim, 0.0);
  for (int i = 0; i < weights.n(); ++i) {
    if (per_layer_values[i].size() != dim)
      throw std::invalid_argument("expectation_mixture: ragged per-layer values");
    for (size_t d = 0; d < dim; ++d) out[d] += weights.probs[i] * per_layer_values[i][d];
  }
  return out;
}

}  // namespace ponder::haltdist
