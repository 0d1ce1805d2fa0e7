#pragma once

#include <vector>

#include "ponder/rng.hpp"

namespace ponder::haltdist {

// Per-layer exit probabilities lambda_1..lambda_n. lambda_n is ignored by the
// residual rule (the last layer absorbs all remaining mass).
struct HaltingVector {
  std::vector<double> lambdas;
};

// Probability mass over exit layers 1..n. Always sums to 1 up to rounding.
struct ExitDistribution {
  std::vector<double> probs;
  int n() const { return static_cast<int>(probs.size()); }
};

struct TruncationIndex {
  int j;  // 1-based layer index
};

// p_i = lambda_i * prod_{j<i}(1 - lambda_j) for i < n; p_n = prod_{j<n}(1 - lambda_j).
ExitDistribution posterior_from_halting(const HaltingVector& h);

// p_i = lambda (1-lambda)^{i-1} for i < n; p_n = (1-lambda)^{n-1}.
ExitDistribution geometric_prior(double lambda_prior, int n);

// Minimal j with CDF_j >= mass (default 0.95).
TruncationIndex truncation_index(const ExitDistribution& p, double mass = 0.95);

// Sum_{i<=j} p_i ln(p_i / prior_i), raw truncation (no renormalization).
// 0*ln(0/q) := 0; errors when prior_i = 0 but p_i > 0.
double kl_truncated(const ExitDistribution& p, const ExitDistribution& prior,
                    TruncationIndex j);

// Same support rule but both distributions renormalized over layers 1..j.
double kl_truncated_renormalized(const ExitDistribution& p, const ExitDistribution& prior,
                                 TruncationIndex j);

std::vector<double> cdf(const ExitDistribution& p);

// Iterative Bernoulli sampling: exit at i with probability lambda-equivalent
// conditional p_i / (remaining mass). Returns a 1-based index.
int sample_exit_index(const ExitDistribution& p, RngStream& rng);

// Sum_i i * p_i.
double expected_exit_depth(const ExitDistribution& p);

// Probability-weighted average of per-layer vectors.
std::vector<double> expectation_mixture(const ExitDistribution& weights,
                                        const std::vector<std::vector<double>>& per_layer_values);

}  // namespace ponder::haltdist
