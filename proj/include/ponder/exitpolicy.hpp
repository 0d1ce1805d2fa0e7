#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "ponder/array.hpp"
#include "ponder/model.hpp"
#include "ponder/rng.hpp"

namespace ponder::exitpolicy {

struct QExit {
  double q;
};
struct Sample {
  uint64_t seed;
};
struct Expectation {};
struct Patience {
  int t;
};
struct Entropy {
  double threshold;  // nats
};
struct Fixed {
  int k;
};

using ExitPolicy = std::variant<QExit, Sample, Expectation, Patience, Entropy, Fixed>;

// Parses "q_exit:0.5", "sample:1234", "patience:6", "entropy:0.4", "fixed:12",
// "expectation". Throws on anything else.
ExitPolicy parse_policy(const std::string& spec);
std::string policy_name(const ExitPolicy& policy);

struct ExitDecision {
  int exit_layer = 0;
  int predicted_class = 0;
  std::vector<double> prediction;  // logits, or mixed class probabilities for expectation
  int layers_evaluated = 0;
  double cdf_at_exit = 0.0;  // Q-exit only
  bool non_early_exit = false;
};

enum class StepAction { continue_running, exit_now };

// One streaming Q-exit decision. The caller carries the running state:
// survival = prod_{j<i}(1-lambda_j) and accumulated_cdf = sum_{j<i} p_j.
// p_i = lambda_i * survival, except the residual rule at i = n.
StepAction q_exit_step(double accumulated_cdf, double lambda_i, double survival, double q, int i,
                       int n);

StepAction sample_step(double lambda_i, RngStream& rng, int i, int n);

struct PatienceStep {
  StepAction action;
  int streak;
};
// Streak increments on agreement with the previous prediction, else resets
// to 1; exits when the streak reaches t, or unconditionally at i = n.
PatienceStep patience_step(int current_prediction, int previous_prediction, int streak, int t,
                           int i, int n);

StepAction entropy_step(const Array& logits, double threshold, int i, int n);

double softmax_entropy(const Array& logits);  // nats

// Binds a policy to incremental inference. layers_evaluated equals the actual
// step-cell invocation count. `example_stream_id` seeds the per-inference
// random stream for the sampling policy.
ExitDecision run_policy(const model::ModelConfig& cfg, const model::ParamStore& params,
                        const std::vector<int>& tokens, const ExitPolicy& policy,
                        uint64_t example_stream_id = 0);

}  // namespace ponder::exitpolicy
