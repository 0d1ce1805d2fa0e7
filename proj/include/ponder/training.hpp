#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ponder/benchdata.hpp"
#include "ponder/haltdist.hpp"
#include "ponder/model.hpp"
#include "ponder/tape.hpp"

namespace ponder::training {

enum class KlTruncationMode { raw, renormalized };
enum class Objective { ponder, vanilla_last_layer, per_layer_mean };

struct TrainConfig {
  double learning_rate = 1e-3;  // desk-scale from-scratch default
  double lambda_learning_rate = 1e-3;
  int batch_size = 32;
  double beta = 0.5;
  double lambda_prior = 0.1;
  int patience_epochs = 5;
  int max_epochs = 30;
  uint64_t seed = 0;
  KlTruncationMode kl_truncation_mode = KlTruncationMode::raw;
  Objective objective = Objective::ponder;
  double validation_q = 0.5;  // Q-exit threshold used for epoch validation

  void validate() const;
};

std::string trainconfig_to_json(const TrainConfig& c);
TrainConfig trainconfig_from_json_text(const std::string& text);
TrainConfig trainconfig_from_file(const std::string& path);

// Negated evidence bound for one example: posterior-weighted NLL plus
// beta * KL(posterior || prior) over the 0.95-truncated support. The trace
// must be fully unrolled. Differentiable in all parameters, Lambda included.
ad::Value ponder_loss(ad::Tape& tape, const model::GraphTrace& trace, int target, double beta,
                      const haltdist::ExitDistribution& prior, KlTruncationMode mode);

// Per-objective single-example loss (dispatches to ponder_loss when ponder).
ad::Value example_loss(ad::Tape& tape, const model::ModelConfig& cfg,
                       const model::GraphTrace& trace, int target, const TrainConfig& tc);

struct AdamState {
  std::map<std::string, Array> m, v;
  long step_count = 0;
};

// Adam (0.9 / 0.999 / 1e-8); parameters under the "lambda." prefix use
// lambda_learning_rate, everything else learning_rate.
void optimizer_step(model::ParamStore& params, const std::map<std::string, Array>& grads,
                    const TrainConfig& cfg, AdamState& state);

// Early stopping on an epoch-wise validation metric: stop once the metric has
// not strictly improved for `patience` consecutive epochs.
struct EarlyStopper {
  int patience;
  int best_epoch = 0;
  double best_metric = -1e300;
  int epochs_since_best = 0;

  explicit EarlyStopper(int patience_epochs) : patience(patience_epochs) {}
  // Returns true when training should stop after this epoch.
  bool observe(int epoch, double metric) {
    if (metric > best_metric) {
      best_metric = metric;
      best_epoch = epoch;
      epochs_since_best = 0;
    } else {
      ++epochs_since_best;
    }
    return epochs_since_best >= patience;
  }
};

struct EpochRecord {
  int epoch;  // 1-based
  double train_loss;
  double val_metric;
  double wall_seconds;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  double best_val_metric = 0.0;
};

// Trains in place; on return `params` holds the best-epoch parameters.
TrainReport train(const model::ModelConfig& cfg, const TrainConfig& tc,
                  const benchdata::Dataset& data, model::ParamStore& params);

// Dev-split accuracy used for validation and reporting.
double evaluate_accuracy(const model::ModelConfig& cfg, const model::ParamStore& params,
                         const std::vector<benchdata::Example>& split, const TrainConfig& tc);

struct GridSpec {
  std::vector<double> learning_rates;
  std::vector<double> lambda_learning_rates;
  std::vector<int> batch_sizes;
};

struct GridCell {
  TrainConfig config;
  std::vector<double> per_seed_metric;
  double mean = 0.0;
  double stddev = 0.0;
};

struct GridResult {
  std::vector<GridCell> cells;
  size_t best_cell = 0;
};

// Exhaustive sweep; best cell by mean dev metric, ties broken by smaller
// learning rate, then smaller batch.
GridResult grid_search(const model::ModelConfig& cfg, const TrainConfig& base,
                       const GridSpec& grid, const benchdata::Dataset& data,
                       const std::vector<uint64_t>& seeds);

struct AblationRow {
  std::string config_id;
  std::vector<double> per_seed_metric;
  double mean = 0.0;
  double stddev = 0.0;
};

// The eight-configuration ablation: vanilla, sampling, closed-form
// expectation, Q-exit base, then Q-exit plus lambda LR / 3-layer / concat /
// all three together.
std::vector<AblationRow> run_ablation(const model::ModelConfig& base_model,
                                      const TrainConfig& base_train,
                                      const benchdata::Dataset& data,
                                      const std::vector<uint64_t>& seeds);

double mean_of(const std::vector<double>& v);
double stddev_of(const std::vector<double>& v);

}  // namespace ponder::training
