#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ponder/benchdata.hpp"
#include "ponder/exitpolicy.hpp"
#include "ponder/model.hpp"
#include "ponder/training.hpp"

namespace ponder::harness {

// Shortest round-trippable formatting, fixed across the codebase so CSV
// output is byte-stable.
std::string fmt(double x);

struct EvalRow {
  int example_id;
  int difficulty;
  int exit_layer;
  int layers_evaluated;
  int prediction;
  int label;
  bool correct;
};

struct EvalSummary {
  double metric = 0.0;
  double mean_exit_depth = 0.0;
  double speedup = 1.0;  // n / mean exit depth; 1.0 for non-early-exit policies
  bool non_early_exit = false;
  int count = 0;
};

struct EvalResult {
  std::vector<EvalRow> rows;
  EvalSummary summary;
};

EvalResult evaluate(const model::ModelConfig& cfg, const model::ParamStore& params,
                    const std::vector<benchdata::Example>& split,
                    const exitpolicy::ExitPolicy& policy);

void write_eval_csv(const std::string& path, const EvalResult& r);
void write_eval_summary_csv(const std::string& path, const EvalResult& r);
std::vector<EvalRow> read_eval_csv(const std::string& path);

// A trained model ready for evaluation.
struct Checkpoint {
  model::ModelConfig cfg;
  model::ParamStore params;
};

struct QSweepRow {
  double q;
  double metric_mean, metric_std;
  double mean_exit_depth;  // averaged over checkpoints
  double speedup;
};

std::vector<QSweepRow> sweep_q(const std::vector<Checkpoint>& checkpoints,
                               const std::vector<double>& q_values,
                               const std::vector<benchdata::Example>& split);
void write_q_sweep_csv(const std::string& path, const std::vector<QSweepRow>& rows);

struct PriorSweepResult {
  double lambda_prior;
  uint64_t seed;
  double metric;
  double mean_exit_depth;
  std::vector<long> exit_histogram;       // per layer, Q-exit on the eval split
  std::vector<double> mean_posterior;     // analytic p(i|x) averaged over the train split
};

// Full retrain per (lambda, seed); the Q-exit threshold for the histogram is
// train_base.validation_q.
std::vector<PriorSweepResult> sweep_prior(const model::ModelConfig& cfg,
                                          const training::TrainConfig& train_base,
                                          const benchdata::Dataset& data,
                                          const std::vector<double>& lambda_values,
                                          const std::vector<uint64_t>& seeds, int threads = 1);
void write_prior_sweep_csvs(const std::string& out_dir,
                            const std::vector<PriorSweepResult>& results, int max_layers);

struct SpeedRow {
  std::string family;  // "palbert", "pabee", or "fixed" for the 1x anchor
  double param;        // q or t (or n for the anchor)
  double speedup;
  double metric_mean, metric_std;
  double mean_exit_depth;
};

std::vector<SpeedRow> speed_report(const std::vector<Checkpoint>& palbert,
                                   const std::vector<Checkpoint>& pabee,
                                   const std::vector<double>& q_values,
                                   const std::vector<int>& patience_values,
                                   const std::vector<benchdata::Example>& split);
void write_speed_csv(const std::string& path, const std::vector<SpeedRow>& rows);

void write_ablation_csv(const std::string& path, const std::vector<training::AblationRow>& rows);
void write_grid_csv(const std::string& path, const training::GridResult& grid);
void write_train_log_csv(const std::string& path, const training::TrainReport& report,
                         const std::string& config_id, uint64_t seed);

// Run manifest: config hash, seed, artifact/format versions, free-form extras.
std::string config_hash_hex(const std::string& canonical_json);
void write_manifest(const std::string& path, const std::string& command,
                    const std::string& canonical_config_json, uint64_t seed);

// Runs fn(0..count-1) on up to `threads` workers; results must be written to
// pre-sized slots so merge order is index order regardless of scheduling.
void parallel_for(int count, int threads, const std::function<void(int)>& fn);

}  // namespace ponder::harness
