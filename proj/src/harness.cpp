#include "ponder/harness.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "ponder/haltdist.hpp"

namespace ponder::harness {

std::string fmt(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", x);
  return buf;
}

EvalResult evaluate(const model::ModelConfig& cfg, const model::ParamStore& params,
                    const std::vector<benchdata::Example>& split,
                    const exitpolicy::ExitPolicy& policy) {
  EvalResult out;
  long depth_sum = 0;
  int correct = 0;
  for (size_t i = 0; i < split.size(); ++i) {
    auto d = exitpolicy::run_policy(cfg, params, split[i].tokens, policy, i);
    EvalRow row;
    row.example_id = static_cast<int>(i);
    row.difficulty = split[i].difficulty;
    row.exit_layer = d.exit_layer;
    row.layers_evaluated = d.layers_evaluated;
    row.prediction = d.predicted_class;
    row.label = split[i].label;
    row.correct = d.predicted_class == split[i].label;
    correct += row.correct;
    depth_sum += row.exit_layer;
    out.summary.non_early_exit = d.non_early_exit;
    out.rows.push_back(row);
  }
  out.summary.count = static_cast<int>(split.size());
  if (!split.empty()) {
    out.summary.metric = static_cast<double>(correct) / split.size();
    out.summary.mean_exit_depth = static_cast<double>(depth_sum) / split.size();
    out.summary.speedup = out.summary.non_early_exit
                              ? 1.0
                              : cfg.max_layers / out.summary.mean_exit_depth;
  }
  return out;
}

void write_eval_csv(const std::string& path, const EvalResult& r) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_eval_csv: cannot open " + path);
  f << "example_id,difficulty,exit_layer,layers_evaluated,prediction,label,correct\n";
  for (const auto& row : r.rows)
    f << row.example_id << ',' << row.difficulty << ',' << row.exit_layer << ','
      << row.layers_evaluated << ',' << row.prediction << ',' << row.label << ','
      << (row.correct ? 1 : 0) << '\n';
}

void write_eval_summary_csv(const std::string& path, const EvalResult& r) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_eval_summary_csv: cannot open " + path);
  f << "metric,mean_exit_depth,speedup,non_early_exit,count\n";
  f << fmt(r.summary.metric) << ',' << fmt(r.summary.mean_exit_depth) << ','
    << fmt(r.summary.speedup) << ',' << (r.summary.non_early_exit ? 1 : 0) << ','
    << r.summary.count << '\n';
}

std::vector<EvalRow> read_eval_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("read_eval_csv: cannot open " + path);
  std::vector<EvalRow> rows;
  std::string line;
  std::getline(f, line);  // header
  int lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    EvalRow r;
    int correct_int;
    if (std::sscanf(line.c_str(), "%d,%d,%d,%d,%d,%d,%d", &r.example_id, &r.difficulty,
                    &r.exit_layer, &r.layers_evaluated, &r.prediction, &r.label,
                    &correct_int) != 7)
      throw std::runtime_error("read_eval_csv: malformed row at " + path + ":" +
                               std::to_string(lineno));
    r.correct = correct_int != 0;
    rows.push_back(r);
  }
  return rows;
}

std::vector<QSweepRow> sweep_q(const std::vector<Checkpoint>& checkpoints,
                               const std::vector<double>& q_values,
                               const std::vector<benchdata::Example>& split) {
  if (checkpoints.empty()) throw std::invalid_argument("sweep_q: no checkpoints");
  if (q_values.empty()) throw std::invalid_argument("sweep_q: no q values");
  std::vector<QSweepRow> rows;
  for (double q : q_values) {
    std::vector<double> metrics, depths;
    for (const auto& ck : checkpoints) {
      EvalResult r = evaluate(ck.cfg, ck.params, split, exitpolicy::QExit{q});
      metrics.push_back(r.summary.metric);
      depths.push_back(r.summary.mean_exit_depth);
    }
    QSweepRow row;
    row.q = q;
    row.metric_mean = training::mean_of(metrics);
    row.metric_std = training::stddev_of(metrics);
    row.mean_exit_depth = training::mean_of(depths);
    row.speedup = checkpoints[0].cfg.max_layers / row.mean_exit_depth;
    rows.push_back(row);
  }
  return rows;
}

void write_q_sweep_csv(const std::string& path, const std::vector<QSweepRow>& rows) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_q_sweep_csv: cannot open " + path);
  f << "q,metric_mean,metric_std,mean_exit_depth,speedup\n";
  for (const auto& r : rows)
    f << fmt(r.q) << ',' << fmt(r.metric_mean) << ',' << fmt(r.metric_std) << ','
      << fmt(r.mean_exit_depth) << ',' << fmt(r.speedup) << '\n';
}

std::vector<PriorSweepResult> sweep_prior(const model::ModelConfig& cfg,
                                          const training::TrainConfig& train_base,
                                          const benchdata::Dataset& data,
                                          const std::vector<double>& lambda_values,
                                          const std::vector<uint64_t>& seeds, int threads) {
  if (lambda_values.empty() || seeds.empty())
    throw std::invalid_argument("sweep_prior: empty lambda or seed list");
  struct Cell {
    double lambda;
    uint64_t seed;
  };
  std::vector<Cell> cells;
  for (double l : lambda_values)
    for (uint64_t s : seeds) cells.push_back({l, s});

  std::vector<PriorSweepResult> results(cells.size());
  parallel_for(static_cast<int>(cells.size()), threads, [&](int idx) {
    const Cell& cell = cells[idx];
    training::TrainConfig tc = train_base;
    tc.lambda_prior = cell.lambda;
    tc.seed = cell.seed;
    model::ModelConfig mc = cfg;
    mc.lambda_init_prior = cell.lambda;
    RngStream init_rng = RngStream::derive(cell.seed, 0x1217);
    model::ParamStore params = model::init_params(mc, init_rng);
    training::train(mc, tc, data, params);

    PriorSweepResult res;
    res.lambda_prior = cell.lambda;
    res.seed = cell.seed;
    EvalResult ev = evaluate(mc, params, data.dev, exitpolicy::QExit{train_base.validation_q});
    res.metric = ev.summary.metric;
    res.mean_exit_depth = ev.summary.mean_exit_depth;
    res.exit_histogram.assign(mc.max_layers, 0);
    for (const auto& row : ev.rows) ++res.exit_histogram[row.exit_layer - 1];

    // analytic posterior averaged over the train split
    res.mean_posterior.assign(mc.max_layers, 0.0);
    for (const auto& ex : data.train) {
      model::LayerTrace trace = model::forward_full(mc, params, ex.tokens);
      haltdist::HaltingVector hv;
      for (const auto& e : trace.entries) hv.lambdas.push_back(e.lambda);
      haltdist::ExitDistribution post = haltdist::posterior_from_halting(hv);
      for (int i = 0; i < mc.max_layers; ++i) res.mean_posterior[i] += post.probs[i];
    }
    for (auto& p : res.mean_posterior) p /= data.train.size();
    results[idx] = std::move(res);
  });
  return results;
}

void write_prior_sweep_csvs(const std::string& out_dir,
                            const std::vector<PriorSweepResult>& results, int max_layers) {
  {
    std::ofstream f(out_dir + "/prior_hist.csv");
    if (!f) throw std::runtime_error("write_prior_sweep_csvs: cannot open prior_hist.csv");
    f << "lambda,seed,layer,count\n";
    for (const auto& r : results)
      for (int i = 0; i < max_layers; ++i)
        f << fmt(r.lambda_prior) << ',' << r.seed << ',' << i + 1 << ',' << r.exit_histogram[i]
          << '\n';
  }
  {
    std::ofstream f(out_dir + "/prior_posterior.csv");
    f << "lambda,seed,layer,mean_posterior\n";
    for (const auto& r : results)
      for (int i = 0; i < max_layers; ++i)
        f << fmt(r.lambda_prior) << ',' << r.seed << ',' << i + 1 << ','
          << fmt(r.mean_posterior[i]) << '\n';
  }
  {
    // aggregate metric rows per lambda, in input order
    std::vector<double> seen;
    std::ofstream f(out_dir + "/prior_metrics.csv");
    f << "lambda,metric_mean,metric_std,mean_exit_depth\n";
    for (const auto& r : results) {
      bool done = false;
      for (double s : seen) done = done || s == r.lambda_prior;
      if (done) continue;
      seen.push_back(r.lambda_prior);
      std::vector<double> metrics, depths;
      for (const auto& o : results)
        if (o.lambda_prior == r.lambda_prior) {
          metrics.push_back(o.metric);
          depths.push_back(o.mean_exit_depth);
        }
      f << fmt(r.lambda_prior) << ',' << fmt(training::mean_of(metrics)) << ','
        << fmt(training::stddev_of(metrics)) << ',' << fmt(training::mean_of(depths)) << '\n';
    }
  }
}

std::vector<SpeedRow> speed_report(const std::vector<Checkpoint>& palbert,
                                   const std::vector<Checkpoint>& pabee,
                                   const std::vector<double>& q_values,
                                   const std::vector<int>& patience_values,
                                   const std::vector<benchdata::Example>& split) {
  if (palbert.empty() && pabee.empty())
    throw std::invalid_argument("speed_report: no checkpoints");
  std::vector<SpeedRow> rows;
  int n = palbert.empty() ? pabee[0].cfg.max_layers : palbert[0].cfg.max_layers;

  // 1x full-depth anchor, evaluated on whichever family is present
  {
    const auto& anchor = palbert.empty() ? pabee : palbert;
    std::vector<double> metrics;
    for (const auto& ck : anchor) {
      EvalResult r = evaluate(ck.cfg, ck.params, split, exitpolicy::Fixed{n});
      metrics.push_back(r.summary.metric);
    }
    rows.push_back({"fixed", static_cast<double>(n), 1.0, training::mean_of(metrics),
                    training::stddev_of(metrics), static_cast<double>(n)});
  }

  for (double q : q_values) {
    std::vector<double> metrics, depths;
    for (const auto& ck : palbert) {
      EvalResult r = evaluate(ck.cfg, ck.params, split, exitpolicy::QExit{q});
      metrics.push_back(r.summary.metric);
      depths.push_back(r.summary.mean_exit_depth);
    }
    if (metrics.empty()) continue;
    double depth = training::mean_of(depths);
    rows.push_back({"palbert", q, n / depth, training::mean_of(metrics),
                    training::stddev_of(metrics), depth});
  }
  for (int t : patience_values) {
    std::vector<double> metrics, depths;
    for (const auto& ck : pabee) {
      EvalResult r = evaluate(ck.cfg, ck.params, split, exitpolicy::Patience{t});
      metrics.push_back(r.summary.metric);
      depths.push_back(r.summary.mean_exit_depth);
    }
    if (metrics.empty()) continue;
    double depth = training::mean_of(depths);
    rows.push_back({"pabee", static_cast<double>(t), n / depth, training::mean_of(metrics),
                    training::stddev_of(metrics), depth});
  }
  return rows;
}

void write_speed_csv(const std::string& path, const std::vector<SpeedRow>& rows) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_speed_csv: cannot open " + path);
  f << "family,param,speedup,metric_mean,metric_std,mean_exit_depth\n";
  for (const auto& r : rows)
    f << r.family << ',' << fmt(r.param) << ',' << fmt(r.speedup) << ',' << fmt(r.metric_mean)
      << ',' << fmt(r.metric_std) << ',' << fmt(r.mean_exit_depth) << '\n';
}

void write_ablation_csv(const std::string& path, const std::vector<training::AblationRow>& rows) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_ablation_csv: cannot open " + path);
  f << "config,mean,std\n";
  for (const auto& r : rows) f << r.config_id << ',' << fmt(r.mean) << ',' << fmt(r.stddev) << '\n';
}

void write_grid_csv(const std::string& path, const training::GridResult& grid) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_grid_csv: cannot open " + path);
  f << "learning_rate,lambda_learning_rate,batch_size,metric_mean,metric_std,best\n";
  for (size_t i = 0; i < grid.cells.size(); ++i) {
    const auto& c = grid.cells[i];
    f << fmt(c.config.learning_rate) << ',' << fmt(c.config.lambda_learning_rate) << ','
      << c.config.batch_size << ',' << fmt(c.mean) << ',' << fmt(c.stddev) << ','
      << (i == grid.best_cell ? 1 : 0) << '\n';
  }
}

void write_train_log_csv(const std::string& path, const training::TrainReport& report,
                         const std::string& config_id, uint64_t seed) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_train_log_csv: cannot open " + path);
  f << "config_id,seed,epoch,split,metric,loss\n";
  for (const auto& e : report.epochs) {
    f << config_id << ',' << seed << ',' << e.epoch << ",train," << fmt(0.0) << ','
      << fmt(e.train_loss) << '\n';
    f << config_id << ',' << seed << ',' << e.epoch << ",dev," << fmt(e.val_metric) << ','
      << fmt(0.0) << '\n';
  }
}

std::string config_hash_hex(const std::string& canonical_json) {
  // FNV-1a, 64-bit
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : canonical_json) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void write_manifest(const std::string& path, const std::string& command,
                    const std::string& canonical_config_json, uint64_t seed) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_manifest: cannot open " + path);
  f << "{\n"
    << "  \"command\": \"" << command << "\",\n"
    << "  \"config_hash\": \"" << config_hash_hex(canonical_config_json) << "\",\n"
    << "  \"seed\": " << seed << ",\n"
    << "  \"versions\": {\"artifact\": \"0.1.0\", \"checkpoint_format\": 1, \"csv_format\": 1}\n"
    << "}\n";
}

void parallel_for(int count, int threads, const std::function<void(int)>& fn) {
  if (threads <= 1 || count <= 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  int nworkers = std::min(threads, count);
  for (int w = 0; w < nworkers; ++w)
    pool.emplace_back([&]() {
      for (int i = next.fetch_add(1); i < count; i = next.fetch_add(1)) fn(i);
    });
  for (auto& t : pool) t.join();
}

}  // namespace ponder::harness
