#include "ponder/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "ponder/exitpolicy.hpp"

namespace ponder::training {

using ad::Tape;
using ad::Value;
using nlohmann::json;

void TrainConfig::validate() const {
  if (learning_rate <= 0.0 || lambda_learning_rate < 0.0)
    throw std::invalid_argument("TrainConfig: rates must be positive (lambda lr may be 0)");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size < 1");
  if (beta < 0.0) throw std::invalid_argument("TrainConfig: beta < 0");
  if (!(lambda_prior > 0.0 && lambda_prior < 1.0))
    throw std::invalid_argument("TrainConfig: lambda_prior outside (0,1)");
  if (patience_epochs < 0) throw std::invalid_argument("TrainConfig: patience_epochs < 0");
  if (max_epochs < 1) throw std::invalid_argument("TrainConfig: max_epochs < 1");
  if (!(validation_q > 0.0 && validation_q <= 1.0))
    throw std::invalid_argument("TrainConfig: validation_q outside (0,1]");
}

std::string trainconfig_to_json(const TrainConfig& c) {
  json j{{"learning_rate", c.learning_rate},
         {"lambda_learning_rate", c.lambda_learning_rate},
         {"batch_size", c.batch_size},
         {"beta", c.beta},
         {"lambda_prior", c.lambda_prior},
         {"patience_epochs", c.patience_epochs},
         {"max_epochs", c.max_epochs},
         {"seed", c.seed},
         {"kl_truncation_mode",
          c.kl_truncation_mode == KlTruncationMode::raw ? "raw" : "renormalized"},
         {"objective", c.objective == Objective::ponder          ? "ponder"
                       : c.objective == Objective::per_layer_mean ? "per_layer_mean"
                                                                  : "vanilla"},
         {"validation_q", c.validation_q}};
  return j.dump(2);
}

TrainConfig trainconfig_from_json_text(const std::string& text) {
  json j = json::parse(text);
  TrainConfig c;
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.lambda_learning_rate = j.value("lambda_learning_rate", c.lambda_learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.beta = j.value("beta", c.beta);
  c.lambda_prior = j.value("lambda_prior", c.lambda_prior);
  c.patience_epochs = j.value("patience_epochs", c.patience_epochs);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.seed = j.value("seed", c.seed);
  std::string mode = j.value("kl_truncation_mode", "raw");
  c.kl_truncation_mode =
      mode == "renormalized" ? KlTruncationMode::renormalized : KlTruncationMode::raw;
  std::string obj = j.value("objective", "ponder");
  c.objective = obj == "vanilla"          ? Objective::vanilla_last_layer
                : obj == "per_layer_mean" ? Objective::per_layer_mean
                                          : Objective::ponder;
  c.validation_q = j.value("validation_q", c.validation_q);
  c.validate();
  return c;
}

TrainConfig trainconfig_from_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("trainconfig: cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return trainconfig_from_json_text(ss.str());
}

namespace {

void check_finite(const Tape& tape, Value v, const char* what, int layer) {
  for (size_t i = 0; i < tape.val(v).size(); ++i)
    if (!std::isfinite(tape.val(v)[i]))
      throw std::runtime_error(std::string("ponder_loss: non-finite ") + what + " at layer " +
                               std::to_string(layer));
}

}  // namespace

Value ponder_loss(Tape& tape, const model::GraphTrace& trace, int target, double beta,
                  const haltdist::ExitDistribution& prior, KlTruncationMode mode) {
  const int n = static_cast<int>(trace.logits.size());
  if (n == 0) throw std::invalid_argument("ponder_loss: empty trace");
  if (static_cast<int>(trace.lambda.size()) != n)
    throw std::invalid_argument("ponder_loss: trace has no halting probabilities");
  if (prior.n() != n) throw std::invalid_argument("ponder_loss: prior length mismatch");

  // Posterior over exit layers as graph nodes, residual rule at layer n.
  std::vector<Value> p(n);
  Value survival = tape.leaf(Array::scalar(1.0));
  for (int i = 0; i < n; ++i) {
    check_finite(tape, trace.lambda[i], "halting probability", i + 1);
    if (i + 1 < n) {
      p[i] = ad::mul(trace.lambda[i], survival);
      survival = ad::mul(survival, ad::add_const(ad::neg(trace.lambda[i]), 1.0));
    } else {
      p[i] = survival;
    }
  }

  haltdist::ExitDistribution post_vals;
  for (int i = 0; i < n; ++i) post_vals.probs.push_back(tape.val(p[i]).item());
  int j = haltdist::truncation_index(post_vals).j;

  Value loss{};
  bool first = true;
  for (int i = 0; i < n; ++i) {
    check_finite(tape, trace.logits[i], "logits", i + 1);
    Value nll = ad::cross_entropy_with_logits(trace.logits[i], target);
    check_finite(tape, nll, "NLL", i + 1);
    Value term = ad::mul(p[i], nll);
    loss = first ? term : ad::add(loss, term);
    first = false;
  }

  if (beta > 0.0) {
    Value kl{};
    bool kfirst = true;
    for (int i = 0; i < j; ++i) {
      if (prior.probs[i] <= 0.0)
        throw std::domain_error("ponder_loss: prior has zero mass at layer " +
                                std::to_string(i + 1));
      Value term = ad::mul(p[i], ad::add_const(ad::log_(p[i]), -std::log(prior.probs[i])));
      kl = kfirst ? term : ad::add(kl, term);
      kfirst = false;
    }
    if (mode == KlTruncationMode::renormalized) {
      Value zp{};
      double zq = 0.0;
      for (int i = 0; i < j; ++i) {
        zp = i == 0 ? p[0] : ad::add(zp, p[i]);
        zq += prior.probs[i];
      }
      // KL of both renormalized: kl/zp - log zp + log zq
      kl = ad::add(ad::mul(kl, ad::inv(zp)),
                   ad::add_const(ad::neg(ad::log_(zp)), std::log(zq)));
    }
    loss = ad::add(loss, ad::scale(kl, beta));
  }
  check_finite(tape, loss, "loss", n);
  return loss;
}

Value example_loss(Tape& tape, const model::ModelConfig& cfg, const model::GraphTrace& trace,
                   int target, const TrainConfig& tc) {
  switch (tc.objective) {
    case Objective::ponder:
      return ponder_loss(tape, trace, target, tc.beta,
                         haltdist::geometric_prior(tc.lambda_prior, cfg.max_layers),
                         tc.kl_truncation_mode);
    case Objective::vanilla_last_layer:
      return ad::cross_entropy_with_logits(trace.logits.back(), target);
    case Objective::per_layer_mean: {
      Value sum{};
      for (size_t i = 0; i < trace.logits.size(); ++i) {
        Value nll = ad::cross_entropy_with_logits(trace.logits[i], target);
        sum = i == 0 ? nll : ad::add(sum, nll);
      }
      return ad::scale(sum, 1.0 / static_cast<double>(trace.logits.size()));
    }
  }
  throw std::logic_error("example_loss: unknown objective");
}

void optimizer_step(model::ParamStore& params, const std::map<std::string, Array>& grads,
                    const TrainConfig& cfg, AdamState& state) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ++state.step_count;
  double bc1 = 1.0 - std::pow(b1, state.step_count);
  double bc2 = 1.0 - std::pow(b2, state.step_count);
  for (const auto& name : params.order) {
    auto it = grads.find(name);
    if (it == grads.end())
      throw std::runtime_error("optimizer_step: missing gradient for parameter " + name);
    Array& w = params.at(name);
    const Array& g = it->second;
    require_same_shape(w, g, "optimizer_step");
    if (!state.m.count(name)) {
      state.m.emplace(name, Array(w.rows(), w.cols(), 0.0));
      state.v.emplace(name, Array(w.rows(), w.cols(), 0.0));
    }
    Array& m = state.m.at(name);
    Array& v = state.v.at(name);
    double lr = model::is_lambda_param(name) ? cfg.lambda_learning_rate : cfg.learning_rate;
    if (lr == 0.0) continue;  // bit-exact freeze
    for (size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

double evaluate_accuracy(const model::ModelConfig& cfg, const model::ParamStore& params,
                         const std::vector<benchdata::Example>& split, const TrainConfig& tc) {
  if (split.empty()) throw std::invalid_argument("evaluate_accuracy: empty split");
  exitpolicy::ExitPolicy policy =
      tc.objective == Objective::ponder
          ? exitpolicy::ExitPolicy(exitpolicy::QExit{tc.validation_q})
          : exitpolicy::ExitPolicy(exitpolicy::Fixed{cfg.max_layers});
  int correct = 0;
  for (size_t i = 0; i < split.size(); ++i) {
    auto d = exitpolicy::run_policy(cfg, params, split[i].tokens, policy, i);
    if (d.predicted_class == split[i].label) ++correct;
  }
  return static_cast<double>(correct) / split.size();
}

TrainReport train(const model::ModelConfig& cfg, const TrainConfig& tc,
                  const benchdata::Dataset& data, model::ParamStore& params) {
  cfg.validate();
  tc.validate();
  if (data.train.empty() || data.dev.empty())
    throw std::invalid_argument("train: empty train or dev split");

  TrainReport report;
  AdamState adam;
  EarlyStopper stopper(tc.patience_epochs);
  model::ParamStore best = params;

  const size_t ntrain = data.train.size();
  std::vector<size_t> perm(ntrain);
  for (size_t i = 0; i < ntrain; ++i) perm[i] = i;

  for (int epoch = 1; epoch <= tc.max_epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    RngStream shuffle_rng = RngStream::derive(tc.seed, 0x5AFE0000ULL + epoch);
    for (size_t i = 0; i + 1 < ntrain; ++i) {
      size_t j = i + shuffle_rng.next_below(ntrain - i);
      std::swap(perm[i], perm[j]);
    }

    double epoch_loss = 0.0;
    size_t nbatches = 0;
    for (size_t start = 0; start < ntrain; start += tc.batch_size) {
      size_t end = std::min(start + tc.batch_size, ntrain);
      Tape tape;
      auto P = model::params_to_tape(tape, params);
      RngStream drop_rng =
          RngStream::derive(tc.seed, 0xD120000ULL + epoch * 100000ULL + start);
      Value batch_loss{};
      for (size_t k = start; k < end; ++k) {
        const auto& ex = data.train[perm[k]];
        auto trace = model::forward_graph(cfg, tape, P, ex.tokens, /*train_mode=*/true,
                                          &drop_rng, nullptr);
        Value l = example_loss(tape, cfg, trace, ex.label, tc);
        batch_loss = k == start ? l : ad::add(batch_loss, l);
      }
      batch_loss = ad::scale(batch_loss, 1.0 / static_cast<double>(end - start));
      tape.backward(batch_loss);
      epoch_loss += tape.val(batch_loss).item();
      ++nbatches;
      std::map<std::string, Array> grads;
      for (const auto& name : params.order) grads.emplace(name, tape.grad(P.at(name)));
      optimizer_step(params, grads, tc, adam);
    }
    epoch_loss /= nbatches;

    double val = evaluate_accuracy(cfg, params, data.dev, tc);
    auto t1 = std::chrono::steady_clock::now();
    report.epochs.push_back(
        {epoch, epoch_loss, val, std::chrono::duration<double>(t1 - t0).count()});
    bool improved = val > stopper.best_metric;
    bool stop = stopper.observe(epoch, val);
    if (improved) best = params;
    if (stop) break;
  }
  report.best_epoch = stopper.best_epoch;
  report.best_val_metric = stopper.best_metric;
  params = best;
  return report;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / v.size();
}

double stddev_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / (v.size() - 1));
}

GridResult grid_search(const model::ModelConfig& cfg, const TrainConfig& base,
                       const GridSpec& grid, const benchdata::Dataset& data,
                       const std::vector<uint64_t>& seeds) {
  if (grid.learning_rates.empty() || grid.batch_sizes.empty())
    throw std::invalid_argument("grid_search: empty grid axis");
  std::vector<double> lambda_lrs = grid.lambda_learning_rates;
  if (lambda_lrs.empty() || !cfg.has_lambda || base.objective != Objective::ponder)
    lambda_lrs = {base.lambda_learning_rate};

  GridResult result;
  for (double lr : grid.learning_rates)
    for (double llr : lambda_lrs)
      for (int bs : grid.batch_sizes) {
        GridCell cell;
        cell.config = base;
        cell.config.learning_rate = lr;
        cell.config.lambda_learning_rate = llr;
        cell.config.batch_size = bs;
        for (uint64_t seed : seeds) {
          TrainConfig tc = cell.config;
          tc.seed = seed;
          RngStream init_rng = RngStream::derive(seed, 0x1217);
          model::ParamStore params = model::init_params(cfg, init_rng);
          TrainReport rep = train(cfg, tc, data, params);
          cell.per_seed_metric.push_back(rep.best_val_metric);
        }
        cell.mean = mean_of(cell.per_seed_metric);
        cell.stddev = stddev_of(cell.per_seed_metric);
        result.cells.push_back(std::move(cell));
      }

  for (size_t i = 1; i < result.cells.size(); ++i) {
    const GridCell& a = result.cells[i];
    const GridCell& b = result.cells[result.best_cell];
    bool better = a.mean > b.mean;
    if (a.mean == b.mean) {
      // deterministic tie-break: smaller learning rate, then smaller batch
      better = a.config.learning_rate < b.config.learning_rate ||
               (a.config.learning_rate == b.config.learning_rate &&
                a.config.batch_size < b.config.batch_size);
    }
    if (better) result.best_cell = i;
  }
  return result;
}

namespace {

struct AblationVariant {
  std::string id;
  bool ponder;  // false: vanilla fixed depth
  model::LambdaArch arch = model::LambdaArch::one_layer;
  model::LambdaInput input = model::LambdaInput::single_h;
  bool separate_lambda_lr = false;
  std::string eval;  // "q_exit", "sample", "expectation", "fixed"
};

}  // namespace

std::vector<AblationRow> run_ablation(const model::ModelConfig& base_model,
                                      const TrainConfig& base_train,
                                      const benchdata::Dataset& data,
                                      const std::vector<uint64_t>& seeds) {
  using model::LambdaArch;
  using model::LambdaInput;
  const std::vector<AblationVariant> variants = {
      {"vanilla", false, LambdaArch::one_layer, LambdaInput::single_h, false, "fixed"},
      {"ponder_sampling", true, LambdaArch::one_layer, LambdaInput::single_h, false, "sample"},
      {"ponder_expectation", true, LambdaArch::one_layer, LambdaInput::single_h, false,
       "expectation"},
      {"q_exit_base", true, LambdaArch::one_layer, LambdaInput::single_h, false, "q_exit"},
      {"q_exit_lambda_lr", true, LambdaArch::one_layer, LambdaInput::single_h, true, "q_exit"},
      {"q_exit_3layer", true, LambdaArch::three_layer, LambdaInput::single_h, true, "q_exit"},
      {"q_exit_concat", true, LambdaArch::one_layer, LambdaInput::concat_h_prev, true, "q_exit"},
      {"q_exit_full", true, LambdaArch::three_layer, LambdaInput::concat_h_prev, true, "q_exit"},
  };

  // The first three ponder rows share one trained model family per seed
  // (identical training config), so cache by training signature.
  std::map<std::string, std::vector<std::pair<model::ModelConfig, model::ParamStore>>> cache;

  std::vector<AblationRow> rows;
  for (const auto& var : variants) {
    model::ModelConfig mc = base_model;
    TrainConfig tc = base_train;
    if (var.ponder) {
      mc.has_lambda = true;
      mc.lambda_arch = var.arch;
      mc.lambda_input = var.input;
      tc.objective = Objective::ponder;
      if (!var.separate_lambda_lr) tc.lambda_learning_rate = tc.learning_rate;
    } else {
      mc.has_lambda = false;
      tc.objective = Objective::vanilla_last_layer;
    }
    std::string sig = std::string(var.ponder ? "p" : "v") +
                      (var.arch == LambdaArch::three_layer ? "3" : "1") +
                      (var.input == LambdaInput::concat_h_prev ? "c" : "s") +
                      (var.separate_lambda_lr ? "L" : "-");

    auto& trained = cache[sig];
    if (trained.empty()) {
      for (uint64_t seed : seeds) {
        TrainConfig stc = tc;
        stc.seed = seed;
        RngStream init_rng = RngStream::derive(seed, 0x1217);
        model::ParamStore params = model::init_params(mc, init_rng);
        train(mc, stc, data, params);
        trained.emplace_back(mc, std::move(params));
      }
    }

    AblationRow row;
    row.config_id = var.id;
    for (size_t s = 0; s < seeds.size(); ++s) {
      const auto& [tmc, tparams] = trained[s];
      exitpolicy::ExitPolicy policy = exitpolicy::Fixed{tmc.max_layers};
      if (var.eval == "q_exit") policy = exitpolicy::QExit{base_train.validation_q};
      if (var.eval == "sample") policy = exitpolicy::Sample{seeds[s]};
      if (var.eval == "expectation") policy = exitpolicy::Expectation{};
      int correct = 0;
      for (size_t i = 0; i < data.dev.size(); ++i) {
        auto d = exitpolicy::run_policy(tmc, tparams, data.dev[i].tokens, policy, i);
        if (d.predicted_class == data.dev[i].label) ++correct;
      }
      row.per_seed_metric.push_back(static_cast<double>(correct) / data.dev.size());
    }
    row.mean = mean_of(row.per_seed_metric);
    row.stddev = stddev_of(row.per_seed_metric);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace ponder::training
