#include "ponder/exitpolicy.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "ponder/haltdist.hpp"

namespace ponder::exitpolicy {

ExitPolicy parse_policy(const std::string& spec) {
  auto colon = spec.find(':');
  std::string name = spec.substr(0, colon);
  std::string arg = colon == std::string::npos ? "" : spec.substr(colon + 1);
  auto need_arg = [&]() {
    if (arg.empty()) throw std::invalid_argument("policy '" + name + "' requires a value");
  };
  if (name == "expectation") {
    if (!arg.empty()) throw std::invalid_argument("expectation policy takes no value");
    return Expectation{};
  }
  if (name == "q_exit") {
    need_arg();
    double q = std::stod(arg);
    if (!(q > 0.0 && q <= 1.0)) throw std::invalid_argument("q_exit: q must be in (0,1]");
    return QExit{q};
  }
  if (name == "sample") {
    need_arg();
    return Sample{static_cast<uint64_t>(std::stoull(arg))};
  }
  if (name == "patience") {
    need_arg();
    int t = std::stoi(arg);
    if (t < 1) throw std::invalid_argument("patience: t must be >= 1");
    return Patience{t};
  }
  if (name == "entropy") {
    need_arg();
    double th = std::stod(arg);
    if (th < 0.0) throw std::invalid_argument("entropy: threshold must be >= 0");
    return Entropy{th};
  }
  if (name == "fixed") {
    need_arg();
    int k = std::stoi(arg);
    if (k < 1) throw std::invalid_argument("fixed: k must be >= 1");
    return Fixed{k};
  }
  throw std::invalid_argument("unknown exit policy: " + spec);
}

std::string policy_name(const ExitPolicy& policy) {
  struct V {
    std::string operator()(const QExit& p) { return "q_exit:" + std::to_string(p.q); }
    std::string operator()(const Sample& p) { return "sample:" + std::to_string(p.seed); }
    std::string operator()(const Expectation&) { return "expectation"; }
    std::string operator()(const Patience& p) { return "patience:" + std::to_string(p.t); }
    std::string operator()(const Entropy& p) { return "entropy:" + std::to_string(p.threshold); }
    std::string operator()(const Fixed& p) { return "fixed:" + std::to_string(p.k); }
  };
  return std::visit(V{}, policy);
}

StepAction q_exit_step(double accumulated_cdf, double lambda_i, double survival, double q, int i,
                       int n) {
  if (i == n) return StepAction::exit_now;
  double p_i = lambda_i * survival;
  return accumulated_cdf + p_i >= q ? StepAction::exit_now : StepAction::continue_running;
}

StepAction sample_step(double lambda_i, RngStream& rng, int i, int n) {
  if (i == n) return StepAction::exit_now;
  return rng.bernoulli(lambda_i) ? StepAction::exit_now : StepAction::continue_running;
}

PatienceStep patience_step(int current_prediction, int previous_prediction, int streak, int t,
                           int i, int n) {
  if (t > n) throw std::invalid_argument("patience_step: t exceeds model depth");
  int new_streak = (i > 1 && current_prediction == previous_prediction) ? streak + 1 : 1;
  if (i == n || new_streak >= t) return {StepAction::exit_now, new_streak};
  return {StepAction::continue_running, new_streak};
}

double softmax_entropy(const Array& logits) {
  double m = logits[0];
  for (size_t i = 1; i < logits.size(); ++i) m = std::max(m, logits[i]);
  double z = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) z += std::exp(logits[i] - m);
  double h = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    double p = std::exp(logits[i] - m) / z;
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

StepAction entropy_step(const Array& logits, double threshold, int i, int n) {
  if (i == n) return StepAction::exit_now;
  return softmax_entropy(logits) < threshold ? StepAction::exit_now : StepAction::continue_running;
}

namespace {

int argmax(const Array& v) {
  int best = 0;
  for (size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = static_cast<int>(i);
  return best;
}

std::vector<double> softmax(const Array& logits) {
  double m = logits[0];
  for (size_t i = 1; i < logits.size(); ++i) m = std::max(m, logits[i]);
  double z = 0.0;
  std::vector<double> p(logits.size());
  for (size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - m);
    z += p[i];
  }
  for (auto& x : p) x /= z;
  return p;
}

ExitDecision run_expectation(const model::ModelConfig& cfg, const model::ParamStore& params,
                             const std::vector<int>& tokens) {
  model::LayerTrace trace = model::forward_full(cfg, params, tokens);
  haltdist::HaltingVector hv;
  std::vector<std::vector<double>> per_layer;
  for (const auto& e : trace.entries) {
    hv.lambdas.push_back(e.lambda);
    per_layer.push_back(softmax(e.logits));
  }
  haltdist::ExitDistribution post = haltdist::posterior_from_halting(hv);
  std::vector<double> mixed = haltdist::expectation_mixture(post, per_layer);
  ExitDecision d;
  d.exit_layer = cfg.max_layers;
  d.layers_evaluated = trace.steps_evaluated;
  d.prediction = mixed;
  d.predicted_class = argmax(Array::row(mixed));
  d.non_early_exit = true;
  return d;
}

}  // namespace

ExitDecision run_policy(const model::ModelConfig& cfg, const model::ParamStore& params,
                        const std::vector<int>& tokens, const ExitPolicy& policy,
                        uint64_t example_stream_id) {
  const int n = cfg.max_layers;

  bool needs_lambda = std::holds_alternative<QExit>(policy) ||
                      std::holds_alternative<Sample>(policy) ||
                      std::holds_alternative<Expectation>(policy);
  if (needs_lambda && !cfg.has_lambda)
    throw std::invalid_argument("policy " + policy_name(policy) +
                                " requires a model with a Lambda network");

  if (std::holds_alternative<Expectation>(policy))
    return run_expectation(cfg, params, tokens);

  if (const auto* f = std::get_if<Fixed>(&policy)) {
    if (f->k > n) throw std::invalid_argument("fixed policy: k exceeds model depth");
  }
  if (const auto* p = std::get_if<Patience>(&policy)) {
    if (p->t > n) throw std::invalid_argument("patience policy: t exceeds model depth");
  }

  ExitDecision d;
  // a fixed full-depth run is the no-early-exit baseline
  if (const auto* f = std::get_if<Fixed>(&policy)) d.non_early_exit = f->k == n;
  double survival = 1.0;
  double accumulated_cdf = 0.0;
  int streak = 0;
  int prev_pred = -1;
  RngStream rng = RngStream::derive(std::holds_alternative<Sample>(policy)
                                        ? std::get<Sample>(policy).seed
                                        : 0,
                                    example_stream_id);

  auto consumer = [&](int i, const model::LayerEntry& e) {
    StepAction act = StepAction::continue_running;
    if (const auto* q = std::get_if<QExit>(&policy)) {
      act = q_exit_step(accumulated_cdf, e.lambda, survival, q->q, i, n);
      double p_i = i == n ? survival : e.lambda * survival;
      accumulated_cdf += p_i;
      survival -= p_i;
      if (act == StepAction::exit_now) d.cdf_at_exit = accumulated_cdf;
    } else if (std::holds_alternative<Sample>(policy)) {
      act = sample_step(e.lambda, rng, i, n);
    } else if (const auto* p = std::get_if<Patience>(&policy)) {
      int cur = argmax(e.logits);
      PatienceStep ps = patience_step(cur, prev_pred, streak, p->t, i, n);
      streak = ps.streak;
      prev_pred = cur;
      act = ps.action;
    } else if (const auto* en = std::get_if<Entropy>(&policy)) {
      act = entropy_step(e.logits, en->threshold, i, n);
    } else if (const auto* f = std::get_if<Fixed>(&policy)) {
      act = i >= f->k ? StepAction::exit_now : StepAction::continue_running;
    }
    if (act == StepAction::exit_now) {
      d.exit_layer = i;
      d.prediction = e.logits.data();
      d.predicted_class = argmax(e.logits);
      return false;
    }
    return true;
  };

  model::LayerTrace trace = model::forward_incremental(cfg, params, tokens, consumer);
  d.layers_evaluated = trace.steps_evaluated;
  return d;
}

}  // namespace ponder::exitpolicy
