#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "ponder/exitpolicy.hpp"
#include "ponder/haltdist.hpp"
#include "stats_util.hpp"

using namespace ponder;
using namespace ponder::exitpolicy;

namespace {

model::ModelConfig tiny_config() {
  model::ModelConfig c;
  c.vocab_size = 11;
  c.max_seq_len = 8;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_layers = 6;
  c.num_classes = 2;
  c.classifier_dropout = 0.0;
  return c;
}

std::vector<int> toks() { return {3, 1, 4, 1, 5}; }

}  // namespace

TEST_CASE("policy parsing") {
  CHECK(std::get<QExit>(parse_policy("q_exit:0.5")).q == 0.5);
  CHECK(std::get<Sample>(parse_policy("sample:1234")).seed == 1234);
  CHECK(std::get<Patience>(parse_policy("patience:6")).t == 6);
  CHECK(std::get<Entropy>(parse_policy("entropy:0.4")).threshold == 0.4);
  CHECK(std::get<Fixed>(parse_policy("fixed:12")).k == 12);
  CHECK(std::holds_alternative<Expectation>(parse_policy("expectation")));
  CHECK(policy_name(parse_policy("q_exit:0.5")).rfind("q_exit", 0) == 0);
  CHECK(policy_name(parse_policy("expectation")) == "expectation");
  SUBCASE("bad specs") {
    CHECK_THROWS(parse_policy(""));
    CHECK_THROWS(parse_policy("unknown:1"));
    CHECK_THROWS(parse_policy("q_exit:0"));
    CHECK_THROWS(parse_policy("q_exit:1.5"));
    CHECK_THROWS(parse_policy("patience:0"));
    CHECK_THROWS(parse_policy("entropy:-0.1"));
    CHECK_THROWS(parse_policy("fixed:0"));
    CHECK_THROWS(parse_policy("q_exit:abc"));
  }
}

TEST_CASE("q_exit_step") {
  // exit as soon as accumulated + lambda * survival reaches q
  CHECK(q_exit_step(0.0, 0.6, 1.0, 0.5, 1, 4) == StepAction::exit_now);
  CHECK(q_exit_step(0.0, 0.4, 1.0, 0.5, 1, 4) == StepAction::continue_running);
  CHECK(q_exit_step(0.4, 0.2, 0.6, 0.5, 2, 4) == StepAction::exit_now);  // 0.4+0.12 >= 0.5
  CHECK(q_exit_step(0.4, 0.1, 0.6, 0.5, 2, 4) == StepAction::continue_running);
  SUBCASE("always exits at the last layer") {
    CHECK(q_exit_step(0.1, 0.0001, 0.9, 0.99, 4, 4) == StepAction::exit_now);
  }
  SUBCASE("agrees with the CDF of the full posterior") {
    RngStream rng(17);
    for (int trial = 0; trial < 50; ++trial) {
      haltdist::HaltingVector h;
      int n = 8;
      for (int i = 0; i < n; ++i) h.lambdas.push_back(0.02 + 0.6 * rng.next_double());
      double q = 0.05 + 0.9 * rng.next_double();
      auto p = haltdist::posterior_from_halting(h);
      auto c = haltdist::cdf(p);
      int expected = n;
      for (int i = 0; i < n; ++i)
        if (c[i] >= q) {
          expected = i + 1;
          break;
        }
      double acc = 0.0, survival = 1.0;
      int got = n;
      for (int i = 1; i <= n; ++i) {
        if (q_exit_step(acc, h.lambdas[i - 1], survival, q, i, n) == StepAction::exit_now) {
          got = i;
          break;
        }
        acc += h.lambdas[i - 1] * survival;
        survival *= 1.0 - h.lambdas[i - 1];
      }
      CHECK(got == expected);
    }
  }
}

TEST_CASE("sample_step matches the posterior distribution") {
  haltdist::HaltingVector h{{0.5, 0.5, 0.123}};
  auto p = haltdist::posterior_from_halting(h);
  RngStream rng(7);
  std::vector<long> counts(3, 0);
  for (int trial = 0; trial < 20000; ++trial) {
    int got = 3;
    for (int i = 1; i <= 3; ++i)
      if (sample_step(h.lambdas[i - 1], rng, i, 3) == StepAction::exit_now) {
        got = i;
        break;
      }
    ++counts[got - 1];
  }
  CHECK(teststats::chi_square_gof_p(counts, p.probs) > 0.001);
  SUBCASE("last layer is unconditional") {
    RngStream r2(1);
    CHECK(sample_step(0.0, r2, 3, 3) == StepAction::exit_now);
  }
}

TEST_CASE("patience_step") {
  // matching prediction extends the streak
  auto s = patience_step(1, 1, 2, 3, 4, 12);
  CHECK(s.streak == 3);
  CHECK(s.action == StepAction::exit_now);
  s = patience_step(1, 1, 1, 3, 3, 12);
  CHECK(s.streak == 2);
  CHECK(s.action == StepAction::continue_running);
  SUBCASE("disagreement resets to a streak of one") {
    s = patience_step(0, 1, 5, 6, 7, 12);
    CHECK(s.streak == 1);
    CHECK(s.action == StepAction::continue_running);
  }
  SUBCASE("first layer starts the streak") {
    s = patience_step(1, -1, 0, 6, 1, 12);
    CHECK(s.streak == 1);
  }
  SUBCASE("forced exit at depth n") {
    s = patience_step(0, 1, 2, 6, 12, 12);
    CHECK(s.action == StepAction::exit_now);
  }
  SUBCASE("patience larger than depth is rejected") {
    CHECK_THROWS(patience_step(1, 1, 1, 13, 1, 12));
  }
}

TEST_CASE("entropy policy") {
  SUBCASE("softmax entropy hand values") {
    CHECK(softmax_entropy(Array::row({0.0, 0.0})) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(softmax_entropy(Array::row({100.0, 0.0})) == doctest::Approx(0.0).epsilon(1e-9));
    // p = [e/(e+1), 1/(e+1)]
    double p1 = std::exp(1.0) / (std::exp(1.0) + 1.0);
    double expect = -(p1 * std::log(p1) + (1 - p1) * std::log(1 - p1));
    CHECK(softmax_entropy(Array::row({1.0, 0.0})) == doctest::Approx(expect).epsilon(1e-12));
  }
  SUBCASE("step compares against the threshold") {
    CHECK(entropy_step(Array::row({3.0, 0.0}), 0.4, 1, 4) == StepAction::exit_now);
    CHECK(entropy_step(Array::row({0.1, 0.0}), 0.4, 1, 4) == StepAction::continue_running);
    CHECK(entropy_step(Array::row({0.0, 0.0}), 0.0001, 4, 4) == StepAction::exit_now);
  }
}

TEST_CASE("run_policy on a real model") {
  model::ModelConfig c = tiny_config();
  RngStream rng(21);
  model::ParamStore p = model::init_params(c, rng);

  SUBCASE("fixed:k evaluates exactly k layers") {
    for (int k : {1, 3, 6}) {
      ExitDecision d = run_policy(c, p, toks(), Fixed{k});
      CHECK(d.exit_layer == k);
      CHECK(d.layers_evaluated == k);
      CHECK(d.non_early_exit == (k == c.max_layers));
      CHECK(d.prediction.size() == 2);
    }
    CHECK_THROWS(run_policy(c, p, toks(), Fixed{7}));  // deeper than the model
  }
  SUBCASE("q_exit is deterministic and exits earlier for smaller q") {
    ExitDecision a = run_policy(c, p, toks(), QExit{0.05});
    ExitDecision b = run_policy(c, p, toks(), QExit{0.95});
    CHECK(a.exit_layer <= b.exit_layer);
    ExitDecision a2 = run_policy(c, p, toks(), QExit{0.05});
    CHECK(a.exit_layer == a2.exit_layer);
    CHECK(a.prediction == a2.prediction);
    CHECK(a.cdf_at_exit >= 0.05);
    CHECK(a.layers_evaluated == a.exit_layer);
  }
  SUBCASE("q=1 never exits before the final layer unless mass saturates") {
    ExitDecision d = run_policy(c, p, toks(), QExit{1.0});
    CHECK(d.exit_layer == c.max_layers);
  }
  SUBCASE("sampling is reproducible per (seed, example) and varies across streams") {
    ExitDecision a = run_policy(c, p, toks(), Sample{99}, 5);
    ExitDecision b = run_policy(c, p, toks(), Sample{99}, 5);
    CHECK(a.exit_layer == b.exit_layer);
    bool any_diff = false;
    for (uint64_t ex = 0; ex < 64 && !any_diff; ++ex)
      any_diff = run_policy(c, p, toks(), Sample{99}, ex).exit_layer != a.exit_layer;
    CHECK(any_diff);
  }
  SUBCASE("expectation runs the full stack and mixes per-layer softmaxes") {
    ExitDecision d = run_policy(c, p, toks(), Expectation{});
    CHECK(d.layers_evaluated == c.max_layers);
    CHECK(d.non_early_exit);
    double sum = 0.0;
    for (double v : d.prediction) {
      CHECK(v >= 0.0);
      sum += v;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    // reproduce by hand from the full trace
    model::LayerTrace t = model::forward_full(c, p, toks());
    haltdist::HaltingVector h;
    std::vector<std::vector<double>> per_layer;
    for (const auto& e : t.entries) {
      h.lambdas.push_back(e.lambda);
      double z = 0.0;
      std::vector<double> sm(2);
      double m = std::max(e.logits.at(0, 0), e.logits.at(0, 1));
      for (int k = 0; k < 2; ++k) z += sm[k] = std::exp(e.logits.at(0, k) - m);
      for (int k = 0; k < 2; ++k) sm[k] /= z;
      per_layer.push_back(sm);
    }
    auto mixed = haltdist::expectation_mixture(haltdist::posterior_from_halting(h), per_layer);
    CHECK(d.prediction[0] == doctest::Approx(mixed[0]).epsilon(1e-12));
    CHECK(d.predicted_class == (mixed[0] >= mixed[1] ? 0 : 1));
  }
  SUBCASE("entropy policy evaluates no more layers than it needs") {
    ExitDecision relaxed = run_policy(c, p, toks(), Entropy{10.0});  // everything passes
    CHECK(relaxed.exit_layer == 1);
    ExitDecision strict = run_policy(c, p, toks(), Entropy{0.0});
    CHECK(strict.exit_layer == c.max_layers);
  }
  SUBCASE("patience on a shared-head model reaches a decision") {
    ExitDecision d = run_policy(c, p, toks(), Patience{2});
    CHECK(d.exit_layer >= 2);
    CHECK(d.layers_evaluated == d.exit_layer);
  }
  SUBCASE("halting policies require a Lambda network") {
    model::ModelConfig v = c;
    v.has_lambda = false;
    RngStream r2(22);
    model::ParamStore pv = model::init_params(v, r2);
    CHECK_THROWS(run_policy(v, pv, toks(), QExit{0.5}));
    CHECK_THROWS(run_policy(v, pv, toks(), Sample{1}));
    CHECK_THROWS(run_policy(v, pv, toks(), Expectation{}));
    CHECK_NOTHROW(run_policy(v, pv, toks(), Fixed{6}));
    CHECK_NOTHROW(run_policy(v, pv, toks(), Entropy{0.4}));
  }
  SUBCASE("q_exit decision agrees with offline CDF over many examples") {
    RngStream gen(5);
    for (int trial = 0; trial < 25; ++trial) {
      std::vector<int> seq;
      int len = 1 + static_cast<int>(gen.next_below(8));
      for (int i = 0; i < len; ++i) seq.push_back(static_cast<int>(gen.next_below(11)));
      model::LayerTrace t = model::forward_full(c, p, seq);
      haltdist::HaltingVector h;
      for (const auto& e : t.entries) h.lambdas.push_back(e.lambda);
      auto cdfv = haltdist::cdf(haltdist::posterior_from_halting(h));
      double q = 0.05 + 0.9 * gen.next_double();
      int expected = c.max_layers;
      for (int i = 0; i < c.max_layers; ++i)
        if (cdfv[i] >= q) {
          expected = i + 1;
          break;
        }
      ExitDecision d = run_policy(c, p, seq, QExit{q});
      CHECK(d.exit_layer == expected);
      CHECK(d.layers_evaluated == expected);
    }
  }
}
