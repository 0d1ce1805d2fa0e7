// Command-line driver: dataset generation, training, evaluation under any
// exit policy, threshold/prior/speed sweeps, ablation tables, grid search.
// All outputs are CSV plus a run-manifest JSON.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "ponder/benchdata.hpp"
#include "ponder/exitpolicy.hpp"
#include "ponder/harness.hpp"
#include "ponder/model.hpp"
#include "ponder/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ponder;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

struct RunConfigs {
  model::ModelConfig model;
  training::TrainConfig train;
  json raw;
};

// Combined config file: {"model": {...}, "train": {...}, optional "grid": {...}}
RunConfigs load_run_configs(const std::string& path, uint64_t seed_override) {
  json j = json::parse(slurp(path));
  RunConfigs rc;
  rc.raw = j;
  rc.model = model::modelconfig_from_json_text(j.value("model", json::object()).dump());
  rc.train = training::trainconfig_from_json_text(j.value("train", json::object()).dump());
  if (seed_override != static_cast<uint64_t>(-1)) rc.train.seed = seed_override;
  return rc;
}

const std::vector<benchdata::Example>& pick_split(const benchdata::Dataset& ds,
                                                  const std::string& name) {
  if (name == "train") return ds.train;
  if (name == "dev") return ds.dev;
  if (name == "test") return ds.test;
  throw std::invalid_argument("unknown split: " + name);
}

harness::Checkpoint load_ckpt(const std::string& path) {
  auto [cfg, params] = model::load_checkpoint(path);
  return {cfg, std::move(params)};
}

std::vector<uint64_t> parse_seeds(const std::string& csv) {
  std::vector<uint64_t> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(std::stoull(tok));
  if (out.empty()) throw std::invalid_argument("empty seed list");
  return out;
}

std::vector<double> parse_doubles(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(std::stod(tok));
  if (out.empty()) throw std::invalid_argument("empty value list");
  return out;
}

std::vector<int> parse_ints(const std::string& csv) {
  std::vector<int> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(std::stoi(tok));
  return out;
}

void train_one(const RunConfigs& rc, const benchdata::Dataset& data, uint64_t seed,
               const std::string& ckpt_path, const std::string& log_path) {
  training::TrainConfig tc = rc.train;
  tc.seed = seed;
  RngStream init_rng = RngStream::derive(seed, 0x1217);
  model::ParamStore params = model::init_params(rc.model, init_rng);
  training::TrainReport rep = training::train(rc.model, tc, data, params);
  model::save_checkpoint(ckpt_path, rc.model, params);
  harness::write_train_log_csv(log_path, rep, harness::config_hash_hex(rc.raw.dump()), seed);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive-depth early-exit benchmark harness"};
  app.require_subcommand(1);

  std::string config_path, out_dir = ".", data_dir, split = "dev";
  uint64_t seed = static_cast<uint64_t>(-1);
  int threads = 1;
  app.add_option("--config", config_path, "JSON config file");
  app.add_option("--seed", seed, "Override the config seed");
  app.add_option("--out", out_dir, "Output directory");
  app.add_option("--threads", threads, "Worker threads for independent sweep cells");

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");

  auto* train_cmd = app.add_subcommand("train", "Train one model");
  train_cmd->add_option("--data", data_dir, "Dataset directory")->required();

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint under an exit policy");
  std::string ckpt_path, policy_str = "q_exit:0.5";
  eval_cmd->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required();
  eval_cmd->add_option("--policy", policy_str,
                       "q_exit:Q | sample:SEED | patience:T | entropy:H | fixed:K | expectation");
  eval_cmd->add_option("--data", data_dir, "Dataset directory")->required();
  eval_cmd->add_option("--split", split, "train | dev | test");

  auto* sweepq = app.add_subcommand("sweep-q", "Q-exit threshold sweep over checkpoints");
  std::vector<std::string> ckpt_paths;
  std::string q_list = "0.05,0.25,0.5,0.75,0.95";
  sweepq->add_option("--checkpoint", ckpt_paths, "Checkpoint file(s)")->required();
  sweepq->add_option("--q", q_list, "Comma-separated thresholds");
  sweepq->add_option("--data", data_dir, "Dataset directory")->required();
  sweepq->add_option("--split", split, "train | dev | test");

  auto* sweepp = app.add_subcommand("sweep-prior", "Retrain per prior lambda and histogram exits");
  std::string lambda_list = "0.1,0.15,0.25,0.5", seed_list = "0,1,2,3,4";
  sweepp->add_option("--lambdas", lambda_list, "Comma-separated prior values");
  sweepp->add_option("--seeds", seed_list, "Comma-separated training seeds");
  sweepp->add_option("--data", data_dir, "Dataset directory")->required();

  auto* speed = app.add_subcommand("speed", "Speed/accuracy Pareto table for both families");
  std::vector<std::string> palbert_paths, pabee_paths;
  std::string t_list = "2,3,4,6,11";
  speed->add_option("--palbert", palbert_paths, "Ponder checkpoints");
  speed->add_option("--pabee", pabee_paths, "Patience-family checkpoints");
  speed->add_option("--q", q_list, "Q-exit thresholds");
  speed->add_option("--t", t_list, "Patience values");
  speed->add_option("--data", data_dir, "Dataset directory")->required();
  speed->add_option("--split", split, "train | dev | test");

  auto* ablation = app.add_subcommand("ablation", "Eight-row ablation table");
  ablation->add_option("--seeds", seed_list, "Comma-separated training seeds");
  ablation->add_option("--data", data_dir, "Dataset directory")->required();

  auto* grid = app.add_subcommand("grid-search", "Hyperparameter grid search");
  grid->add_option("--seeds", seed_list, "Comma-separated training seeds");
  grid->add_option("--data", data_dir, "Dataset directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    fs::create_directories(out_dir);
    std::string command = argv[1];

    if (gen->parsed()) {
      benchdata::TaskSpec spec = benchdata::taskspec_from_file(config_path);
      if (seed != static_cast<uint64_t>(-1)) spec.seed = seed;
      benchdata::Dataset ds = benchdata::generate(spec);
      benchdata::save_dataset(out_dir, ds);
      std::ofstream(out_dir + "/taskspec.json") << benchdata::taskspec_to_json(spec);
      harness::write_manifest(out_dir + "/manifest.json", command,
                              benchdata::taskspec_to_json(spec), spec.seed);
    } else if (train_cmd->parsed()) {
      RunConfigs rc = load_run_configs(config_path, seed);
      benchdata::Dataset data = benchdata::load_dataset(data_dir);
      train_one(rc, data, rc.train.seed, out_dir + "/checkpoint.json",
                out_dir + "/train_log.csv");
      harness::write_manifest(out_dir + "/manifest.json", command, rc.raw.dump(), rc.train.seed);
    } else if (eval_cmd->parsed()) {
      harness::Checkpoint ck = load_ckpt(ckpt_path);
      benchdata::Dataset data = benchdata::load_dataset(data_dir);
      exitpolicy::ExitPolicy policy = exitpolicy::parse_policy(policy_str);
      harness::EvalResult r = harness::evaluate(ck.cfg, ck.params, pick_split(data, split), policy);
      harness::write_eval_csv(out_dir + "/eval.csv", r);
      harness::write_eval_summary_csv(out_dir + "/eval_summary.csv", r);
      harness::write_manifest(out_dir + "/manifest.json", command,
                              model::modelconfig_to_json(ck.cfg) + policy_str + split,
                              seed == static_cast<uint64_t>(-1) ? 0 : seed);
    } else if (sweepq->parsed()) {
      std::vector<harness::Checkpoint> cks;
      for (const auto& p : ckpt_paths) cks.push_back(load_ckpt(p));
      benchdata::Dataset data = benchdata::load_dataset(data_dir);
      auto rows = harness::sweep_q(cks, parse_doubles(q_list), pick_split(data, split));
      harness::write_q_sweep_csv(out_dir + "/q_sweep.csv", rows);
      harness::write_manifest(out_dir + "/manifest.json", command, q_list + split,
                              seed == static_cast<uint64_t>(-1) ? 0 : seed);
    } else if (sweepp->parsed()) {
      RunConfigs rc = load_run_configs(config_path, seed);
      benchdata::Dataset data = benchdata::load_dataset(data_dir);
      auto results = harness::sweep_prior(rc.model, rc.train, data, parse_doubles(lambda_list),
                                          parse_seeds(seed_list), threads);
      harness::write_prior_sweep_csvs(out_dir, results, rc.model.max_layers);
      harness::write_manifest(out_dir + "/manifest.json", command,
                              rc.raw.dump() + lambda_list + seed_list, rc.train.seed);
    } else if (speed->parsed()) {
      std::vector<harness::Checkpoint> palbert, pabee;
      for (const auto& p : palbert_paths) palbert.push_back(load_ckpt(p));
      for (const auto& p : pabee_paths) pabee.push_back(load_ckpt(p));
      benchdata::Dataset data = benchdata::load_dataset(data_dir);
      auto rows = harness::speed_report(palbert, pabee, parse_doubles(q_list),
                                        parse_ints(t_list), pick_split(data, split));
      harness::write_speed_csv(out_dir + "/speed.csv", rows);
      harness::write_manifest(out_dir + "/manifest.json", command, q_list + t_list + split,
                              seed == static_cast<uint64_t>(-1) ? 0 : seed);
    } else if (ablation->parsed()) {
      RunConfigs rc = load_run_configs(config_path, seed);
      benchdata::Dataset data = benchdata::load_dataset(data_dir);
      auto rows = training::run_ablation(rc.model, rc.train, data, parse_seeds(seed_list));
      harness::write_ablation_csv(out_dir + "/ablation.csv", rows);
      harness::write_manifest(out_dir + "/manifest.json", command, rc.raw.dump() + seed_list,
                              rc.train.seed);
    } else if (grid->parsed()) {
      RunConfigs rc = load_run_configs(config_path, seed);
      benchdata::Dataset data = benchdata::load_dataset(data_dir);
      training::GridSpec gs;
      json jg = rc.raw.value("grid", json::object());
      gs.learning_rates = jg.value("learning_rates", std::vector<double>{rc.train.learning_rate});
      gs.lambda_learning_rates = jg.value("lambda_learning_rates", std::vector<double>{});
      gs.batch_sizes = jg.value("batch_sizes", std::vector<int>{rc.train.batch_size});
      auto result = training::grid_search(rc.model, rc.train, gs, data, parse_seeds(seed_list));
      harness::write_grid_csv(out_dir + "/grid.csv", result);
      harness::write_manifest(out_dir + "/manifest.json", command, rc.raw.dump() + seed_list,
                              rc.train.seed);
    }
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "{\"error\": \"" << e.what() << "\"}" << std::endl;
    return 1;
  }
}
