#include "ponder/model.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace ponder::model {

using ad::Tape;
using ad::Value;
using nlohmann::json;

void ModelConfig::validate() const {
  if (max_layers < 1) throw std::invalid_argument("ModelConfig: max_layers < 1");
  if (num_classes < 2) throw std::invalid_argument("ModelConfig: num_classes < 2");
  if (d_model % n_heads != 0)
    throw std::invalid_argument("ModelConfig: d_model not divisible by n_heads");
  if (d_model < 2) throw std::invalid_argument("ModelConfig: d_model < 2");
  if (vocab_size < 1 || max_seq_len < 1)
    throw std::invalid_argument("ModelConfig: vocab_size and max_seq_len must be positive");
  if (classifier_dropout < 0.0 || classifier_dropout >= 1.0)
    throw std::invalid_argument("ModelConfig: classifier_dropout outside [0,1)");
  if (lambda_init_prior <= 0.0 || lambda_init_prior >= 1.0)
    throw std::invalid_argument("ModelConfig: lambda_init_prior outside (0,1)");
}

void ParamStore::add(const std::string& name, Array a) {
  if (values.count(name)) throw std::logic_error("ParamStore: duplicate parameter " + name);
  order.push_back(name);
  values.emplace(name, std::move(a));
}

size_t ParamStore::total_count() const {
  size_t n = 0;
  for (const auto& name : order) n += values.at(name).size();
  return n;
}

namespace {

Array gaussian(int rows, int cols, double std_dev, RngStream& rng) {
  Array a(rows, cols, 0.0);
  for (size_t i = 0; i < a.size(); ++i) a[i] = std_dev * rng.next_gaussian();
  return a;
}

void add_affine(ParamStore& p, const std::string& prefix, int din, int dout, RngStream& rng,
                double std_override = -1.0) {
  double s = std_override >= 0.0 ? std_override : 1.0 / std::sqrt(static_cast<double>(din));
  p.add(prefix + ".w", gaussian(din, dout, s, rng));
  p.add(prefix + ".b", Array(1, dout, 0.0));
}

}  // namespace

ParamStore init_params(const ModelConfig& cfg, RngStream& rng) {
  cfg.validate();
  ParamStore p;
  p.add("embed.tok", gaussian(cfg.vocab_size, cfg.d_model, 0.02, rng));
  p.add("embed.pos", gaussian(cfg.max_seq_len, cfg.d_model, 0.02, rng));

  p.add("cell.ln1.g", Array(1, cfg.d_model, 1.0));
  p.add("cell.ln1.b", Array(1, cfg.d_model, 0.0));
  add_affine(p, "cell.attn.q", cfg.d_model, cfg.d_model, rng);
  add_affine(p, "cell.attn.k", cfg.d_model, cfg.d_model, rng);
  add_affine(p, "cell.attn.v", cfg.d_model, cfg.d_model, rng);
  add_affine(p, "cell.attn.o", cfg.d_model, cfg.d_model, rng);
  p.add("cell.ln2.g", Array(1, cfg.d_model, 1.0));
  p.add("cell.ln2.b", Array(1, cfg.d_model, 0.0));
  add_affine(p, "cell.ff.1", cfg.d_model, cfg.d_ff, rng);
  add_affine(p, "cell.ff.2", cfg.d_ff, cfg.d_model, rng);

  p.add("final_ln.g", Array(1, cfg.d_model, 1.0));
  p.add("final_ln.b", Array(1, cfg.d_model, 0.0));

  if (cfg.classifier_mode == ClassifierMode::shared) {
    add_affine(p, "cls", cfg.d_model, cfg.num_classes, rng);
  } else {
    for (int i = 1; i <= cfg.max_layers; ++i)
      add_affine(p, "cls." + std::to_string(i), cfg.d_model, cfg.num_classes, rng);
  }

  if (cfg.has_lambda) {
    int din = cfg.lambda_input == LambdaInput::concat_h_prev ? 2 * cfg.d_model : cfg.d_model;
    if (cfg.lambda_arch == LambdaArch::one_layer) {
      add_affine(p, "lambda.out", din, 1, rng, cfg.lambda_init_to_prior ? 0.01 : -1.0);
    } else {
      add_affine(p, "lambda.1", din, cfg.d_model, rng);
      add_affine(p, "lambda.2", cfg.d_model, cfg.d_model / 2, rng);
      add_affine(p, "lambda.out", cfg.d_model / 2, 1, rng,
                 cfg.lambda_init_to_prior ? 0.01 : -1.0);
    }
    if (cfg.lambda_init_to_prior) {
      double pr = cfg.lambda_init_prior;
      p.at("lambda.out.b").at(0, 0) = std::log(pr / (1.0 - pr));
    }
  }
  return p;
}

std::map<std::string, Value> params_to_tape(Tape& tape, const ParamStore& params) {
  std::map<std::string, Value> out;
  for (const auto& name : params.order) out.emplace(name, tape.leaf(params.at(name)));
  return out;
}

namespace {

Value affine(const std::map<std::string, Value>& P, const std::string& prefix, Value x) {
  return ad::add(ad::matmul(x, P.at(prefix + ".w")), P.at(prefix + ".b"));
}

// One shared pre-norm encoder block: self-attention then feed-forward, both
// with residual connections.
Value step_cell(const ModelConfig& cfg, const std::map<std::string, Value>& P, Value h) {
  Value a = ad::layer_norm(h, P.at("cell.ln1.g"), P.at("cell.ln1.b"));
  Value q = affine(P, "cell.attn.q", a);
  Value k = affine(P, "cell.attn.k", a);
  Value v = affine(P, "cell.attn.v", a);
  const int dh = cfg.d_model / cfg.n_heads;
  Value ctx{};
  for (int head = 0; head < cfg.n_heads; ++head) {
    int c0 = head * dh, c1 = c0 + dh;
    Value qh = ad::slice_cols(q, c0, c1);
    Value kh = ad::slice_cols(k, c0, c1);
    Value vh = ad::slice_cols(v, c0, c1);
    Value scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), 1.0 / std::sqrt(double(dh)));
    Value att = ad::softmax_rows(scores);
    Value ctx_h = ad::matmul(att, vh);
    ctx = head == 0 ? ctx_h : ad::concat_cols(ctx, ctx_h);
  }
  Value h1 = ad::add(h, affine(P, "cell.attn.o", ctx));
  Value f = ad::layer_norm(h1, P.at("cell.ln2.g"), P.at("cell.ln2.b"));
  Value ff = affine(P, "cell.ff.2", ad::tanh_(affine(P, "cell.ff.1", f)));
  return ad::add(h1, ff);
}

Value pooled_of(const std::map<std::string, Value>& P, Value h) {
  return ad::layer_norm(ad::row(h, 0), P.at("final_ln.g"), P.at("final_ln.b"));
}

Value classifier_head(const ModelConfig& cfg, const std::map<std::string, Value>& P,
                      Value pooled, int layer_index, bool train_mode, RngStream* dropout_rng) {
  Value x = pooled;
  if (train_mode && cfg.classifier_dropout > 0.0) {
    if (!dropout_rng) throw std::logic_error("forward_graph: train mode requires a dropout rng");
    x = ad::dropout(x, cfg.classifier_dropout, *dropout_rng, true);
  }
  if (cfg.classifier_mode == ClassifierMode::shared) return affine(P, "cls", x);
  if (layer_index < 1 || layer_index > cfg.max_layers)
    throw std::out_of_range("classify: layer index " + std::to_string(layer_index) +
                            " out of range [1," + std::to_string(cfg.max_layers) + "]");
  return affine(P, "cls." + std::to_string(layer_index), x);
}

Value lambda_head(const ModelConfig& cfg, const std::map<std::string, Value>& P, Value pooled,
                  Value pooled_prev) {
  Value x = cfg.lambda_input == LambdaInput::concat_h_prev
                ? ad::concat_cols(pooled, pooled_prev)
                : pooled;
  if (cfg.lambda_arch == LambdaArch::three_layer) {
    x = ad::tanh_(affine(P, "lambda.1", x));
    x = ad::tanh_(affine(P, "lambda.2", x));
  }
  return ad::sigmoid_(affine(P, "lambda.out", x));
}

}  // namespace

GraphTrace forward_graph(const ModelConfig& cfg, Tape& tape,
                         const std::map<std::string, Value>& P, const std::vector<int>& tokens,
                         bool train_mode, RngStream* dropout_rng,
                         const std::function<bool(int, const LayerEntry&)>& consumer) {
  cfg.validate();
  if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
  if (static_cast<int>(tokens.size()) > cfg.max_seq_len)
    throw std::invalid_argument("forward: sequence length " + std::to_string(tokens.size()) +
                                " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  for (int t : tokens)
    if (t < 0 || t >= cfg.vocab_size)
      throw std::out_of_range("forward: token id " + std::to_string(t) + " out of range [0," +
                              std::to_string(cfg.vocab_size) + ")");

  std::vector<int> positions(tokens.size());
  for (size_t i = 0; i < tokens.size(); ++i) positions[i] = static_cast<int>(i);
  Value h = ad::add(ad::embedding_lookup(P.at("embed.tok"), tokens),
                    ad::embedding_lookup(P.at("embed.pos"), positions));

  GraphTrace out;
  Value pooled_prev = pooled_of(P, h);  // pooled h_0, fed to Lambda at i=1
  for (int i = 1; i <= cfg.max_layers; ++i) {
    h = step_cell(cfg, P, h);
    out.steps_evaluated = i;
    Value pooled = pooled_of(P, h);
    Value logits = classifier_head(cfg, P, pooled, i, train_mode, dropout_rng);
    out.pooled.push_back(pooled);
    out.logits.push_back(logits);
    LayerEntry entry;
    entry.pooled = tape.val(pooled);
    entry.logits = tape.val(logits);
    entry.lambda = 0.0;
    if (cfg.has_lambda) {
      Value lam = lambda_head(cfg, P, pooled, pooled_prev);
      out.lambda.push_back(lam);
      entry.lambda = tape.val(lam).item();
    }
    pooled_prev = pooled;
    if (consumer && !consumer(i, entry)) break;
  }
  return out;
}

namespace {

LayerTrace run_eager(const ModelConfig& cfg, const ParamStore& params,
                     const std::vector<int>& tokens,
                     const std::function<bool(int, const LayerEntry&)>& consumer) {
  Tape tape;
  auto P = params_to_tape(tape, params);
  LayerTrace trace;
  auto capture = [&](int layer, const LayerEntry& e) {
    trace.entries.push_back(e);
    return consumer ? consumer(layer, e) : true;
  };
  GraphTrace g = forward_graph(cfg, tape, P, tokens, /*train_mode=*/false, nullptr, capture);
  trace.steps_evaluated = g.steps_evaluated;
  return trace;
}

}  // namespace

LayerTrace forward_full(const ModelConfig& cfg, const ParamStore& params,
                        const std::vector<int>& tokens) {
  return run_eager(cfg, params, tokens, nullptr);
}

LayerTrace forward_incremental(const ModelConfig& cfg, const ParamStore& params,
                               const std::vector<int>& tokens,
                               const std::function<bool(int, const LayerEntry&)>& consumer) {
  return run_eager(cfg, params, tokens, consumer);
}

Array classify(const ModelConfig& cfg, const ParamStore& params, const Array& pooled,
               int layer_index) {
  std::string prefix = "cls";
  if (cfg.classifier_mode == ClassifierMode::per_layer) {
    if (layer_index < 1 || layer_index > cfg.max_layers)
      throw std::out_of_range("classify: layer index " + std::to_string(layer_index) +
                              " out of range [1," + std::to_string(cfg.max_layers) + "]");
    prefix = "cls." + std::to_string(layer_index);
  }
  const Array& w = params.at(prefix + ".w");
  const Array& b = params.at(prefix + ".b");
  if (pooled.rows() != 1 || pooled.cols() != w.rows())
    throw std::invalid_argument("classify: pooled shape " + pooled.shape_str() +
                                " incompatible with " + w.shape_str());
  Array out(1, w.cols(), 0.0);
  for (int c = 0; c < w.cols(); ++c) {
    double s = b.at(0, c);
    for (int k = 0; k < w.rows(); ++k) s += pooled.at(0, k) * w.at(k, c);
    out.at(0, c) = s;
  }
  return out;
}

// ---- checkpoint I/O ----

namespace {

constexpr const char* kMagic = "PALBERT-CKPT";
constexpr int kVersion = 1;

std::string to_string(LambdaArch a) {
  return a == LambdaArch::one_layer ? "one_layer" : "three_layer";
}
std::string to_string(LambdaInput a) {
  return a == LambdaInput::single_h ? "single_h" : "concat_h_prev";
}
std::string to_string(ClassifierMode a) {
  return a == ClassifierMode::shared ? "shared" : "per_layer";
}

}  // namespace

json config_to_json(const ModelConfig& c);
ModelConfig config_from_json(const json& j);

json config_to_json(const ModelConfig& c) {
  return json{{"vocab_size", c.vocab_size},
              {"max_seq_len", c.max_seq_len},
              {"d_model", c.d_model},
              {"n_heads", c.n_heads},
              {"d_ff", c.d_ff},
              {"max_layers", c.max_layers},
              {"num_classes", c.num_classes},
              {"lambda_arch", to_string(c.lambda_arch)},
              {"lambda_input", to_string(c.lambda_input)},
              {"classifier_mode", to_string(c.classifier_mode)},
              {"has_lambda", c.has_lambda},
              {"lambda_init_to_prior", c.lambda_init_to_prior},
              {"lambda_init_prior", c.lambda_init_prior},
              {"classifier_dropout", c.classifier_dropout}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  c.d_model = j.value("d_model", c.d_model);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.max_layers = j.value("max_layers", c.max_layers);
  c.num_classes = j.value("num_classes", c.num_classes);
  std::string arch = j.value("lambda_arch", "three_layer");
  c.lambda_arch = arch == "one_layer" ? LambdaArch::one_layer : LambdaArch::three_layer;
  std::string input = j.value("lambda_input", "concat_h_prev");
  c.lambda_input = input == "single_h" ? LambdaInput::single_h : LambdaInput::concat_h_prev;
  std::string cm = j.value("classifier_mode", "shared");
  c.classifier_mode = cm == "per_layer" ? ClassifierMode::per_layer : ClassifierMode::shared;
  c.has_lambda = j.value("has_lambda", c.has_lambda);
  c.lambda_init_to_prior = j.value("lambda_init_to_prior", c.lambda_init_to_prior);
  c.lambda_init_prior = j.value("lambda_init_prior", c.lambda_init_prior);
  c.classifier_dropout = j.value("classifier_dropout", c.classifier_dropout);
  return c;
}

std::string modelconfig_to_json(const ModelConfig& cfg) { return config_to_json(cfg).dump(2); }

ModelConfig modelconfig_from_json_text(const std::string& text) {
  ModelConfig c = config_from_json(json::parse(text));
  c.validate();
  return c;
}

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ParamStore& params) {
  json j;
  j["magic"] = kMagic;
  j["version"] = kVersion;
  j["config"] = config_to_json(cfg);
  json jp = json::object();
  for (const auto& name : params.order) {
    const Array& a = params.at(name);
    jp[name] = {{"rows", a.rows()}, {"cols", a.cols()}, {"data", a.data()}};
  }
  j["params"] = jp;
  j["param_order"] = params.order;
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
  f << j.dump();
}

std::pair<ModelConfig, ParamStore> load_checkpoint(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
  json j;
  f >> j;
  if (j.value("magic", "") != kMagic)
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  if (j.value("version", -1) != kVersion)
    throw std::runtime_error("load_checkpoint: unsupported version in " + path);
  ModelConfig cfg = config_from_json(j.at("config"));
  ParamStore params;
  for (const auto& name : j.at("param_order").get<std::vector<std::string>>()) {
    const json& ja = j.at("params").at(name);
    params.add(name, Array(ja.at("rows"), ja.at("cols"), ja.at("data").get<std::vector<double>>()));
  }
  return {cfg, params};
}

}  // namespace ponder::model
