#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ponder/array.hpp"
#include "ponder/rng.hpp"
#include "ponder/tape.hpp"

namespace ponder::model {

enum class LambdaArch { one_layer, three_layer };
enum class LambdaInput { single_h, concat_h_prev };
enum class ClassifierMode { shared, per_layer };

struct ModelConfig {
  int vocab_size = 32;
  int max_seq_len = 32;
  int d_model = 64;
  int n_heads = 2;
  int d_ff = 128;
  int max_layers = 12;
  int num_classes = 2;
  LambdaArch lambda_arch = LambdaArch::three_layer;
  LambdaInput lambda_input = LambdaInput::concat_h_prev;
  ClassifierMode classifier_mode = ClassifierMode::shared;
  bool has_lambda = true;  // off for vanilla fixed-depth models
  bool lambda_init_to_prior = true;
  double lambda_init_prior = 0.1;
  double classifier_dropout = 0.1;

  void validate() const;
};

// Flat named parameter arrays with a fixed iteration order.
struct ParamStore {
  std::vector<std::string> order;
  std::map<std::string, Array> values;

  void add(const std::string& name, Array a);
  Array& at(const std::string& name) { return values.at(name); }
  const Array& at(const std::string& name) const { return values.at(name); }
  bool has(const std::string& name) const { return values.count(name) > 0; }
  size_t total_count() const;
};

ParamStore init_params(const ModelConfig& cfg, RngStream& rng);

static inline bool is_lambda_param(const std::string& name) {
  return name.rfind("lambda.", 0) == 0;
}

// Per-layer record from one forward pass.
struct LayerEntry {
  Array pooled;   // 1 x d_model, layer-normed first-token vector
  Array logits;   // 1 x num_classes
  double lambda;  // in (0,1); 0 when the model has no Lambda net
};

struct LayerTrace {
  std::vector<LayerEntry> entries;  // one per evaluated layer, in order
  int steps_evaluated = 0;          // step-cell invocations actually performed
};

// Graph-building forward pass on a caller-owned tape. Returns per-layer Values
// for the training loss. `params_on_tape` maps every parameter name to a leaf.
struct GraphTrace {
  std::vector<ad::Value> pooled;
  std::vector<ad::Value> logits;
  std::vector<ad::Value> lambda;  // scalar Values, empty when has_lambda is false
  int steps_evaluated = 0;
};

GraphTrace forward_graph(const ModelConfig& cfg, ad::Tape& tape,
                         const std::map<std::string, ad::Value>& params_on_tape,
                         const std::vector<int>& tokens, bool train_mode,
                         RngStream* dropout_rng,
                         const std::function<bool(int layer, const LayerEntry&)>& consumer);

std::map<std::string, ad::Value> params_to_tape(ad::Tape& tape, const ParamStore& params);

// Eager forward passes (no gradients). forward_full unrolls all layers;
// forward_incremental stops when the consumer returns false, and its trace is
// bitwise-identical to the corresponding forward_full prefix.
LayerTrace forward_full(const ModelConfig& cfg, const ParamStore& params,
                        const std::vector<int>& tokens);
LayerTrace forward_incremental(const ModelConfig& cfg, const ParamStore& params,
                               const std::vector<int>& tokens,
                               const std::function<bool(int layer, const LayerEntry&)>& consumer);

// Classifier head on a pooled vector; layer_index is 1-based and only
// consulted in per_layer mode.
Array classify(const ModelConfig& cfg, const ParamStore& params, const Array& pooled,
               int layer_index);

std::string modelconfig_to_json(const ModelConfig& cfg);
ModelConfig modelconfig_from_json_text(const std::string& text);

// Checkpoint I/O: JSON with a magic string and format version.
void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ParamStore& params);
std::pair<ModelConfig, ParamStore> load_checkpoint(const std::string& path);

}  // namespace ponder::model
