#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ponder/array.hpp"
#include "ponder/rng.hpp"

namespace ponder::ad {

class Tape;

// Lightweight handle into a tape. Valid as long as the tape lives.
struct Value {
  Tape* tape = nullptr;
  int id = -1;
};

// Reverse-mode tape. Nodes are appended in evaluation order, which is a
// topological order by construction; backward walks it in reverse, giving a
// fixed, deterministic accumulation order.
class Tape {
 public:
  struct Node {
    Array val;
    Array grad;                       // same shape as val, lazily zeroed
    std::function<void(Tape&)> back;  // empty for leaves
  };

  Value leaf(Array v);

  const Array& val(Value v) const { return nodes_[v.id].val; }
  const Array& grad(Value v) const { return nodes_[v.id].grad; }

  // Seeds the root (must be scalar) with gradient 1 and propagates.
  void backward(Value root);

  size_t num_nodes() const { return nodes_.size(); }

  // internal: used by op builders
  Value push(Array v, std::function<void(Tape&)> back);
  Node& node(int id) { return nodes_[id]; }

 private:
  std::vector<Node> nodes_;
};

// ---- forward ops (each records its backward rule) ----

Value add(Value a, Value b);        // same shape, or b broadcast from 1 row / 1x1
Value sub(Value a, Value b);        // same shape or b scalar
Value mul(Value a, Value b);        // elementwise; either side may be 1x1 scalar
Value scale(Value a, double c);
Value add_const(Value a, double c);
Value neg(Value a);
Value matmul(Value a, Value b);
Value transpose(Value a);
Value concat_cols(Value a, Value b);
Value slice_cols(Value a, int c0, int c1);  // half-open column range
Value row(Value a, int r);                  // 1xD view of one row
Value tanh_(Value a);
Value sigmoid_(Value a);
Value softmax_rows(Value a);
Value log_(Value a);
Value inv(Value a);  // elementwise 1/x
Value sum_all(Value a);
Value mean_all(Value a);
Value embedding_lookup(Value table, const std::vector<int>& ids);
Value layer_norm(Value x, Value gain, Value bias, double eps = 1e-5);
Value dropout(Value x, double rate, RngStream& rng, bool train);
// Mean negative log likelihood of the target class under softmax(logits).
// logits is 1xC, target in [0, C).
Value cross_entropy_with_logits(Value logits, int target);

// ---- gradient checking ----

struct GradCheckEntry {
  std::string name;
  double max_rel_err;
  bool pass;
};
struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0.0;
  bool pass = true;
};

// f maps named parameter arrays to a scalar loss; must be deterministic.
// Analytic gradients come from the caller via grad_fn (same params, returns
// gradient per name); numeric side is central differences with the given step.
GradCheckReport grad_check(
    const std::function<double(const std::map<std::string, Array>&)>& f,
    const std::function<std::map<std::string, Array>(const std::map<std::string, Array>&)>& grad_fn,
    const std::map<std::string, Array>& params, double step, double tol);

}  // namespace ponder::ad
