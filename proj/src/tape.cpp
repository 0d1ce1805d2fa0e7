#include "ponder/tape.hpp"

#include <cmath>
#include <stdexcept>

namespace ponder::ad {

Value Tape::leaf(Array v) { return push(std::move(v), nullptr); }

Value Tape::push(Array v, std::function<void(Tape&)> back) {
  Node n;
  n.grad = Array(v.rows(), v.cols(), 0.0);
  n.val = std::move(v);
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Value{this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::backward(Value root) {
  if (root.tape != this) throw std::logic_error("backward: root from another tape");
  Node& r = nodes_[root.id];
  if (r.val.size() != 1) throw std::invalid_argument("backward: root must be scalar");
  r.grad[0] = 1.0;
  for (int i = root.id; i >= 0; --i)
    if (nodes_[i].back) nodes_[i].back(*this);
}

namespace {

void check_same_tape(Value a, Value b, const char* op) {
  if (a.tape != b.tape) throw std::logic_error(std::string(op) + ": operands from different tapes");
}

// Creates the output node and attaches the backward closure afterwards, so the
// closure can capture the output id.
template <typename Back>
Value make_op(Tape& t, Array out, Back&& back_with_out) {
  Value o = t.push(std::move(out), nullptr);
  t.node(o.id).back = [o_id = o.id, f = std::forward<Back>(back_with_out)](Tape& tp) {
    f(tp, o_id);
  };
  return o;
}

}  // namespace

Value add(Value a, Value b) {
  check_same_tape(a, b, "add");
  Tape& t = *a.tape;
  Array out = t.val(a);
  const Array& bv = t.val(b);
  enum class Mode { same, row, scalar } mode;
  if (bv.same_shape(out)) {
    mode = Mode::same;
    for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  } else if (bv.rows() == 1 && bv.cols() == out.cols()) {
    mode = Mode::row;
    for (int r = 0; r < out.rows(); ++r)
      for (int c = 0; c < out.cols(); ++c) out.at(r, c) += bv.at(0, c);
  } else if (bv.size() == 1) {
    mode = Mode::scalar;
    for (size_t i = 0; i < out.size(); ++i) out[i] += bv[0];
  } else {
    throw std::invalid_argument("add: shape mismatch " + out.shape_str() + " vs " + bv.shape_str());
  }
  return make_op(t, std::move(out), [a_id = a.id, b_id = b.id, mode](Tape& tp, int o_id) {
    const Array& g = tp.node(o_id).grad;
    Array& ga = tp.node(a_id).grad;
    Array& gb = tp.node(b_id).grad;
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    switch (mode) {
      case Mode::same:
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        break;
      case Mode::row:
        for (int r = 0; r < g.rows(); ++r)
          for (int c = 0; c < g.cols(); ++c) gb.at(0, c) += g.at(r, c);
        break;
      case Mode::scalar:
        for (size_t i = 0; i < g.size(); ++i) gb[0] += g[i];
        break;
    }
  });
}

Value sub(Value a, Value b) {
  check_same_tape(a, b, "sub");
  Tape& t = *a.tape;
  Array out = t.val(a);
  const Array& bv = t.val(b);
  bool scalar_b = bv.size() == 1 && out.size() != 1;
  if (!scalar_b) require_same_shape(out, bv, "sub");
  for (size_t i = 0; i < out.size(); ++i) out[i] -= scalar_b ? bv[0] : bv[i];
  return make_op(t, std::move(out), [a_id = a.id, b_id = b.id, scalar_b](Tape& tp, int o_id) {
    const Array& g = tp.node(o_id).grad;
    Array& ga = tp.node(a_id).grad;
    Array& gb = tp.node(b_id).grad;
    for (size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i];
      gb[scalar_b ? 0 : i] -= g[i];
    }
  });
}

Value mul(Value a, Value b) {
  check_same_tape(a, b, "mul");
  Tape& t = *a.tape;
  const Array& av = t.val(a);
  const Array& bv = t.val(b);
  // Either same shape, or one operand is a 1x1 scalar.
  if (av.size() == 1 && bv.size() != 1) return mul(b, a);
  bool scalar_b = bv.size() == 1 && av.size() != 1;
  if (!scalar_b) require_same_shape(av, bv, "mul");
  Array out = av;
  for (size_t i = 0; i < out.size(); ++i) out[i] *= scalar_b ? bv[0] : bv[i];
  return make_op(t, std::move(out), [a_id = a.id, b_id = b.id, scalar_b](Tape& tp, int o_id) {
    const Array& g = tp.node(o_id).grad;
    const Array& av = tp.node(a_id).val;
    const Array& bv = tp.node(b_id).val;
    Array& ga = tp.node(a_id).grad;
    Array& gb = tp.node(b_id).grad;
    for (size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i] * (scalar_b ? bv[0] : bv[i]);
      gb[scalar_b ? 0 : i] += g[i] * av[i];
    }
  });
}

Value scale(Value a, double c) {
  Tape& t = *a.tape;
  Array out = t.val(a);
  for (size_t i = 0; i < out.size(); ++i) out[i] *= c;
  return make_op(t, std::move(out), [a_id = a.id, c](Tape& tp, int o_id) {
    const Array& g = tp.node(o_id).grad;
    Array& ga = tp.node(a_id).grad;
    for (size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
  });
}

Value add_const(Value a, double c) {
  Tape& t = *a.tape;
  Array out = t.val(a);
  for (size_t i = 0; i < out.size(); ++i) out[i] += c;
  return make_op(t, std::move(out), [a_id = a.id](Tape& tp, int o_id) {
    const Array& g = tp.node(o_id).grad;
    Array& ga = tp.node(a_id).grad;
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Value neg(Value a) { return scale(a, -1.0); }

Value matmul(Value a, Value b) {
  check_same_tape(a, b, "matmul");
  Tape& t = *a.tape;
  const Array& av = t.val(a);
  const Array& bv = t.val(b);
  if (av.cols() != bv.rows())
    throw std::invalid_argument("matmul: shape mismatch " + av.shape_str() + " vs " +
                                bv.shape_str());
  const int M = av.rows(), K = av.cols(), N = bv.cols();
  Array out(M, N, 0.0);
  for (int i = 0; i < M; ++i)
    for (int k = 0; k < K; ++k) {
      double aik = av.at(i, k);
      for (int j = 0; j < N; ++j) out.at(i, j) += aik * bv.at(k, j);
    }
  return make_op(t, std::move(out), [a_id = a.id, b_id = b.id, M, K, N](Tape& tp, int o_id) {
    const Array& g = tp.node(o_id).grad;
    const Array& av = tp.node(a_id).val;
    const Array& bv = tp.node(b_id).val;
    Array& ga = tp.node(a_id).grad;
    Array& gb = tp.node(b_id).grad;
    // dA += dC * B^T
    for (int i = 0; i < M; ++i)
      for (int j = 0; j < N; ++j) {
        double gij = g.at(i, j);
        for (int k = 0; k < K; ++k) ga.at(i, k) += gij * bv.at(k, j);
      }
    // dB += A^T * dC
    for (int i = 0; i < M; ++i)
      for (int k = 0; k < K; ++k) {
        double aik = av.at(i, k);
        for (int j = 0; j < N; ++j) gb.at(k, j) += aik * g.at(i, j);
      }
  });
}

Value transpose(Value a) {
  Tape& t = *a.tape;
  const Array& av = t.val(a);
  Array out(av.cols(), av.rows(), 0.0);
  for (int r = 0; r < av.rows(); ++r)
    for (int c = 0; c < av.cols(); ++c) out.at(c, r) = av.at(r, c);
  return make_op(t, std::move(out), [a_id = a.id](Tape& tp, int o_id) {
    const Array& g = tp.node(o_id).grad;
    Array& ga = tp.node(a_id).grad;
    for (int r = 0; r < g.rows(); ++r)
      for (int c = 0; c < g.cols(); ++c) ga.at(c, r) += g.at(r, c);
  });
}

Value concat_cols(Value a, Value b) {
  check_same_tape(a, b, "concat_cols");
  Tape& t = *a.tape;
  const Array& av = t.val(a);
  const Array& bv = t.val(b);
  if (av.rows() != bv.rows())
    throw std::invalid_argument("concat_cols: row mismatch " + av.shape_str() + " vs " +
                                bv.shape_str());
  Array out(av.rows(), av.cols() + bv.cols(), 0.0);
  for (int r = 0; r < av.rows(); ++r) {
    for (int c = 0; c < av.cols(); ++c) out.at(r, c) = av.at(r, c);
    for (int c = 0; c < bv.cols(); ++c) out.at(r, av.cols() + c) = bv.at(r, c);
  }
  int ac = av.cols();
  return make_op(t, std::move(out), [a_id = a.id, b_id = b.id, ac](Tape& tp, int o_id) {
    const Array& g = tp.node(o_id).grad;
    Array& ga = tp.node(a_id).grad;
    Array& gb = tp.node(b_id).grad;
    for (int r = 0; r < g.rows(); ++r) {
      for (int c = 0; c < ac; ++c) ga.at(r, c) += g.at(r, c);
      for (int c = ac; c < g.cols(); ++c) gb.at(r, c - ac) += g.at(r, c);
    }
  });
}

Value slice_cols(Value a, int c0, int c1) {
  Tape& t = *a.tape;
  const Array& av = t.val(a);
  if (c0 < 0 || c1 > av.cols() || c0 >= c1)
    throw std::invalid_argument("slice_cols: bad range [" + std::to_string(c0) + "," +
                                std::to_string(c1) + ") for " + av.shape_str());
  Array out(av.rows(), c1 - c0, 0.0);
  for (int r = 0; r < av.rows(); ++r)
    for (int c = c0; c < c1; ++c) out.at(r, c - c0) = av.at(r, c);
  return make_op(t, std::move(out), [a_id = a.id, c0](Tape& tp, int o_id) {
    const Array& g = tp.node(o_id).grad;
    Array& ga = tp.node(a_id).grad;
    for (int r = 0; r < g.rows(); ++r)
      for (int c = 0; c < g.cols(); ++c) ga.at(r, c0 + c) += g.at(r, c);
  });
}

Value row(Value a, int r) {
  Tape& t = *a.tape;
  const Array& av = t.val(a);
  if (r < 0 || r >= av.rows())
    throw std::invalid_argument("row: index " + std::to_string(r) + " out of range for " +
                                av.shape_str());
  Array out(1, av.cols(), 0.0);
  for (int c = 0; c < av.cols(); ++c) out.at(0, c) = av.at(r, c);
  return make_op(t, std::move(out), [a_id = a.id, r](Tape& tp, int o_id) {
    const Array& g = tp.node(o_id).grad;
    Array& ga = tp.node(a_id).grad;
    for (int c = 0; c < g.cols(); ++c) ga.at(r, c) += g.at(0, c);
  });
}

Value tanh_(Value a) {
  Tape& t = *a.tape;
  Array out = t.val(a);
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(out[i]);
  return make_op(t, std::move(out), [a_id = a.id](Tape& tp, int o_id) {
    const Array& g = tp.node(o_id).grad;
    const Array& y = tp.node(o_id).val;
    Array& ga = tp.node(a_id).grad;
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

Value sigmoid_(Value a) {
  Tape& t = *a.tape;
  Array out = t.val(a);
  for (size_t i = 0; i < out.size(); ++i) {
    double x = out[i];
    out[i] = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  return make_op(t, std::move(out), [a_id = a.id](Tape& tp, int o_id) {
    const Array& g = tp.node(o_id).grad;
    const Array& y = tp.node(o_id).val;
    Array& ga = tp.node(a_id).grad;
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Value softmax_rows(Value a) {
  Tape& t = *a.tape;
  const Array& av = t.val(a);
  Array out(av.rows(), av.cols(), 0.0);
  for (int r = 0; r < av.rows(); ++r) {
    double m = av.at(r, 0);
    for (int c = 1; c < av.cols(); ++c) m = std::max(m, av.at(r, c));
    double z = 0.0;
    for (int c = 0; c < av.cols(); ++c) {
      out.at(r, c) = std::exp(av.at(r, c) - m);
      z += out.at(r, c);
    }
    for (int c = 0; c < av.cols(); ++c) out.at(r, c) /= z;
  }
  return make_op(t, std::move(out), [a_id = a.id](Tape& tp, int o_id) {
    const Array& g = tp.node(o_id).grad;
    const Array& y = tp.node(o_id).val;
    Array& ga = tp.node(a_id).grad;
    for (int r = 0; r < g.rows(); ++r) {
      double dot = 0.0;
      for (int c = 0; c < g.cols(); ++c) dot += g.at(r, c) * y.at(r, c);
      for (int c = 0; c < g.cols(); ++c) ga.at(r, c) += y.at(r, c) * (g.at(r, c) - dot);
    }
  });
}

Value log_(Value a) {
  Tape& t = *a.tape;
  Array out = t.val(a);
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::log(out[i]);
  return make_op(t, std::move(out), [a_id = a.id](Tape& tp, int o_id) {
    const Array& g = tp.node(o_id).grad;
    const Array& x = tp.node(a_id).val;
    Array& ga = tp.node(a_id).grad;
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
  });
}

Value inv(Value a) {
  Tape& t = *a.tape;
  Array out = t.val(a);
  for (size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / out[i];
  return make_op(t, std::move(out), [a_id = a.id](Tape& tp, int o_id) {
    const Array& g = tp.node(o_id).grad;
    const Array& y = tp.node(o_id).val;
    Array& ga = tp.node(a_id).grad;
    for (size_t i = 0; i < g.size(); ++i) ga[i] -= g[i] * y[i] * y[i];
  });
}

Value sum_all(Value a) {
  Tape& t = *a.tape;
  const Array& av = t.val(a);
  double s = 0.0;
  for (size_t i = 0; i < av.size(); ++i) s += av[i];
  return make_op(t, Array::scalar(s), [a_id = a.id](Tape& tp, int o_id) {
    double g = tp.node(o_id).grad[0];
    Array& ga = tp.node(a_id).grad;
    for (size_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
}

Value mean_all(Value a) {
  Tape& t = *a.tape;
  size_t n = t.val(a).size();
  return scale(sum_all(a), 1.0 / static_cast<double>(n));
}

Value embedding_lookup(Value table, const std::vector<int>& ids) {
  Tape& t = *table.tape;
  const Array& tv = t.val(table);
  if (ids.empty()) throw std::invalid_argument("embedding_lookup: empty id sequence");
  Array out(static_cast<int>(ids.size()), tv.cols(), 0.0);
  for (size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || ids[r] >= tv.rows())
      throw std::out_of_range("embedding_lookup: id " + std::to_string(ids[r]) +
                              " out of range [0," + std::to_string(tv.rows()) + ")");
    for (int c = 0; c < tv.cols(); ++c) out.at(static_cast<int>(r), c) = tv.at(ids[r], c);
  }
  return make_op(t, std::move(out), [t_id = table.id, ids](Tape& tp, int o_id) {
    const Array& g = tp.node(o_id).grad;
    Array& gt = tp.node(t_id).grad;
    for (size_t r = 0; r < ids.size(); ++r)
      for (int c = 0; c < g.cols(); ++c) gt.at(ids[r], c) += g.at(static_cast<int>(r), c);
  });
}

Value layer_norm(Value x, Value gain, Value bias, double eps) {
  check_same_tape(x, gain, "layer_norm");
  check_same_tape(x, bias, "layer_norm");
  Tape& t = *x.tape;
  const Array& xv = t.val(x);
  const Array& gv = t.val(gain);
  const Array& bv = t.val(bias);
  if (gv.rows() != 1 || gv.cols() != xv.cols() || bv.rows() != 1 || bv.cols() != xv.cols())
    throw std::invalid_argument("layer_norm: gain/bias must be 1x" + std::to_string(xv.cols()));
  const int R = xv.rows(), C = xv.cols();
  Array out(R, C, 0.0);
  Array xhat(R, C, 0.0);
  std::vector<double> inv_std(R);
  for (int r = 0; r < R; ++r) {
    double mu = 0.0;
    for (int c = 0; c < C; ++c) mu += xv.at(r, c);
    mu /= C;
    double var = 0.0;
    for (int c = 0; c < C; ++c) {
      double d = xv.at(r, c) - mu;
      var += d * d;
    }
    var /= C;
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (int c = 0; c < C; ++c) {
      xhat.at(r, c) = (xv.at(r, c) - mu) * inv_std[r];
      out.at(r, c) = xhat.at(r, c) * gv.at(0, c) + bv.at(0, c);
    }
  }
  return make_op(t, std::move(out),
                 [x_id = x.id, g_id = gain.id, b_id = bias.id, xhat = std::move(xhat),
                  inv_std = std::move(inv_std), R, C](Tape& tp, int o_id) {
                   const Array& g = tp.node(o_id).grad;
                   const Array& gv = tp.node(g_id).val;
                   Array& gx = tp.node(x_id).grad;
                   Array& gg = tp.node(g_id).grad;
                   Array& gb = tp.node(b_id).grad;
                   for (int r = 0; r < R; ++r) {
                     double sum_dy = 0.0, sum_dy_xhat = 0.0;
                     for (int c = 0; c < C; ++c) {
                       double dy = g.at(r, c) * gv.at(0, c);
                       sum_dy += dy;
                       sum_dy_xhat += dy * xhat.at(r, c);
                       gg.at(0, c) += g.at(r, c) * xhat.at(r, c);
                       gb.at(0, c) += g.at(r, c);
                     }
                     for (int c = 0; c < C; ++c) {
                       double dy = g.at(r, c) * gv.at(0, c);
                       gx.at(r, c) += inv_std[r] *
                                      (dy - sum_dy / C - xhat.at(r, c) * sum_dy_xhat / C);
                     }
                   }
                 });
}

Value dropout(Value x, double rate, RngStream& rng, bool train) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate outside [0,1)");
  Tape& t = *x.tape;
  if (!train || rate == 0.0) return x;  // identity at eval time
  const Array& xv = t.val(x);
  Array out = xv;
  std::vector<double> mask(xv.size());
  double keep_scale = 1.0 / (1.0 - rate);
  for (size_t i = 0; i < out.size(); ++i) {
    mask[i] = rng.bernoulli(rate) ? 0.0 : keep_scale;
    out[i] *= mask[i];
  }
  return make_op(t, std::move(out), [x_id = x.id, mask = std::move(mask)](Tape& tp, int o_id) {
    const Array& g = tp.node(o_id).grad;
    Array& gx = tp.node(x_id).grad;
    for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
  });
}

Value cross_entropy_with_logits(Value logits, int target) {
  Tape& t = *logits.tape;
  const Array& lv = t.val(logits);
  if (lv.rows() != 1) throw std::invalid_argument("cross_entropy_with_logits: logits must be 1xC");
  if (target < 0 || target >= lv.cols())
    throw std::out_of_range("cross_entropy_with_logits: target " + std::to_string(target) +
                            " out of range for C=" + std::to_string(lv.cols()));
  const int C = lv.cols();
  double m = lv.at(0, 0);
  for (int c = 1; c < C; ++c) m = std::max(m, lv.at(0, c));
  double z = 0.0;
  std::vector<double> p(C);
  for (int c = 0; c < C; ++c) {
    p[c] = std::exp(lv.at(0, c) - m);
    z += p[c];
  }
  for (int c = 0; c < C; ++c) p[c] /= z;
  double nll = -(lv.at(0, target) - m - std::log(z));
  return make_op(t, Array::scalar(nll),
                 [l_id = logits.id, target, p = std::move(p)](Tape& tp, int o_id) {
                   double g = tp.node(o_id).grad[0];
                   Array& gl = tp.node(l_id).grad;
                   for (int c = 0; c < gl.cols(); ++c)
                     gl.at(0, c) += g * (p[c] - (c == target ? 1.0 : 0.0));
                 });
}

GradCheckReport grad_check(
    const std::function<double(const std::map<std::string, Array>&)>& f,
    const std::function<std::map<std::string, Array>(const std::map<std::string, Array>&)>& grad_fn,
    const std::map<std::string, Array>& params, double step, double tol) {
  GradCheckReport report;
  std::map<std::string, Array> analytic = grad_fn(params);
  std::map<std::string, Array> work = params;
  for (const auto& [name, arr] : params) {
    const Array& ga = analytic.at(name);
    double max_rel = 0.0;
    for (size_t i = 0; i < arr.size(); ++i) {
      double orig = work.at(name)[i];
      work.at(name)[i] = orig + step;
      double fp = f(work);
      work.at(name)[i] = orig - step;
      double fm = f(work);
      work.at(name)[i] = orig;
      double num = (fp - fm) / (2.0 * step);
      double ana = ga[i];
      double err = std::fabs(num - ana);
      // absolute floor: central differences carry ~eps/step cancellation noise,
      // which would dominate the relative error on near-zero gradients
      if (err < 1e-7) continue;
      double denom = std::max({std::fabs(num), std::fabs(ana), 1e-8});
      max_rel = std::max(max_rel, err / denom);
    }
    bool pass = max_rel < tol;
    report.entries.push_back({name, max_rel, pass});
    report.max_rel_err = std::max(report.max_rel_err, max_rel);
    report.pass = report.pass && pass;
  }
  return report;
}

}  // namespace ponder::ad
