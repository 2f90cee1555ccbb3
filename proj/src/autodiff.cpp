#include "qkt/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "qkt/error.hpp"

namespace qkt::ad {

// ---------------------------------------------------------------------------
// Var / BackwardContext

Tape& Var::tape() const {
  if (tape_ == nullptr) throw ContractError("use of an unbound Var");
  return *tape_;
}

const Tensor& Var::value() const { return tape().value(*this); }

std::span<const double> BackwardContext::grad_out() const {
  const auto& node = tape_.nodes_[node_];
  if (!node.sink.empty()) return node.sink;
  return node.grad;
}

const Tensor& BackwardContext::output() const { return tape_.nodes_[node_].value(); }

const Tensor& BackwardContext::input(std::size_t i) const {
  return tape_.nodes_[tape_.nodes_[node_].inputs.at(i)].value();
}

std::span<double> BackwardContext::input_grad(std::size_t i) const {
  return tape_.grad_target(tape_.nodes_[node_].inputs.at(i));
}

// ---------------------------------------------------------------------------
// Tape

Var Tape::constant(Tensor value) {
  Node node;
  node.owned = std::move(value);
  node.op = "constant";
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant_ref(const Tensor& value) {
  Node node;
  node.external = &value;
  node.op = "constant";
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::leaf(Tensor& param) {
  if (!param.requires_grad()) return constant_ref(param);
  return leaf(param, param.mutable_grad());
}

Var Tape::leaf(const Tensor& value, std::span<double> grad_sink) {
  if (grad_sink.size() != value.numel()) {
    throw DimensionError("gradient sink of size " + std::to_string(grad_sink.size()) +
                         " for leaf of shape " + shape_string(value.shape()));
  }
  Node node;
  node.external = &value;
  node.requires_grad = true;
  node.sink = grad_sink;
  node.op = "leaf";
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardRule rule, const char* op) {
  if (consumed_) throw ContractError("tape already consumed by backward(); start a new forward pass");
  Node node;
  node.owned = std::move(value);
  node.op = op;
  node.inputs.reserve(inputs.size());
  for (const Var& v : inputs) {
    check_owner(v);
    node.inputs.push_back(v.id());
    node.requires_grad = node.requires_grad || nodes_[v.id()].requires_grad;
  }
  if (node.requires_grad) {
    if (!rule) throw ContractError(std::string("operation '") + op + "' has no gradient rule");
    node.rule = std::move(rule);
  }
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Tape::check_owner(Var v) const {
  if (!v.valid() || &v.tape() != this || v.id() >= nodes_.size()) {
    throw ContractError("Var does not belong to this tape");
  }
}

const Tensor& Tape::value(Var v) const {
  check_owner(v);
  return nodes_[v.id()].value();
}

bool Tape::requires_grad(Var v) const {
  check_owner(v);
  return nodes_[v.id()].requires_grad;
}

std::span<const double> Tape::grad(Var v) const {
  check_owner(v);
  const Node& node = nodes_[v.id()];
  if (!node.sink.empty()) return node.sink;
  return node.grad;
}

const char* Tape::op_name(Var v) const {
  check_owner(v);
  return nodes_[v.id()].op;
}

std::span<double> Tape::grad_target(std::size_t id) {
  Node& node = nodes_[id];
  if (!node.requires_grad) return {};
  if (!node.sink.empty()) return node.sink;
  if (node.grad.empty()) node.grad.assign(node.value().numel(), 0.0);
  return node.grad;
}

void Tape::backward(Var loss) {
  check_owner(loss);
  if (consumed_) throw ContractError("stale graph: backward() already ran on this tape");
  const Tensor& out = nodes_[loss.id()].value();
  if (out.numel() != 1) {
    throw DimensionError("backward() needs a scalar loss, got shape " + shape_string(out.shape()));
  }
  consumed_ = true;
  if (!nodes_[loss.id()].requires_grad) return;
  grad_target(loss.id())[0] += 1.0;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.rule || node.grad.empty()) continue;
    node.rule(BackwardContext(*this, id));
  }
}

// ---------------------------------------------------------------------------
// Operations

namespace {

[[noreturn]] void mismatch(const char* op, const Tensor& a, const Tensor& b) {
  throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                       shape_string(b.shape()));
}

Tape& common_tape(Var a, Var b) {
  Tape& t = a.tape();
  if (&b.tape() != &t) throw ContractError("operands recorded on different tapes");
  return t;
}

double stable_sigmoid(double x) {
  // Clamped so the result is strictly inside (0, 1) even when exp saturates.
  constexpr double lo = std::numeric_limits<double>::min();
  constexpr double hi = 1.0 - 0x1.0p-53;
  double y;
  if (x >= 0) {
    y = 1.0 / (1.0 + std::exp(-x));
  } else {
    const double e = std::exp(x);
    y = e / (1.0 + e);
  }
  return std::clamp(y, lo, hi);
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& tape = common_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  if (B.rows() != k) mismatch("matmul", A, B);
  std::vector<double> c(m * n, 0.0);
  const auto av = A.values();
  const auto bv = B.values();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  return tape.record(Tensor({m, n}, std::move(c)), {a, b},
                     [m, k, n](const BackwardContext& ctx) {
                       const auto g = ctx.grad_out();
                       const auto av = ctx.input(0).values();
                       const auto bv = ctx.input(1).values();
                       if (auto ga = ctx.input_grad(0); !ga.empty()) {
                         // dA = dC * B^T
                         for (std::size_t i = 0; i < m; ++i) {
                           for (std::size_t p = 0; p < k; ++p) {
                             double acc = 0.0;
                             const double* brow = bv.data() + p * n;
                             const double* grow = g.data() + i * n;
                             for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                             ga[i * k + p] += acc;
                           }
                         }
                       }
                       if (auto gb = ctx.input_grad(1); !gb.empty()) {
                         // dB = A^T * dC
                         for (std::size_t i = 0; i < m; ++i) {
                           const double* grow = g.data() + i * n;
                           for (std::size_t p = 0; p < k; ++p) {
                             const double aip = av[i * k + p];
                             double* gbrow = gb.data() + p * n;
                             for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
                           }
                         }
                       }
                     },
                     "matmul");
}

Var elementwise(Elementwise op, Var a, Var b) {
  Tape& tape = common_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (!A.same_layout(B)) mismatch("elementwise", A, B);
  const auto av = A.values();
  const auto bv = B.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    switch (op) {
      case Elementwise::add: out[i] = av[i] + bv[i]; break;
      case Elementwise::sub: out[i] = av[i] - bv[i]; break;
      case Elementwise::mul: out[i] = av[i] * bv[i]; break;
    }
  }
  const char* name = op == Elementwise::add ? "add" : op == Elementwise::sub ? "sub" : "mul";
  return tape.record(Tensor(A.shape(), std::move(out)), {a, b},
                     [op](const BackwardContext& ctx) {
                       const auto g = ctx.grad_out();
                       const auto av = ctx.input(0).values();
                       const auto bv = ctx.input(1).values();
                       auto ga = ctx.input_grad(0);
                       auto gb = ctx.input_grad(1);
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         switch (op) {
                           case Elementwise::add:
                             if (!ga.empty()) ga[i] += g[i];
                             if (!gb.empty()) gb[i] += g[i];
                             break;
                           case Elementwise::sub:
                             if (!ga.empty()) ga[i] += g[i];
                             if (!gb.empty()) gb[i] -= g[i];
                             break;
                           case Elementwise::mul:
                             if (!ga.empty()) ga[i] += g[i] * bv[i];
                             if (!gb.empty()) gb[i] += g[i] * av[i];
                             break;
                         }
                       }
                     },
                     name);
}

Var add(Var a, Var b) { return elementwise(Elementwise::add, a, b); }
Var sub(Var a, Var b) { return elementwise(Elementwise::sub, a, b); }
Var mul(Var a, Var b) { return elementwise(Elementwise::mul, a, b); }

Var add_row(Var x, Var row) {
  Tape& tape = common_tape(x, row);
  const Tensor& X = x.value();
  const Tensor& R = row.value();
  const std::size_t m = X.rows(), n = X.cols();
  if (R.numel() != n) mismatch("add_row", X, R);
  std::vector<double> out(X.values().begin(), X.values().end());
  const auto rv = R.values();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += rv[j];
  }
  return tape.record(Tensor(X.shape(), std::move(out)), {x, row},
                     [m, n](const BackwardContext& ctx) {
                       const auto g = ctx.grad_out();
                       if (auto gx = ctx.input_grad(0); !gx.empty()) {
                         for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                       }
                       if (auto gr = ctx.input_grad(1); !gr.empty()) {
                         for (std::size_t i = 0; i < m; ++i) {
                           for (std::size_t j = 0; j < n; ++j) gr[j] += g[i * n + j];
                         }
                       }
                     },
                     "add_row");
}

Var affine(Var x, double scale, double shift) {
  const Tensor& X = x.value();
  std::vector<double> out(X.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * X[i] + shift;
  return x.tape().record(Tensor(X.shape(), std::move(out)), {x},
                         [scale](const BackwardContext& ctx) {
                           const auto g = ctx.grad_out();
                           auto gx = ctx.input_grad(0);
                           for (std::size_t i = 0; i < g.size(); ++i) gx[i] += scale * g[i];
                         },
                         "affine");
}

Var negate(Var x) { return affine(x, -1.0, 0.0); }

Var activation(Activation kind, Var x) {
  const Tensor& X = x.value();
  std::vector<double> out(X.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    switch (kind) {
      case Activation::sigmoid: out[i] = stable_sigmoid(X[i]); break;
      case Activation::tanh: out[i] = std::tanh(X[i]); break;
      case Activation::relu: out[i] = X[i] > 0.0 ? X[i] : 0.0; break;
    }
  }
  const char* name = kind == Activation::sigmoid ? "sigmoid" : kind == Activation::tanh ? "tanh" : "relu";
  return x.tape().record(Tensor(X.shape(), std::move(out)), {x},
                         [kind](const BackwardContext& ctx) {
                           const auto g = ctx.grad_out();
                           const auto y = ctx.output().values();
                           const auto xv = ctx.input(0).values();
                           auto gx = ctx.input_grad(0);
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             switch (kind) {
                               case Activation::sigmoid: gx[i] += g[i] * y[i] * (1.0 - y[i]); break;
                               case Activation::tanh: gx[i] += g[i] * (1.0 - y[i] * y[i]); break;
                               case Activation::relu:
                                 if (xv[i] > 0.0) gx[i] += g[i];
                                 break;
                             }
                           }
                         },
                         name);
}

Var sigmoid(Var x) { return activation(Activation::sigmoid, x); }
Var tanh(Var x) { return activation(Activation::tanh, x); }
Var relu(Var x) { return activation(Activation::relu, x); }

namespace {

Var softmax_impl(Var x, std::span<const std::uint8_t> mask) {
  const Tensor& X = x.value();
  const std::size_t m = X.rows(), n = X.cols();
  const bool masked = !mask.empty();
  if (masked && mask.size() != X.numel()) {
    throw DimensionError("softmax_rows: mask of " + std::to_string(mask.size()) + " entries for shape " +
                         shape_string(X.shape()));
  }
  Mask keep(mask.begin(), mask.end());
  std::vector<double> out(X.numel(), 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double row_max = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (masked && !keep[i * n + j]) continue;
      row_max = std::max(row_max, X[i * n + j]);
      any = true;
    }
    if (!any) throw NumericError("softmax_rows: row " + std::to_string(i) + " is fully masked");
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (masked && !keep[i * n + j]) continue;
      out[i * n + j] = std::exp(X[i * n + j] - row_max);
      total += out[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= total;
  }
  return x.tape().record(Tensor(X.shape(), std::move(out)), {x},
                         [m, n](const BackwardContext& ctx) {
                           // Masked outputs are exactly 0, so they drop out of both terms.
                           const auto g = ctx.grad_out();
                           const auto y = ctx.output().values();
                           auto gx = ctx.input_grad(0);
                           for (std::size_t i = 0; i < m; ++i) {
                             double dot = 0.0;
                             for (std::size_t j = 0; j < n; ++j) dot += y[i * n + j] * g[i * n + j];
                             for (std::size_t j = 0; j < n; ++j) {
                               gx[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
                             }
                           }
                         },
                         "softmax_rows");
}

}  // namespace

Var softmax_rows(Var x) { return softmax_impl(x, {}); }

Var softmax_rows(Var x, std::span<const std::uint8_t> mask) {
  if (mask.empty()) throw DimensionError("softmax_rows: empty mask");
  return softmax_impl(x, mask);
}

Var concat(Var a, Var b, std::size_t axis) {
  Tape& tape = common_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (axis > 1) throw DimensionError("concat: axis must be 0 or 1");
  if (A.numel() == 0 || B.numel() == 0) {
    const bool keep_a = B.numel() == 0;
    const Tensor& src = keep_a ? A : B;
    const std::size_t which = keep_a ? 0 : 1;
    return tape.record(Tensor(src.shape(), std::vector<double>(src.values().begin(), src.values().end())),
                       {a, b},
                       [which](const BackwardContext& ctx) {
                         const auto g = ctx.grad_out();
                         auto gi = ctx.input_grad(which);
                         if (gi.empty()) return;
                         for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
                       },
                       "concat");
  }

  Shape shape;
  std::vector<double> out;
  out.reserve(A.numel() + B.numel());
  // Row-major layouts: joining rows (or two vectors) is an append; joining
  // columns interleaves row by row.
  const bool append = (A.rank() == 1 && B.rank() == 1) || axis == 0;
  if (A.rank() == 1 && B.rank() == 1) {
    if (axis != 0) throw DimensionError("concat: rank-1 operands only join along axis 0");
    shape = {A.numel() + B.numel()};
  } else if (axis == 0) {
    if (A.cols() != B.cols()) mismatch("concat(axis=0)", A, B);
    shape = {A.rows() + B.rows(), A.cols()};
  } else {
    if (A.rows() != B.rows()) mismatch("concat(axis=1)", A, B);
    shape = {A.rows(), A.cols() + B.cols()};
  }
  const std::size_t rows = A.rows(), ca = A.cols(), cb = B.cols();
  if (append) {
    out.insert(out.end(), A.values().begin(), A.values().end());
    out.insert(out.end(), B.values().begin(), B.values().end());
  } else {
    for (std::size_t i = 0; i < rows; ++i) {
      out.insert(out.end(), A.values().begin() + i * ca, A.values().begin() + (i + 1) * ca);
      out.insert(out.end(), B.values().begin() + i * cb, B.values().begin() + (i + 1) * cb);
    }
  }
  const std::size_t na = A.numel();
  return tape.record(Tensor(std::move(shape), std::move(out)), {a, b},
                     [append, rows, ca, cb, na](const BackwardContext& ctx) {
                       const auto g = ctx.grad_out();
                       auto ga = ctx.input_grad(0);
                       auto gb = ctx.input_grad(1);
                       if (append) {
                         if (!ga.empty()) for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
                         if (!gb.empty()) for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[na + i];
                         return;
                       }
                       const std::size_t w = ca + cb;
                       for (std::size_t i = 0; i < rows; ++i) {
                         if (!ga.empty()) for (std::size_t j = 0; j < ca; ++j) ga[i * ca + j] += g[i * w + j];
                         if (!gb.empty()) for (std::size_t j = 0; j < cb; ++j) gb[i * cb + j] += g[i * w + ca + j];
                       }
                     },
                     "concat");
}

Var stack_rows(std::span<const Var> rows) {
  if (rows.empty()) throw DimensionError("stack_rows: no operands");
  Tape& tape = rows.front().tape();
  const std::size_t d = rows.front().value().numel();
  std::vector<double> out;
  out.reserve(rows.size() * d);
  for (const Var& r : rows) {
    if (&r.tape() != &tape) throw ContractError("operands recorded on different tapes");
    if (r.value().numel() != d) mismatch("stack_rows", rows.front().value(), r.value());
    out.insert(out.end(), r.value().values().begin(), r.value().values().end());
  }
  const std::size_t n = rows.size();
  return tape.record(Tensor({n, d}, std::move(out)), std::vector<Var>(rows.begin(), rows.end()),
                     [n, d](const BackwardContext& ctx) {
                       const auto g = ctx.grad_out();
                       for (std::size_t i = 0; i < n; ++i) {
                         auto gi = ctx.input_grad(i);
                         if (gi.empty()) continue;
                         for (std::size_t c = 0; c < d; ++c) gi[c] += g[i * d + c];
                       }
                     },
                     "stack_rows");
}

Var masked_mean(Var x, std::span<const std::uint8_t> mask) {
  const Tensor& X = x.value();
  const std::size_t n = X.rows(), d = X.cols();
  if (mask.size() != n) {
    throw DimensionError("masked_mean: mask of " + std::to_string(mask.size()) + " entries for shape " +
                         shape_string(X.shape()));
  }
  Mask keep(mask.begin(), mask.end());
  std::size_t count = 0;
  for (auto k : keep) count += k != 0;
  if (count == 0) throw NumericError("masked_mean: every row is masked");
  std::vector<double> out(d, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    if (!keep[r]) continue;
    for (std::size_t c = 0; c < d; ++c) out[c] += X[r * d + c];
  }
  const double inv = 1.0 / static_cast<double>(count);
  for (double& v : out) v *= inv;
  return x.tape().record(Tensor({d}, std::move(out)), {x},
                         [keep = std::move(keep), d, inv](const BackwardContext& ctx) {
                           const auto g = ctx.grad_out();
                           auto gx = ctx.input_grad(0);
                           for (std::size_t r = 0; r < keep.size(); ++r) {
                             if (!keep[r]) continue;
                             for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += g[c] * inv;
                           }
                         },
                         "masked_mean");
}

Var gather_rows(Var x, std::span<const std::size_t> rows) {
  const Tensor& X = x.value();
  const std::size_t n = X.rows(), d = X.cols();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  std::vector<double> out;
  out.reserve(idx.size() * d);
  for (std::size_t r : idx) {
    if (r >= n) {
      throw DimensionError("gather_rows: row " + std::to_string(r) + " out of range for shape " +
                           shape_string(X.shape()));
    }
    out.insert(out.end(), X.values().begin() + r * d, X.values().begin() + (r + 1) * d);
  }
  const std::size_t k = idx.size();
  return x.tape().record(Tensor({k, d}, std::move(out)), {x},
                         [idx = std::move(idx), d](const BackwardContext& ctx) {
                           const auto g = ctx.grad_out();
                           auto gx = ctx.input_grad(0);
                           for (std::size_t i = 0; i < idx.size(); ++i) {
                             for (std::size_t c = 0; c < d; ++c) gx[idx[i] * d + c] += g[i * d + c];
                           }
                         },
                         "gather_rows");
}

Var transpose(Var x) {
  const Tensor& X = x.value();
  const std::size_t m = X.rows(), n = X.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = X[i * n + j];
  }
  return x.tape().record(Tensor({n, m}, std::move(out)), {x},
                         [m, n](const BackwardContext& ctx) {
                           const auto g = ctx.grad_out();
                           auto gx = ctx.input_grad(0);
                           for (std::size_t i = 0; i < m; ++i) {
                             for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j * m + i];
                           }
                         },
                         "transpose");
}

Var sum(Var x) {
  const Tensor& X = x.value();
  double total = 0.0;
  for (double v : X.values()) total += v;
  return x.tape().record(Tensor({1}, {total}), {x},
                         [](const BackwardContext& ctx) {
                           const double g = ctx.grad_out()[0];
                           for (double& gx : ctx.input_grad(0)) gx += g;
                         },
                         "sum");
}

Var sum_squares(Var x) {
  const Tensor& X = x.value();
  double total = 0.0;
  for (double v : X.values()) total += v * v;
  return x.tape().record(Tensor({1}, {total}), {x},
                         [](const BackwardContext& ctx) {
                           const double g = ctx.grad_out()[0];
                           const auto xv = ctx.input(0).values();
                           auto gx = ctx.input_grad(0);
                           for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += 2.0 * g * xv[i];
                         },
                         "sum_squares");
}

Var binary_cross_entropy(Var y, std::span<const double> labels) {
  const Tensor& Y = y.value();
  if (labels.size() != Y.numel()) {
    throw DimensionError("binary_cross_entropy: " + std::to_string(labels.size()) + " labels for predictions " +
                         shape_string(Y.shape()));
  }
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double p = Y[i];
    if (!(p > 0.0 && p < 1.0)) {
      throw NumericError("binary_cross_entropy: prediction " + std::to_string(i) + " = " + std::to_string(p) +
                         " is outside (0, 1)");
    }
    total -= labels[i] * std::log(p) + (1.0 - labels[i]) * std::log1p(-p);
  }
  std::vector<double> a(labels.begin(), labels.end());
  return y.tape().record(Tensor({1}, {total}), {y},
                         [a = std::move(a)](const BackwardContext& ctx) {
                           const double g = ctx.grad_out()[0];
                           const auto yv = ctx.input(0).values();
                           auto gy = ctx.input_grad(0);
                           for (std::size_t i = 0; i < a.size(); ++i) {
                             gy[i] += g * (-a[i] / yv[i] + (1.0 - a[i]) / (1.0 - yv[i]));
                           }
                         },
                         "binary_cross_entropy");
}

}  // namespace qkt::ad
