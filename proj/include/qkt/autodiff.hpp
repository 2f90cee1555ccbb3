#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "qkt/tensor.hpp"

namespace qkt::ad {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
// owning tape is alive.
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape& tape() const;
  std::size_t id() const noexcept { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// What a gradient rule sees when it runs during backward().
class BackwardContext {
 public:
  std::span<const double> grad_out() const;
  const Tensor& output() const;
  const Tensor& input(std::size_t i) const;
  // Accumulation target for input i; empty when that input does not need a gradient.
  std::span<double> input_grad(std::size_t i) const;

 private:
  friend class Tape;
  BackwardContext(Tape& tape, std::size_t node) : tape_(tape), node_(node) {}

  Tape& tape_;
  std::size_t node_;
};

using BackwardRule = std::function<void(const BackwardContext&)>;

// Records the operations of one forward pass in execution order, which is a
// topological order by construction. backward() walks the record once in
// reverse; afterwards the tape is spent and rejects a second backward().
//
// A tape is confined to one thread. Leaves reference caller-owned tensors,
// which must outlive the tape.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Value that never receives a gradient.
  Var constant(Tensor value);
  // Parameter leaf. When param.requires_grad(), gradients are accumulated into
  // param's own grad buffer (allocated here if missing).
  Var leaf(Tensor& param);
  // Leaf whose gradient is accumulated into an external buffer of equal size.
  Var leaf(const Tensor& value, std::span<double> grad_sink);
  // Non-differentiable view of a caller-owned tensor.
  Var constant_ref(const Tensor& value);

  // Extension point for new operations. `rule` may be empty for values that
  // do not need gradients.
  Var record(Tensor value, std::vector<Var> inputs, BackwardRule rule, const char* op);

  void backward(Var loss);

  bool consumed() const noexcept { return consumed_; }
  std::size_t size() const noexcept { return nodes_.size(); }
  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  // Gradient of v after backward(); empty if v received none.
  std::span<const double> grad(Var v) const;
  const char* op_name(Var v) const;

 private:
  friend class BackwardContext;
  friend class Var;

  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    std::vector<std::size_t> inputs;
    BackwardRule rule;
    bool requires_grad = false;
    std::vector<double> grad;
    std::span<double> sink;
    const char* op = "";

    const Tensor& value() const { return external != nullptr ? *external : owned; }
  };

  std::span<double> grad_target(std::size_t id);
  void check_owner(Var v) const;

  std::deque<Node> nodes_;
  bool consumed_ = false;
};

using Mask = std::vector<std::uint8_t>;

enum class Elementwise { add, sub, mul };
enum class Activation { sigmoid, tanh, relu };

// [m x k] * [k x n] -> [m x n]
Var matmul(Var a, Var b);
// Same-layout element-by-element operation. No implicit broadcasting.
Var elementwise(Elementwise op, Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
// Explicit broadcast mode: adds a length-n row to every row of an [m x n] matrix.
Var add_row(Var x, Var row);
Var negate(Var x);
// scale * x + shift, element-wise.
Var affine(Var x, double scale, double shift);

Var activation(Activation kind, Var x);
Var sigmoid(Var x);
Var tanh(Var x);
Var relu(Var x);

// Row-wise softmax, stabilised by subtracting each row's maximum. With a mask
// (row-major, one entry per element) masked entries are exactly 0 and their
// inputs are never read.
Var softmax_rows(Var x);
Var softmax_rows(Var x, std::span<const std::uint8_t> mask);

// axis 0 stacks rows, axis 1 joins columns. Two rank-1 operands are joined
// end to end. An operand with no elements is the identity.
Var concat(Var a, Var b, std::size_t axis);

// Stacks n operands of equal element count d into an [n x d] matrix.
Var stack_rows(std::span<const Var> rows);

// Mean over the rows of an [n x d] matrix whose mask entry is set; returns {d}.
Var masked_mean(Var x, std::span<const std::uint8_t> mask);

// Selects (and may repeat) rows; the gradient scatter-adds back.
Var gather_rows(Var x, std::span<const std::size_t> rows);
Var transpose(Var x);

// Scalar {1} reductions.
Var sum(Var x);
Var sum_squares(Var x);
// -sum(a log y + (1 - a) log(1 - y)); every y must lie strictly inside (0, 1).
Var binary_cross_entropy(Var y, std::span<const double> labels);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

}  // namespace qkt::ad
