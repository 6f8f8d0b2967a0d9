#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rala/linalg.hpp"
#include "rala/matrix.hpp"

// Reverse-mode automatic differentiation over a closed set of matrix operations.
//
// A Tape records nodes in creation order, so every input id precedes its consumer and
// the graph is acyclic by construction. Each operation's forward value is produced by
// evaluate(), which is also what Tape::replay_matches() calls, so replay is bit-exact.
namespace rala::ad {

enum class Op {
  leaf,
  constant,
  matmul,
  transpose,
  add,
  sub,
  scale,
  hadamard,
  add_bias,
  scale_rows,
  div_rows,
  softmax_rows,
  kernel_elu1,
  relu,
  tanh,
  gelu,
  mean_rows,
  layer_norm,
  slice_cols,
  concat_cols,
  depthwise_conv3x3,
  im2col3x3,
  cross_entropy,
};

std::string_view op_name(Op op) noexcept;

struct Attrs {
  double scalar = 0.0;
  std::size_t a = 0;  // height / slice begin
  std::size_t b = 0;  // width / slice count
  std::size_t c = 0;  // stride
  std::vector<std::size_t> labels;
};

struct Node {
  Op op = Op::leaf;
  std::vector<std::size_t> inputs;
  Attrs attrs;
  Matrix value;
};

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  std::size_t id() const noexcept { return id_; }
  Tape* tape() const noexcept { return tape_; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Differentiable input. Gradients are returned per leaf in creation order.
  Var leaf(Matrix value);
  // Non-differentiable input.
  Var constant(Matrix value);

  Var record(Op op, std::vector<std::size_t> inputs, Attrs attrs);

  // Node storage is stable: references to recorded values stay valid as the tape grows.
  const std::deque<Node>& nodes() const noexcept { return nodes_; }
  std::size_t leaf_count() const noexcept { return leaf_ids_.size(); }
  const Matrix& value(std::size_t id) const { return nodes_.at(id).value; }

  // Gradients of <seed, output> with respect to every leaf, in leaf creation order.
  // Leaves that do not reach the output get an exactly-zero matrix.
  std::vector<Matrix> backward(const Var& output, const Matrix& seed) const;

  // Recomputes every non-input node from the cached values of its inputs and reports
  // whether all of them are bitwise identical to the recorded values.
  bool replay_matches() const;

 private:
  std::deque<Node> nodes_;
  std::vector<std::size_t> leaf_ids_;
};

// Forward value of one node given its input values.
Matrix evaluate(Op op, const Attrs& attrs, std::span<const Matrix* const> inputs);

// Operation set. Names and semantics mirror rala::linalg.
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var hadamard(const Var& a, const Var& b);
Var add_bias(const Var& a, const Var& bias);
Var scale_rows(const Var& a, const Var& w);
Var div_rows(const Var& a, const Var& d);
Var softmax_rows(const Var& a);
Var kernel_elu1(const Var& a);
Var relu(const Var& a);
Var tanh_map(const Var& a);
Var gelu(const Var& a);
Var mean_rows(const Var& a);
Var layer_norm(const Var& a, const Var& gamma, const Var& beta);
Var slice_cols(const Var& a, std::size_t begin, std::size_t count);
Var concat_cols(std::span<const Var> parts);
Var depthwise_conv3x3(const Var& x, std::size_t height, std::size_t width, const Var& weights,
                      const Var& bias);
Var im2col3x3(const Var& x, std::size_t height, std::size_t width, std::size_t stride);
// Mean softmax cross-entropy over rows of logits; 1 x 1.
Var cross_entropy(const Var& logits, std::vector<std::size_t> labels);

inline const Matrix& value_of(const Var& v) { return v.value(); }
// Records m as a constant on the tape that holds `like`.
inline Var lift(const Var& like, Matrix m) { return like.tape()->constant(std::move(m)); }

// An expression over leaves, recorded onto the given tape.
using Expr = std::function<Var(Tape&, std::span<const Var>)>;

struct Recording {
  std::unique_ptr<Tape> tape;
  Var output;
  const Matrix& value() const { return output.value(); }
};

Recording forward(const Expr& expr, std::span<const Matrix> leaves);
std::vector<Matrix> backward(const Recording& rec, const Matrix& seed);

struct GradCheckReport {
  std::string op;
  double max_rel_error = 0.0;
  double step = 0.0;
  std::vector<std::string> shapes;
};

// Central differences (f(x+h) - f(x-h)) / 2h of f = <seed, expr(leaves)> for every leaf
// entry, where seed is a seeded standard-normal matrix of the output's shape. The error
// of each entry is |analytic - numeric| / max(1, |numeric|); the report holds the max.
GradCheckReport finite_diff_check(const Expr& expr, std::span<const Matrix> leaves, double h,
                                  std::uint64_t seed = 0, std::string name = {});

}  // namespace rala::ad
