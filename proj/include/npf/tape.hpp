#ifndef NPF_TAPE_HPP
#define NPF_TAPE_HPP

#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "npf/param_store.hpp"
#include "npf/tensor.hpp"

namespace npf {

class Tape;

// Handle to a node on a tape. Cheap to copy; owns nothing.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& val() const;
  const Shape& shape() const;
  i64 extent(int axis) const;
  int rank() const;
};

enum class Op : std::uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  Div,
  Matmul,
  Relu,
  Softplus,
  Exp,
  Log,
  Square,
  Sqrt,
  SumAxis,
  MeanAxis,
  Concat,
  Slice,
  GatherRows,
  Softmax,
  LogSumExp,
  LayerNorm,
  GaussianLogDensity,
  BroadcastTo,
  Reshape,
};

// Reverse-mode tape. Nodes are appended in evaluation order (the tape is its
// own topological order); backward() walks it in reverse. Evaluation is
// eager: every node's value is computed on creation.
class Tape {
 public:
  explicit Tape(Dtype dt = Dtype::F32, ParamStore* params = nullptr)
      : dtype_(dt), params_(params) {}

  Dtype dtype() const { return dtype_; }
  std::size_t size() const { return nodes_.size(); }

  // Constant input (no gradient).
  Var constant(Tensor value);
  Var scalar(double value);
  // Differentiable leaf holding an explicit value (used by tests).
  Var input(Tensor value);
  // Leaf bound to a named parameter of the attached ParamStore; cached so
  // repeated lookups return the same node.
  Var param(const std::string& name);

  // Runs reverse-mode accumulation from the given scalar.
  void backward(Var loss);

  // Gradient of `loss` w.r.t. any node (valid after backward; zero tensor if
  // the node was not reached).
  Tensor grad(Var v) const;
  // Gradients for all bound parameters, keyed by name (missing = zero).
  GradStore param_grads() const;

  const Tensor& value(Var v) const;

  // implementation detail, public so the free op constructors can fill it in
  struct Node {
    Op op;
    std::vector<int> in;
    Tensor out;
    Tensor aux;    // op-dependent saved state (softmax output, LN stats, ...)
    Tensor aux2;
    int axis = 0;
    i64 slice_start = 0;
    std::vector<i64> indices;   // GatherRows
    Shape attr_shape;           // BroadcastTo / Reshape source shape
    bool needs_grad = false;
    bool transpose_rhs = false; // Matmul
  };

 private:
  Dtype dtype_;
  ParamStore* params_;
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::unordered_map<std::string, int> param_nodes_;

  int add_node(Node n);
  void accumulate(int id, const Tensor& g);

  friend class TapeOps;
};

// --- graph-building operations -------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
// a [.., m, k] x b [.., k, n] (or [.., n, k] with transpose_rhs) with
// broadcasting over leading axes.
Var matmul(Var a, Var b, bool transpose_rhs = false);
Var relu(Var x);
Var softplus(Var x);
Var exp(Var x);
Var log(Var x);
Var square(Var x);
Var sqrt(Var x);
Var sum(Var x, int axis, bool keepdim = false);
Var mean(Var x, int axis, bool keepdim = false);
Var sum_all(Var x);
Var concat(const std::vector<Var>& xs, int axis);
Var slice(Var x, int axis, i64 start, i64 len);
// x [L.., n, d], indices shaped idx_shape = [L'.., m] with L broadcastable to
// L'; picks rows along x's second-to-last axis.
Var gather_rows(Var x, const std::vector<i64>& indices, const Shape& idx_shape);
Var softmax_lastdim(Var x);
Var logsumexp_lastdim(Var x);
// Normalization only; affine gain/bias are composed outside.
Var layer_norm_lastdim(Var x, double eps = 1e-5);
// Elementwise log N(y | mu, sigma^2). mu and sigma must share a shape; y is
// broadcast against it. sigma must be positive.
Var gaussian_log_density(Var y, Var mu, Var sigma);
Var broadcast_to(Var x, const Shape& shape);
Var reshape(Var x, const Shape& shape);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
Var operator+(Var a, double b);
Var operator-(Var a, double b);
Var operator*(Var a, double b);
Var operator+(double a, Var b);
Var operator-(double a, Var b);
Var operator*(double a, Var b);
Var operator-(Var a);

// Convenience wrapper implementing the forward/backward contract: builds the
// graph via `program`, requires a scalar output, returns its value and the
// parameter gradients.
struct ForwardBackward {
  Tensor output;
  GradStore grads;
};
ForwardBackward forward_backward(ParamStore& params, Dtype dt,
                                 const std::function<Var(Tape&)>& program);

}  // namespace npf

#endif
