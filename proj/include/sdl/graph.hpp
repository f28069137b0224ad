#pragma once

#include "sdl/tensor.hpp"

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace sdl {

/// Trainable tensor owned outside any graph. Gradients accumulate across
/// backward calls until zero_grad().
template <typename Scalar>
struct Parameter {
  std::string name;
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor<Scalar> v) : name(std::move(n)), value(std::move(v)) {}

  void zero_grad() { grad = Tensor<Scalar>::zeros(value.shape()); }
  bool has_grad() const { return grad.size() == value.size(); }
};

enum class OpKind {
  leaf,
  param,
  conv3x3,
  conv1x1,
  avgpool2,
  upsample2,
  concat,
  add,
  sub,
  mul,
  abs,
  bcast_mul,
  gelu,
  sum,
  mean,
  scale,
  custom,
};

const char* to_string(OpKind kind);

/// Reverse-mode graph over a fixed set of tensor kernels. Nodes are recorded
/// in execution order, which is a topological order, so backward is a single
/// reverse sweep.
template <typename Scalar>
class Graph {
 public:
  using T = Tensor<Scalar>;
  using RowWeights = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  /// Receives the output adjoint and zero-initialized input adjoints to fill.
  using BackwardFn = std::function<void(const T& out_adj, std::span<T> in_adj)>;

  struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
  };

  Var input(T value, bool requires_grad = false);
  Var constant(T value) { return input(std::move(value), false); }
  Var param(Parameter<Scalar>& p);

  /// 3x3 convolution with periodic padding. w: (Cout, Cin, 3, 3), b: (1, Cout, 1, 1).
  Var conv3x3(Var x, Var w, std::optional<Var> b = std::nullopt);
  /// Pointwise channel map. w: (Cout, Cin, 1, 1), b: (1, Cout, 1, 1).
  Var conv1x1(Var x, Var w, std::optional<Var> b = std::nullopt);
  Var avgpool2(Var x);
  Var upsample2(Var x);
  Var concat(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var abs(Var a);
  /// x: (B, C, H, W) times s: (B or 1, C, h, w) with h | H and w | W, nearest-upsampled.
  Var bcast_mul(Var x, Var s);
  /// Tanh-form GELU.
  Var gelu(Var x);
  /// Reductions to a (1,1,1,1) scalar; optional per-row (height) weights.
  Var sum(Var x, const RowWeights* row_weights = nullptr);
  Var mean(Var x, const RowWeights* row_weights = nullptr);
  Var scale(Var x, Scalar factor);
  /// Escape hatch for fused kernels defined by other modules (loss reductions).
  Var custom(T value, std::vector<Var> inputs, BackwardFn backward, std::string label);

  const T& value(Var v) const;
  Scalar item(Var v) const;
  /// Accumulated gradient of an input leaf created with requires_grad.
  const T& grad(Var v) const;
  bool requires_grad(Var v) const { return node(v).needs_grad; }
  OpKind kind(Var v) const { return node(v).kind; }

  /// Accumulates d(loss)/d(leaf) into every leaf that requires grad: input
  /// leaves keep their gradient in the graph, parameters in Parameter::grad.
  void backward(Var loss);
  void zero_leaf_grads();

  std::size_t size() const { return nodes_.size(); }
  /// Number of nodes visited by the last backward call.
  std::size_t last_backward_visits() const { return last_visits_; }

 private:
  struct Node {
    OpKind kind = OpKind::leaf;
    std::array<int, 3> in{-1, -1, -1};
    T value;
    T leaf_grad;
    bool needs_grad = false;
    Scalar factor = Scalar(1);
    RowWeights weights;
    Parameter<Scalar>* parameter = nullptr;
    BackwardFn custom;
    std::vector<int> custom_in;
    std::string label;
  };

  const Node& node(Var v) const;
  const T& val(int id) const;
  Var push(Node n);
  bool grad_of(std::initializer_list<int> ids) const;
  void check_same(const char* op, Var a, Var b) const;

  std::vector<Node> nodes_;
  std::size_t last_visits_ = 0;
};

extern template class Graph<float>;
extern template class Graph<double>;

/// Direct (graph-free) kernels shared with inference paths and tests.
namespace kernels {

template <typename Scalar>
Tensor<Scalar> conv3x3(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>* b);
template <typename Scalar>
Tensor<Scalar> conv1x1(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>* b);
template <typename Scalar>
Tensor<Scalar> avgpool2(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> upsample2(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> concat(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> bcast_mul(const Tensor<Scalar>& x, const Tensor<Scalar>& s);
template <typename Scalar>
Scalar gelu(Scalar x);
template <typename Scalar>
Scalar gelu_grad(Scalar x);

}  // namespace kernels

}  // namespace sdl
