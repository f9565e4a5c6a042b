#pragma once

// Minimal reverse-mode automatic differentiation over dense rank-2 tensors.
//
// A Graph is a tape: nodes are appended in evaluation order, so insertion
// order is a valid topological order and backward is a single reverse sweep.
// Trainable weights live in Param objects that outlive any one graph; a graph
// binds each Param to exactly one leaf node, so a parameter used at several
// timesteps accumulates its gradient in that leaf.
//
// exp() clamps its input to [-50, 50] and log() clamps its input to
// [1e-300, inf); the derivative is zero on the clamped region.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace ntom::ad {

inline constexpr double kExpClamp = 50.0;
inline constexpr double kLogFloor = 1e-300;

/// Dense row-major matrix of doubles. Vectors are 1 x n rows.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix row(std::vector<double> values);
  static Matrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double* row_ptr(std::size_t r) { return data_.data() + r * cols_; }
  const double* row_ptr(std::size_t r) const { return data_.data() + r * cols_; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  void fill(double v);
  std::string shape_string() const;

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// A trainable weight: value plus the gradient accumulated by the last
/// accumulate_param_grads() calls.
struct Param {
  Param() = default;
  Param(std::string name_, Matrix value_)
      : name(std::move(name_)), value(std::move(value_)),
        grad(value.rows(), value.cols()) {}

  std::string name;
  Matrix value;
  Matrix grad;
  // Row 0 never receives gradient (embedding PAD row).
  bool pin_row0 = false;

  void zero_grad() { grad.fill(0.0); }
};

enum class Op : std::uint8_t {
  kLeaf,
  kMatmul,
  kAdd,
  kSub,
  kMulElem,
  kTanh,
  kSigmoid,
  kExp,
  kLog,
  kSoftmaxRows,
  kConcatCols,
  kConcatRows,
  kSliceCols,
  kGatherRows,
  kSum,
  kMean,
  kScale,
  kClamp,
  kScalarFn,
  kLstmCell,
};

const char* op_name(Op op);

using NodeId = std::uint32_t;

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Graph* graph, NodeId id) : graph_(graph), id_(id) {}

  NodeId id() const { return id_; }
  Graph* graph() const { return graph_; }
  bool valid() const { return graph_ != nullptr; }

  std::size_t rows() const;
  std::size_t cols() const;
  const Matrix& values() const;
  const Matrix& grad() const;
  double item() const;

 private:
  Graph* graph_ = nullptr;
  NodeId id_ = 0;
};

class Graph {
 public:
  Graph() { nodes_.reserve(1 << 12); }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Tensor constant(Matrix value);
  Tensor zeros(std::size_t rows, std::size_t cols) { return constant(Matrix(rows, cols)); }
  Tensor scalar(double v) { return constant(Matrix(1, 1, v)); }
  /// Leaf bound to `p`. Repeated calls in one graph return the same node.
  Tensor param(Param& p);

  /// Generic entry point; the named free functions below forward here.
  Tensor apply(Op op, std::span<const Tensor> inputs);

  Tensor matmul(Tensor a, Tensor b);
  /// Elementwise a + b; b may also be a 1 x cols row broadcast over a's rows.
  Tensor add(Tensor a, Tensor b);
  Tensor sub(Tensor a, Tensor b);
  Tensor mul(Tensor a, Tensor b);
  Tensor tanh(Tensor a);
  Tensor sigmoid(Tensor a);
  Tensor exp(Tensor a);
  Tensor log(Tensor a);
  Tensor softmax_rows(Tensor a);
  Tensor concat_cols(std::span<const Tensor> parts);
  Tensor concat_rows(std::span<const Tensor> parts);
  Tensor slice_cols(Tensor a, std::size_t begin, std::size_t count);
  Tensor gather_rows(Tensor a, std::span<const std::size_t> rows);
  Tensor sum(Tensor a);
  Tensor mean(Tensor a);
  Tensor scale(Tensor a, double s);
  Tensor clamp(Tensor a, double lo, double hi);
  /// Fused LSTM step. `pre` holds x W_input + bias (row `row` is used), `state`
  /// is [h | c] (1 x 2d) and w_hidden is d x 4d; gates are laid out
  /// [input | forget | candidate | output]. Returns the new [h | c].
  Tensor lstm_cell(Tensor pre, std::size_t row, Tensor state, Tensor w_hidden);
  /// Scalar-valued function of scalar inputs whose value and partial
  /// derivatives were computed by the caller.
  Tensor scalar_fn(std::span<const Tensor> inputs, double value,
                   std::span<const double> partials);

  /// Computes d(loss)/d(node) for every node. Gradients are reset first, so
  /// repeating backward without re-forwarding yields identical gradients.
  void backward(Tensor loss);
  /// Node gradients keyed by node id, for nodes that received gradient.
  std::unordered_map<NodeId, Matrix> gradient_map() const;
  /// Adds each bound leaf's gradient into its Param::grad.
  void accumulate_param_grads();
  /// Gradient of the leaf bound to `p`, or zeros when `p` is not in the graph.
  Matrix param_grad(const Param& p) const;

  std::size_t size() const { return nodes_.size(); }
  const Matrix& values(NodeId id) const { return nodes_[id].value; }
  const Matrix& grad(NodeId id) const { return nodes_[id].grad; }
  Op op(NodeId id) const { return nodes_[id].op; }
  std::span<const NodeId> inputs(NodeId id) const { return nodes_[id].inputs; }

  /// Re-evaluates every non-leaf node from its inputs. Used to check that
  /// replay with unchanged leaves is bit-identical.
  void replay_forward();

 private:
  struct Node {
    Op op = Op::kLeaf;
    std::vector<NodeId> inputs;
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    double s0 = 0.0;  // scale factor / clamp lo
    double s1 = 0.0;  // clamp hi
    std::vector<std::size_t> index;  // slice begin / gathered rows
    std::vector<double> aux;         // scalar_fn partials / lstm gate activations
    Param* bound = nullptr;
  };

  Tensor push(Node node);
  void evaluate(Node& node) const;
  const Node& node(Tensor t) const;
  void check_owned(Tensor t) const;

  std::vector<Node> nodes_;
  std::unordered_map<const Param*, NodeId> param_nodes_;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares backward() against central finite differences over every entry
/// of `params`. Error per entry is |analytic - numeric| / max(1, |analytic|,
/// |numeric|). Throws std::runtime_error when f becomes non-finite.
GradCheckResult grad_check(const std::function<Tensor(Graph&)>& f,
                           std::span<Param* const> params, double eps);

}  // namespace ntom::ad
