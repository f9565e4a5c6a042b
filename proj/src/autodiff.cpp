#include "ntom/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace ntom::ad {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw std::invalid_argument("Matrix: data length " + std::to_string(data_.size()) +
                                " does not match shape " + shape_string());
  }
}

Matrix Matrix::row(std::vector<double> values) {
  const std::size_t n = values.size();
  return Matrix(1, n, std::move(values));
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

std::string Matrix::shape_string() const {
  return std::to_string(rows_) + "x" + std::to_string(cols_);
}

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kMatmul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMulElem: return "mul_elem";
    case Op::kTanh: return "tanh";
    case Op::kSigmoid: return "sigmoid";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSoftmaxRows: return "softmax_rows";
    case Op::kConcatCols: return "concat_cols";
    case Op::kConcatRows: return "concat_rows";
    case Op::kSliceCols: return "slice_cols";
    case Op::kGatherRows: return "gather_rows";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kScale: return "scale";
    case Op::kClamp: return "clamp";
    case Op::kScalarFn: return "scalar_fn";
    case Op::kLstmCell: return "lstm_cell";
  }
  return "unknown";
}

std::size_t Tensor::rows() const { return values().rows(); }
std::size_t Tensor::cols() const { return values().cols(); }
const Matrix& Tensor::values() const { return graph_->values(id_); }
const Matrix& Tensor::grad() const { return graph_->grad(id_); }
double Tensor::item() const {
  const Matrix& v = values();
  if (v.size() != 1) throw std::invalid_argument("item() on non-scalar " + v.shape_string());
  return v[0];
}

namespace {

[[noreturn]] void shape_error(Op op, const Matrix& a, const Matrix& b) {
  throw std::invalid_argument(std::string(op_name(op)) + ": shape mismatch " +
                              a.shape_string() + " vs " + b.shape_string());
}

double sigmoid_value(double x) {
  if (x >= 0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// C += A * B, skipping zero entries of A (bag-of-words inputs are sparse).
void matmul_accumulate(const Matrix& a, const Matrix& b, Matrix& c) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  for (std::size_t i = 0; i < n; ++i) {
    double* crow = c.row_ptr(i);
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a(i, p);
      if (aip == 0.0) continue;
      const double* brow = b.row_ptr(p);
      for (std::size_t j = 0; j < m; ++j) crow[j] += aip * brow[j];
    }
  }
}

}  // namespace

const Graph::Node& Graph::node(Tensor t) const {
  check_owned(t);
  return nodes_[t.id()];
}

void Graph::check_owned(Tensor t) const {
  if (t.graph() != this || t.id() >= nodes_.size()) {
    throw std::invalid_argument("tensor does not belong to this graph");
  }
}

Tensor Graph::push(Node n) {
  for (NodeId in : n.inputs) n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
  evaluate(n);
  nodes_.push_back(std::move(n));
  return Tensor(this, static_cast<NodeId>(nodes_.size() - 1));
}

Tensor Graph::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Tensor(this, static_cast<NodeId>(nodes_.size() - 1));
}

Tensor Graph::param(Param& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Tensor(this, it->second);
  Node n;
  n.value = p.value;
  n.requires_grad = true;
  n.bound = &p;
  nodes_.push_back(std::move(n));
  const auto id = static_cast<NodeId>(nodes_.size() - 1);
  param_nodes_.emplace(&p, id);
  return Tensor(this, id);
}

Tensor Graph::apply(Op op, std::span<const Tensor> inputs) {
  switch (op) {
    case Op::kMatmul: return matmul(inputs[0], inputs[1]);
    case Op::kAdd: return add(inputs[0], inputs[1]);
    case Op::kSub: return sub(inputs[0], inputs[1]);
    case Op::kMulElem: return mul(inputs[0], inputs[1]);
    case Op::kTanh: return tanh(inputs[0]);
    case Op::kSigmoid: return sigmoid(inputs[0]);
    case Op::kExp: return exp(inputs[0]);
    case Op::kLog: return log(inputs[0]);
    case Op::kSoftmaxRows: return softmax_rows(inputs[0]);
    case Op::kConcatCols: return concat_cols(inputs);
    case Op::kConcatRows: return concat_rows(inputs);
    case Op::kSum: return sum(inputs[0]);
    case Op::kMean: return mean(inputs[0]);
    default:
      throw std::invalid_argument(std::string("apply: op ") + op_name(op) +
                                  " needs attributes; use the named function");
  }
}

Tensor Graph::matmul(Tensor a, Tensor b) {
  const Matrix& av = node(a).value;
  const Matrix& bv = node(b).value;
  if (av.cols() != bv.rows()) shape_error(Op::kMatmul, av, bv);
  Node n;
  n.op = Op::kMatmul;
  n.inputs = {a.id(), b.id()};
  return push(std::move(n));
}

Tensor Graph::add(Tensor a, Tensor b) {
  const Matrix& av = node(a).value;
  const Matrix& bv = node(b).value;
  const bool same = av.rows() == bv.rows() && av.cols() == bv.cols();
  const bool row_bias = bv.rows() == 1 && bv.cols() == av.cols();
  if (!same && !row_bias) shape_error(Op::kAdd, av, bv);
  Node n;
  n.op = Op::kAdd;
  n.inputs = {a.id(), b.id()};
  return push(std::move(n));
}

Tensor Graph::sub(Tensor a, Tensor b) {
  const Matrix& av = node(a).value;
  const Matrix& bv = node(b).value;
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) shape_error(Op::kSub, av, bv);
  Node n;
  n.op = Op::kSub;
  n.inputs = {a.id(), b.id()};
  return push(std::move(n));
}

Tensor Graph::mul(Tensor a, Tensor b) {
  const Matrix& av = node(a).value;
  const Matrix& bv = node(b).value;
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) shape_error(Op::kMulElem, av, bv);
  Node n;
  n.op = Op::kMulElem;
  n.inputs = {a.id(), b.id()};
  return push(std::move(n));
}

#define NTOM_UNARY(fn, kind)   \
  Tensor Graph::fn(Tensor a) { \
    node(a);                   \
    Node n;                    \
    n.op = kind;               \
    n.inputs = {a.id()};       \
    return push(std::move(n)); \
  }

NTOM_UNARY(tanh, Op::kTanh)
NTOM_UNARY(sigmoid, Op::kSigmoid)
NTOM_UNARY(exp, Op::kExp)
NTOM_UNARY(log, Op::kLog)
NTOM_UNARY(softmax_rows, Op::kSoftmaxRows)
NTOM_UNARY(sum, Op::kSum)
NTOM_UNARY(mean, Op::kMean)
#undef NTOM_UNARY

Tensor Graph::scale(Tensor a, double s) {
  node(a);
  Node n;
  n.op = Op::kScale;
  n.inputs = {a.id()};
  n.s0 = s;
  return push(std::move(n));
}

Tensor Graph::clamp(Tensor a, double lo, double hi) {
  node(a);
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo > hi");
  Node n;
  n.op = Op::kClamp;
  n.inputs = {a.id()};
  n.s0 = lo;
  n.s1 = hi;
  return push(std::move(n));
}

Tensor Graph::concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  Node n;
  n.op = Op::kConcatCols;
  const std::size_t rows = node(parts[0]).value.rows();
  for (Tensor t : parts) {
    const Matrix& v = node(t).value;
    if (v.rows() != rows) shape_error(Op::kConcatCols, node(parts[0]).value, v);
    n.inputs.push_back(t.id());
  }
  return push(std::move(n));
}

Tensor Graph::concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  Node n;
  n.op = Op::kConcatRows;
  const std::size_t cols = node(parts[0]).value.cols();
  for (Tensor t : parts) {
    const Matrix& v = node(t).value;
    if (v.cols() != cols) shape_error(Op::kConcatRows, node(parts[0]).value, v);
    n.inputs.push_back(t.id());
  }
  return push(std::move(n));
}

Tensor Graph::slice_cols(Tensor a, std::size_t begin, std::size_t count) {
  const Matrix& av = node(a).value;
  if (begin + count > av.cols() || count == 0) {
    throw std::invalid_argument("slice_cols: columns [" + std::to_string(begin) + ", " +
                                std::to_string(begin + count) + ") out of range for " +
                                av.shape_string());
  }
  Node n;
  n.op = Op::kSliceCols;
  n.inputs = {a.id()};
  n.index = {begin, count};
  return push(std::move(n));
}

Tensor Graph::gather_rows(Tensor a, std::span<const std::size_t> rows) {
  const Matrix& av = node(a).value;
  if (rows.empty()) throw std::invalid_argument("gather_rows: no rows requested");
  for (std::size_t r : rows) {
    if (r >= av.rows()) {
      throw std::out_of_range("gather_rows: row " + std::to_string(r) + " out of range for " +
                              av.shape_string());
    }
  }
  Node n;
  n.op = Op::kGatherRows;
  n.inputs = {a.id()};
  n.index.assign(rows.begin(), rows.end());
  return push(std::move(n));
}

Tensor Graph::lstm_cell(Tensor pre, std::size_t row, Tensor state, Tensor w_hidden) {
  const Matrix& p = node(pre).value;
  const Matrix& s = node(state).value;
  const Matrix& w = node(w_hidden).value;
  const std::size_t d = w.rows();
  if (w.cols() != 4 * d || p.cols() != 4 * d || row >= p.rows() || s.rows() != 1 ||
      s.cols() != 2 * d) {
    throw std::invalid_argument("lstm_cell: shapes pre " + p.shape_string() + " state " +
                                s.shape_string() + " w_hidden " + w.shape_string() +
                                " row " + std::to_string(row));
  }
  Node n;
  n.op = Op::kLstmCell;
  n.inputs = {pre.id(), state.id(), w_hidden.id()};
  n.index = {row};
  return push(std::move(n));
}

Tensor Graph::scalar_fn(std::span<const Tensor> inputs, double value,
                        std::span<const double> partials) {
  if (inputs.size() != partials.size()) {
    throw std::invalid_argument("scalar_fn: one partial per input required");
  }
  Node n;
  n.op = Op::kScalarFn;
  for (Tensor t : inputs) {
    if (node(t).value.size() != 1) {
      throw std::invalid_argument("scalar_fn: input " + node(t).value.shape_string() +
                                  " is not 1x1");
    }
    n.inputs.push_back(t.id());
  }
  n.aux.assign(partials.begin(), partials.end());
  n.value = Matrix(1, 1, value);
  for (NodeId in : n.inputs) n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
  nodes_.push_back(std::move(n));
  return Tensor(this, static_cast<NodeId>(nodes_.size() - 1));
}

void Graph::evaluate(Node& n) const {
  auto in = [&](std::size_t k) -> const Matrix& { return nodes_[n.inputs[k]].value; };
  switch (n.op) {
    case Op::kLeaf:
    case Op::kScalarFn:
      return;
    case Op::kLstmCell: {
      const Matrix& w = in(2);
      const std::size_t d = w.rows();
      const double* x = in(0).row_ptr(n.index[0]);
      const double* h = in(1).row_ptr(0);
      const double* c = h + d;
      std::vector<double> z(x, x + 4 * d);
      for (std::size_t p = 0; p < d; ++p) {
        if (h[p] == 0.0) continue;
        const double* wrow = w.row_ptr(p);
        for (std::size_t j = 0; j < 4 * d; ++j) z[j] += h[p] * wrow[j];
      }
      // aux: input, forget, candidate, output gate activations, then tanh(c').
      n.aux.assign(5 * d, 0.0);
      n.value = Matrix(1, 2 * d);
      for (std::size_t j = 0; j < d; ++j) {
        const double ig = 1.0 / (1.0 + std::exp(-z[j]));
        const double fg = 1.0 / (1.0 + std::exp(-z[d + j]));
        const double cg = std::tanh(z[2 * d + j]);
        const double og = 1.0 / (1.0 + std::exp(-z[3 * d + j]));
        const double cn = fg * c[j] + ig * cg;
        const double tc = std::tanh(cn);
        n.aux[j] = ig;
        n.aux[d + j] = fg;
        n.aux[2 * d + j] = cg;
        n.aux[3 * d + j] = og;
        n.aux[4 * d + j] = tc;
        n.value[j] = og * tc;
        n.value[d + j] = cn;
      }
      return;
    }
    case Op::kMatmul: {
      n.value = Matrix(in(0).rows(), in(1).cols());
      matmul_accumulate(in(0), in(1), n.value);
      return;
    }
    case Op::kAdd: {
      const Matrix& a = in(0);
      const Matrix& b = in(1);
      n.value = a;
      if (b.size() == a.size() && b.rows() == a.rows()) {
        for (std::size_t i = 0; i < a.size(); ++i) n.value[i] += b[i];
      } else {
        for (std::size_t r = 0; r < a.rows(); ++r)
          for (std::size_t c = 0; c < a.cols(); ++c) n.value(r, c) += b[c];
      }
      return;
    }
    case Op::kSub: {
      n.value = in(0);
      for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] -= in(1)[i];
      return;
    }
    case Op::kMulElem: {
      n.value = in(0);
      for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] *= in(1)[i];
      return;
    }
    case Op::kTanh: {
      n.value = in(0);
      for (double& v : n.value.storage()) v = std::tanh(v);
      return;
    }
    case Op::kSigmoid: {
      n.value = in(0);
      for (double& v : n.value.storage()) v = sigmoid_value(v);
      return;
    }
    case Op::kExp: {
      n.value = in(0);
      for (double& v : n.value.storage()) v = std::exp(std::clamp(v, -kExpClamp, kExpClamp));
      return;
    }
    case Op::kLog: {
      n.value = in(0);
      for (double& v : n.value.storage()) v = std::log(std::max(v, kLogFloor));
      return;
    }
    case Op::kSoftmaxRows: {
      n.value = in(0);
      for (std::size_t r = 0; r < n.value.rows(); ++r) {
        double mx = -INFINITY;
        for (std::size_t c = 0; c < n.value.cols(); ++c) mx = std::max(mx, n.value(r, c));
        double total = 0.0;
        for (std::size_t c = 0; c < n.value.cols(); ++c) {
          n.value(r, c) = std::exp(n.value(r, c) - mx);
          total += n.value(r, c);
        }
        for (std::size_t c = 0; c < n.value.cols(); ++c) n.value(r, c) /= total;
      }
      return;
    }
    case Op::kConcatCols: {
      std::size_t cols = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) cols += in(k).cols();
      n.value = Matrix(in(0).rows(), cols);
      std::size_t off = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const Matrix& part = in(k);
        for (std::size_t r = 0; r < part.rows(); ++r)
          for (std::size_t c = 0; c < part.cols(); ++c) n.value(r, off + c) = part(r, c);
        off += part.cols();
      }
      return;
    }
    case Op::kConcatRows: {
      std::vector<double> data;
      std::size_t rows = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        data.insert(data.end(), in(k).storage().begin(), in(k).storage().end());
        rows += in(k).rows();
      }
      n.value = Matrix(rows, in(0).cols(), std::move(data));
      return;
    }
    case Op::kSliceCols: {
      const Matrix& a = in(0);
      const std::size_t begin = n.index[0], count = n.index[1];
      n.value = Matrix(a.rows(), count);
      for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < count; ++c) n.value(r, c) = a(r, begin + c);
      return;
    }
    case Op::kGatherRows: {
      const Matrix& a = in(0);
      n.value = Matrix(n.index.size(), a.cols());
      for (std::size_t r = 0; r < n.index.size(); ++r)
        std::copy_n(a.row_ptr(n.index[r]), a.cols(), n.value.row_ptr(r));
      return;
    }
    case Op::kSum: {
      double s = 0.0;
      for (double v : in(0).storage()) s += v;
      n.value = Matrix(1, 1, s);
      return;
    }
    case Op::kMean: {
      double s = 0.0;
      for (double v : in(0).storage()) s += v;
      n.value = Matrix(1, 1, s / static_cast<double>(in(0).size()));
      return;
    }
    case Op::kScale: {
      n.value = in(0);
      for (double& v : n.value.storage()) v *= n.s0;
      return;
    }
    case Op::kClamp: {
      n.value = in(0);
      for (double& v : n.value.storage()) v = std::clamp(v, n.s0, n.s1);
      return;
    }
  }
}

void Graph::replay_forward() {
  for (Node& n : nodes_) {
    if (n.op == Op::kLeaf) {
      if (n.bound != nullptr) n.value = n.bound->value;
      continue;
    }
    evaluate(n);
  }
}

void Graph::backward(Tensor loss) {
  const Node& ln = node(loss);
  if (ln.value.rows() != 1 || ln.value.cols() != 1) {
    throw std::invalid_argument("backward: loss must be 1x1, got " + ln.value.shape_string());
  }
  for (Node& n : nodes_) {
    if (n.requires_grad) {
      n.grad = Matrix(n.value.rows(), n.value.cols());
    } else {
      n.grad = Matrix();
    }
  }
  if (!ln.requires_grad) return;
  nodes_[loss.id()].grad[0] = 1.0;

  for (std::size_t idx = loss.id() + 1; idx-- > 0;) {
    Node& n = nodes_[idx];
    if (!n.requires_grad || n.op == Op::kLeaf) continue;
    const Matrix& g = n.grad;
    auto target = [&](std::size_t k) -> Matrix* {
      Node& in = nodes_[n.inputs[k]];
      return in.requires_grad ? &in.grad : nullptr;
    };
    auto val = [&](std::size_t k) -> const Matrix& { return nodes_[n.inputs[k]].value; };

    switch (n.op) {
      case Op::kLeaf:
        break;
      case Op::kMatmul: {
        const Matrix& a = val(0);
        const Matrix& b = val(1);
        if (Matrix* ga = target(0)) {
          // dA += dC * B^T
          for (std::size_t i = 0; i < a.rows(); ++i)
            for (std::size_t p = 0; p < a.cols(); ++p) {
              double acc = 0.0;
              const double* brow = b.row_ptr(p);
              const double* grow = g.row_ptr(i);
              for (std::size_t j = 0; j < b.cols(); ++j) acc += grow[j] * brow[j];
              (*ga)(i, p) += acc;
            }
        }
        if (Matrix* gb = target(1)) {
          // dB += A^T * dC
          for (std::size_t i = 0; i < a.rows(); ++i)
            for (std::size_t p = 0; p < a.cols(); ++p) {
              const double aip = a(i, p);
              if (aip == 0.0) continue;
              double* gbrow = gb->row_ptr(p);
              const double* grow = g.row_ptr(i);
              for (std::size_t j = 0; j < b.cols(); ++j) gbrow[j] += aip * grow[j];
            }
        }
        break;
      }
      case Op::kAdd: {
        if (Matrix* ga = target(0))
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
        if (Matrix* gb = target(1)) {
          if (gb->size() == g.size() && gb->rows() == g.rows()) {
            for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i];
          } else {
            for (std::size_t r = 0; r < g.rows(); ++r)
              for (std::size_t c = 0; c < g.cols(); ++c) (*gb)[c] += g(r, c);
          }
        }
        break;
      }
      case Op::kSub: {
        if (Matrix* ga = target(0))
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
        if (Matrix* gb = target(1))
          for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
        break;
      }
      case Op::kMulElem: {
        if (Matrix* ga = target(0))
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * val(1)[i];
        if (Matrix* gb = target(1))
          for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * val(0)[i];
        break;
      }
      case Op::kTanh: {
        if (Matrix* ga = target(0))
          for (std::size_t i = 0; i < g.size(); ++i)
            (*ga)[i] += g[i] * (1.0 - n.value[i] * n.value[i]);
        break;
      }
      case Op::kSigmoid: {
        if (Matrix* ga = target(0))
          for (std::size_t i = 0; i < g.size(); ++i)
            (*ga)[i] += g[i] * n.value[i] * (1.0 - n.value[i]);
        break;
      }
      case Op::kExp: {
        if (Matrix* ga = target(0))
          for (std::size_t i = 0; i < g.size(); ++i)
            if (std::abs(val(0)[i]) <= kExpClamp) (*ga)[i] += g[i] * n.value[i];
        break;
      }
      case Op::kLog: {
        if (Matrix* ga = target(0))
          for (std::size_t i = 0; i < g.size(); ++i)
            if (val(0)[i] >= kLogFloor) (*ga)[i] += g[i] / val(0)[i];
        break;
      }
      case Op::kSoftmaxRows: {
        if (Matrix* ga = target(0)) {
          for (std::size_t r = 0; r < g.rows(); ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < g.cols(); ++c) dot += g(r, c) * n.value(r, c);
            for (std::size_t c = 0; c < g.cols(); ++c)
              (*ga)(r, c) += n.value(r, c) * (g(r, c) - dot);
          }
        }
        break;
      }
      case Op::kConcatCols: {
        std::size_t off = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const std::size_t w = val(k).cols();
          if (Matrix* gk = target(k))
            for (std::size_t r = 0; r < g.rows(); ++r)
              for (std::size_t c = 0; c < w; ++c) (*gk)(r, c) += g(r, off + c);
          off += w;
        }
        break;
      }
      case Op::kConcatRows: {
        std::size_t off = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const std::size_t len = val(k).size();
          if (Matrix* gk = target(k))
            for (std::size_t i = 0; i < len; ++i) (*gk)[i] += g[off + i];
          off += len;
        }
        break;
      }
      case Op::kSliceCols: {
        if (Matrix* ga = target(0)) {
          const std::size_t begin = n.index[0];
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < g.cols(); ++c) (*ga)(r, begin + c) += g(r, c);
        }
        break;
      }
      case Op::kGatherRows: {
        if (Matrix* ga = target(0)) {
          for (std::size_t r = 0; r < n.index.size(); ++r) {
            double* dst = &(*ga)(n.index[r], 0);
            for (std::size_t c = 0; c < g.cols(); ++c) dst[c] += g(r, c);
          }
        }
        break;
      }
      case Op::kSum: {
        if (Matrix* ga = target(0))
          for (double& v : ga->storage()) v += g[0];
        break;
      }
      case Op::kMean: {
        if (Matrix* ga = target(0)) {
          const double share = g[0] / static_cast<double>(ga->size());
          for (double& v : ga->storage()) v += share;
        }
        break;
      }
      case Op::kScale: {
        if (Matrix* ga = target(0))
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += n.s0 * g[i];
        break;
      }
      case Op::kClamp: {
        if (Matrix* ga = target(0))
          for (std::size_t i = 0; i < g.size(); ++i) {
            const double x = val(0)[i];
            if (x >= n.s0 && x <= n.s1) (*ga)[i] += g[i];
          }
        break;
      }
      case Op::kLstmCell: {
        const Matrix& w = val(2);
        const std::size_t d = w.rows();
        const double* h = val(1).row_ptr(0);
        const double* c = h + d;
        const double* a = n.aux.data();
        std::vector<double> dz(4 * d);
        std::vector<double> dc_prev(d);
        for (std::size_t j = 0; j < d; ++j) {
          const double ig = a[j], fg = a[d + j], cg = a[2 * d + j], og = a[3 * d + j];
          const double tc = a[4 * d + j];
          const double dh = g[j];
          const double dc = g[d + j] + dh * og * (1.0 - tc * tc);
          dz[j] = dc * cg * ig * (1.0 - ig);
          dz[d + j] = dc * c[j] * fg * (1.0 - fg);
          dz[2 * d + j] = dc * ig * (1.0 - cg * cg);
          dz[3 * d + j] = dh * tc * og * (1.0 - og);
          dc_prev[j] = dc * fg;
        }
        if (Matrix* gp = target(0)) {
          double* dst = gp->row_ptr(n.index[0]);
          for (std::size_t j = 0; j < 4 * d; ++j) dst[j] += dz[j];
        }
        if (Matrix* gs = target(1)) {
          for (std::size_t p = 0; p < d; ++p) {
            const double* wrow = w.row_ptr(p);
            double acc = 0.0;
            for (std::size_t j = 0; j < 4 * d; ++j) acc += dz[j] * wrow[j];
            (*gs)[p] += acc;
            (*gs)[d + p] += dc_prev[p];
          }
        }
        if (Matrix* gw = target(2)) {
          for (std::size_t p = 0; p < d; ++p) {
            if (h[p] == 0.0) continue;
            double* grow = gw->row_ptr(p);
            for (std::size_t j = 0; j < 4 * d; ++j) grow[j] += h[p] * dz[j];
          }
        }
        break;
      }
      case Op::kScalarFn: {
        for (std::size_t k = 0; k < n.inputs.size(); ++k)
          if (Matrix* gk = target(k)) (*gk)[0] += g[0] * n.aux[k];
        break;
      }
    }
  }
}

std::unordered_map<NodeId, Matrix> Graph::gradient_map() const {
  std::unordered_map<NodeId, Matrix> out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].requires_grad && nodes_[i].grad.size() == nodes_[i].value.size()) {
      out.emplace(static_cast<NodeId>(i), nodes_[i].grad);
    }
  }
  return out;
}

void Graph::accumulate_param_grads() {
  for (const auto& [param, id] : param_nodes_) {
    const Matrix& g = nodes_[id].grad;
    if (g.size() != param->grad.size()) continue;
    Param* p = const_cast<Param*>(param);
    std::size_t start = p->pin_row0 ? p->grad.cols() : 0;
    for (std::size_t i = start; i < g.size(); ++i) p->grad[i] += g[i];
  }
}

Matrix Graph::param_grad(const Param& p) const {
  auto it = param_nodes_.find(&p);
  if (it == param_nodes_.end() || nodes_[it->second].grad.size() != p.value.size()) {
    return Matrix(p.value.rows(), p.value.cols());
  }
  Matrix g = nodes_[it->second].grad;
  if (p.pin_row0)
    for (std::size_t c = 0; c < g.cols(); ++c) g(0, c) = 0.0;
  return g;
}

GradCheckResult grad_check(const std::function<Tensor(Graph&)>& f,
                           std::span<Param* const> params, double eps) {
  std::vector<Matrix> analytic;
  {
    Graph g;
    Tensor loss = f(g);
    if (!std::isfinite(loss.item())) {
      throw std::runtime_error("grad_check: f is non-finite at the unperturbed point");
    }
    g.backward(loss);
    for (Param* p : params) analytic.push_back(g.param_grad(*p));
  }

  auto evaluate = [&](Param& p, std::size_t i, double delta) {
    const double saved = p.value[i];
    p.value[i] = saved + delta;
    Graph g;
    const double v = f(g).item();
    p.value[i] = saved;
    if (!std::isfinite(v)) {
      std::ostringstream msg;
      msg << "grad_check: f is non-finite after perturbing " << p.name << "[" << i << "] by "
          << delta;
      throw std::runtime_error(msg.str());
    }
    return v;
  };

  GradCheckResult result;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Param& p = *params[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double numeric = (evaluate(p, i, eps) - evaluate(p, i, -eps)) / (2.0 * eps);
      const double a = analytic[k][i];
      const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      const double err = std::abs(a - numeric) / denom;
      if (err > result.max_rel_error || result.worst_param.empty()) {
        result.max_rel_error = err;
        result.worst_param = p.name;
        result.worst_index = i;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace ntom::ad
