#include "dreamrec/autodiff.hpp"

#include <algorithm>
#include <limits>
#include <cmath>
#include <numbers>

namespace dreamrec::num {
namespace {

// C[m,n] += A[m,k] * B[k,n]
template <typename Real>
void gemm_nn(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    Real* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = a[i * k + p];
      const Real* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <typename Real>
void gemm_nt(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const Real* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const Real* brow = b + j * k;
      Real acc{0};
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
template <typename Real>
void gemm_tn(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const Real* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = a[i * k + p];
      Real* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename Real>
Real sigmoid(Real x) {
  if (x >= 0) return Real(1) / (Real(1) + std::exp(-x));
  const Real e = std::exp(x);
  return e / (Real(1) + e);
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

template <typename Real>
Real activate(Activation fn, Real x) {
  switch (fn) {
    case Activation::kRelu: return x > 0 ? x : Real(0);
    case Activation::kTanh: return std::tanh(x);
    case Activation::kSigmoid: return sigmoid(x);
    case Activation::kGelu: {
      const Real inner = Real(kGeluC) * (x + Real(kGeluA) * x * x * x);
      return Real(0.5) * x * (Real(1) + std::tanh(inner));
    }
    case Activation::kSilu: return x * sigmoid(x);
    case Activation::kLogSigmoid: return std::min(x, Real(0)) - std::log1p(std::exp(-std::abs(x)));
  }
  return x;
}

template <typename Real>
Real activate_grad(Activation fn, Real x) {
  switch (fn) {
    case Activation::kRelu: return x > 0 ? Real(1) : Real(0);
    case Activation::kTanh: {
      const Real t = std::tanh(x);
      return Real(1) - t * t;
    }
    case Activation::kSigmoid: {
      const Real s = sigmoid(x);
      return s * (Real(1) - s);
    }
    case Activation::kGelu: {
      const Real inner = Real(kGeluC) * (x + Real(kGeluA) * x * x * x);
      const Real t = std::tanh(inner);
      const Real dinner = Real(kGeluC) * (Real(1) + Real(3 * kGeluA) * x * x);
      return Real(0.5) * (Real(1) + t) + Real(0.5) * x * (Real(1) - t * t) * dinner;
    }
    case Activation::kSilu: {
      const Real s = sigmoid(x);
      return s * (Real(1) + x * (Real(1) - s));
    }
    case Activation::kLogSigmoid: return sigmoid(-x);
  }
  return Real(1);
}

template <typename Real>
void accumulate(Tensor<Real>& dst, const Tensor<Real>& src) {
  Real* d = dst.data();
  const Real* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

}  // namespace

template <typename Real>
Var Graph<Real>::push(Node node) {
  if (nodes_.size() >= UINT32_MAX - 1) throw ContractError("graph too large");
  nodes_.push_back(std::move(node));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename Real>
auto Graph<Real>::node(Var v) const -> const Node& {
  if (!v.valid() || v.id >= nodes_.size()) throw ContractError("invalid graph variable");
  return nodes_[v.id];
}

template <typename Real>
const Tensor<Real>& Graph<Real>::value(Var v) const {
  const Node& n = node(v);
  return n.op == Op::kParameter ? n.param->value : n.value;
}

template <typename Real>
bool Graph<Real>::requires_grad(Var v) const {
  return node(v).requires_grad;
}

template <typename Real>
void Graph<Real>::check_rank(Var v, std::size_t rank, const char* op) const {
  if (value(v).rank() != rank) {
    throw ContractError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                        shape_string(value(v).shape()));
  }
}

template <typename Real>
Var Graph<Real>::constant(Tensor<Real> value) {
  Node n;
  n.op = Op::kConstant;
  n.value = std::move(value);
  return push(std::move(n));
}

template <typename Real>
Var Graph<Real>::parameter(Parameter<Real>& p) {
  Node n;
  n.op = Op::kParameter;
  n.param = &p;
  n.requires_grad = mode_ == GradMode::kEnabled;
  return push(std::move(n));
}

template <typename Real>
Var Graph<Real>::matmul(Var a, Var b, bool transpose_b) {
  check_rank(a, 2, "matmul");
  check_rank(b, 2, "matmul");
  const auto& av = value(a);
  const auto& bv = value(b);
  const std::size_t m = av.rows(), k = av.cols();
  const std::size_t n = transpose_b ? bv.rows() : bv.cols();
  const std::size_t kb = transpose_b ? bv.cols() : bv.rows();
  if (k != kb) {
    throw ContractError("matmul: inner dimensions differ, " + shape_string(av.shape()) + " x " +
                        shape_string(bv.shape()) + (transpose_b ? "^T" : ""));
  }
  Node out;
  out.op = Op::kMatMul;
  out.inputs = {a.id, b.id};
  out.flag = transpose_b;
  out.value = Tensor<Real>({m, n});
  if (transpose_b) {
    gemm_nt(av.data(), bv.data(), out.value.data(), m, k, n);
  } else {
    gemm_nn(av.data(), bv.data(), out.value.data(), m, k, n);
  }
  out.requires_grad = node(a).requires_grad || node(b).requires_grad;
  return push(std::move(out));
}

template <typename Real>
Var Graph<Real>::batch_matmul(Var a, Var b, bool transpose_b) {
  check_rank(a, 3, "batch_matmul");
  check_rank(b, 3, "batch_matmul");
  const auto& av = value(a);
  const auto& bv = value(b);
  const std::size_t batch = av.extent(0), m = av.extent(1), k = av.extent(2);
  const std::size_t n = transpose_b ? bv.extent(1) : bv.extent(2);
  const std::size_t kb = transpose_b ? bv.extent(2) : bv.extent(1);
  if (bv.extent(0) != batch || k != kb) {
    throw ContractError("batch_matmul: incompatible shapes " + shape_string(av.shape()) + " x " +
                        shape_string(bv.shape()));
  }
  Node out;
  out.op = Op::kBatchMatMul;
  out.inputs = {a.id, b.id};
  out.flag = transpose_b;
  out.value = Tensor<Real>({batch, m, n});
  for (std::size_t s = 0; s < batch; ++s) {
    const Real* ap = av.data() + s * m * k;
    const Real* bp = bv.data() + s * k * n;
    Real* cp = out.value.data() + s * m * n;
    if (transpose_b) {
      gemm_nt(ap, bp, cp, m, k, n);
    } else {
      gemm_nn(ap, bp, cp, m, k, n);
    }
  }
  out.requires_grad = node(a).requires_grad || node(b).requires_grad;
  return push(std::move(out));
}

template <typename Real>
Var Graph<Real>::add(Var a, Var b) {
  const auto& av = value(a);
  const auto& bv = value(b);
  if (av.shape() != bv.shape()) {
    throw ContractError("add: shape mismatch " + shape_string(av.shape()) + " vs " +
                        shape_string(bv.shape()));
  }
  Node out;
  out.op = Op::kAdd;
  out.inputs = {a.id, b.id};
  out.value = av;
  accumulate(out.value, bv);
  out.requires_grad = node(a).requires_grad || node(b).requires_grad;
  return push(std::move(out));
}

template <typename Real>
Var Graph<Real>::sub(Var a, Var b) {
  const auto& av = value(a);
  const auto& bv = value(b);
  if (av.shape() != bv.shape()) {
    throw ContractError("sub: shape mismatch " + shape_string(av.shape()) + " vs " +
                        shape_string(bv.shape()));
  }
  Node out;
  out.op = Op::kSub;
  out.inputs = {a.id, b.id};
  out.value = av;
  for (std::size_t i = 0; i < av.size(); ++i) out.value[i] -= bv[i];
  out.requires_grad = node(a).requires_grad || node(b).requires_grad;
  return push(std::move(out));
}

template <typename Real>
Var Graph<Real>::mul(Var a, Var b) {
  const auto& av = value(a);
  const auto& bv = value(b);
  if (av.shape() != bv.shape()) {
    throw ContractError("mul: shape mismatch " + shape_string(av.shape()) + " vs " +
                        shape_string(bv.shape()));
  }
  Node out;
  out.op = Op::kMul;
  out.inputs = {a.id, b.id};
  out.value = av;
  for (std::size_t i = 0; i < av.size(); ++i) out.value[i] *= bv[i];
  out.requires_grad = node(a).requires_grad || node(b).requires_grad;
  return push(std::move(out));
}

template <typename Real>
Var Graph<Real>::add_bias(Var x, Var bias) {
  check_rank(x, 2, "add_bias");
  check_rank(bias, 1, "add_bias");
  const auto& xv = value(x);
  const auto& bv = value(bias);
  if (bv.extent(0) != xv.cols()) {
    throw ContractError("add_bias: bias " + shape_string(bv.shape()) + " vs input " +
                        shape_string(xv.shape()));
  }
  Node out;
  out.op = Op::kAddBias;
  out.inputs = {x.id, bias.id};
  out.value = xv;
  const std::size_t n = xv.cols();
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    Real* row = out.value.data() + r * n;
    for (std::size_t j = 0; j < n; ++j) row[j] += bv[j];
  }
  out.requires_grad = node(x).requires_grad || node(bias).requires_grad;
  return push(std::move(out));
}

template <typename Real>
Var Graph<Real>::scale(Var x, Real factor) {
  Node out;
  out.op = Op::kScale;
  out.inputs = {x.id};
  out.scalar = factor;
  out.value = value(x);
  for (auto& v : out.value.values()) v *= factor;
  out.requires_grad = node(x).requires_grad;
  return push(std::move(out));
}

template <typename Real>
Var Graph<Real>::activation(Var x, Activation fn) {
  Node out;
  out.op = Op::kActivation;
  out.inputs = {x.id};
  out.act = fn;
  out.value = value(x);
  for (auto& v : out.value.values()) v = activate(fn, v);
  out.requires_grad = node(x).requires_grad;
  return push(std::move(out));
}

template <typename Real>
Var Graph<Real>::softmax(Var x, Mask mask) {
  const auto& xv = value(x);
  if (xv.rank() == 0) throw ContractError("softmax: scalar input");
  if (mask && mask->size() != xv.size()) throw ContractError("softmax: mask size mismatch");
  const std::size_t n = xv.shape().back();
  const std::size_t rows = n == 0 ? 0 : xv.size() / n;
  Node out;
  out.op = Op::kSoftmax;
  out.inputs = {x.id};
  out.mask = mask;
  out.value = Tensor<Real>(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* in = xv.data() + r * n;
    Real* o = out.value.data() + r * n;
    const std::uint8_t* mk = mask ? mask->data() + r * n : nullptr;
    Real mx = -std::numeric_limits<Real>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (!mk || !mk[j]) mx = std::max(mx, in[j]);
    }
    if (mx == -std::numeric_limits<Real>::infinity()) {
      throw ContractError("softmax: row " + std::to_string(r) + " is fully masked");
    }
    Real total{0};
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = (mk && mk[j]) ? Real(0) : std::exp(in[j] - mx);
      total += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= total;
  }
  out.requires_grad = node(x).requires_grad;
  return push(std::move(out));
}

template <typename Real>
Var Graph<Real>::layer_norm(Var x, Var gamma, Var beta, Real eps) {
  check_rank(x, 2, "layer_norm");
  const auto& xv = value(x);
  const auto& gv = value(gamma);
  const auto& bv = value(beta);
  const std::size_t m = xv.rows(), n = xv.cols();
  if (gv.shape() != Shape{n} || bv.shape() != Shape{n}) {
    throw ContractError("layer_norm: affine parameters must have shape [" + std::to_string(n) + "]");
  }
  Node out;
  out.op = Op::kLayerNorm;
  out.inputs = {x.id, gamma.id, beta.id};
  out.scalar = eps;
  out.value = Tensor<Real>({m, n});
  // saved = [xhat (m*n) | rstd (m)]
  out.saved.resize(m * n + m);
  for (std::size_t r = 0; r < m; ++r) {
    const Real* in = xv.data() + r * n;
    Real mean{0};
    for (std::size_t j = 0; j < n; ++j) mean += in[j];
    mean /= Real(n);
    Real var{0};
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= Real(n);
    const Real rstd = Real(1) / std::sqrt(var + eps);
    out.saved[m * n + r] = rstd;
    for (std::size_t j = 0; j < n; ++j) {
      const Real xh = (in[j] - mean) * rstd;
      out.saved[r * n + j] = xh;
      out.value[r * n + j] = xh * gv[j] + bv[j];
    }
  }
  out.requires_grad =
      node(x).requires_grad || node(gamma).requires_grad || node(beta).requires_grad;
  return push(std::move(out));
}

template <typename Real>
Var Graph<Real>::gather_rows(Var source, std::vector<std::size_t> rows) {
  check_rank(source, 2, "gather_rows");
  const auto& sv = value(source);
  const std::size_t n = sv.cols();
  Node out;
  out.op = Op::kGather;
  out.inputs = {source.id};
  out.value = Tensor<Real>({rows.size(), n});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= sv.rows()) {
      throw ContractError("gather_rows: row " + std::to_string(rows[i]) + " out of range [0, " +
                          std::to_string(sv.rows()) + ")");
    }
    std::copy_n(sv.data() + rows[i] * n, n, out.value.data() + i * n);
  }
  out.rows = std::move(rows);
  out.requires_grad = node(source).requires_grad;
  return push(std::move(out));
}

template <typename Real>
Var Graph<Real>::concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  if (axis > 1) throw ContractError("concat: axis must be 0 or 1");
  for (Var p : parts) check_rank(p, 2, "concat");
  const std::size_t fixed = value(parts[0]).extent(1 - axis);
  std::size_t total = 0;
  for (Var p : parts) {
    if (value(p).extent(1 - axis) != fixed) throw ContractError("concat: incompatible shapes");
    total += value(p).extent(axis);
  }
  Node out;
  out.op = Op::kConcat;
  out.begin = axis;
  const std::size_t rows = axis == 0 ? total : fixed;
  const std::size_t cols = axis == 0 ? fixed : total;
  out.value = Tensor<Real>({rows, cols});
  std::size_t offset = 0;
  for (Var p : parts) {
    const auto& pv = value(p);
    if (axis == 0) {
      std::copy(pv.data(), pv.data() + pv.size(), out.value.data() + offset * cols);
    } else {
      for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(pv.data() + r * pv.cols(), pv.cols(), out.value.data() + r * cols + offset);
      }
    }
    offset += pv.extent(axis);
    out.inputs.push_back(p.id);
    out.requires_grad = out.requires_grad || node(p).requires_grad;
  }
  return push(std::move(out));
}

template <typename Real>
Var Graph<Real>::slice_cols(Var x, std::size_t begin, std::size_t end) {
  check_rank(x, 2, "slice_cols");
  const auto& xv = value(x);
  if (begin > end || end > xv.cols()) throw ContractError("slice_cols: bad range");
  const std::size_t w = end - begin;
  Node out;
  out.op = Op::kSliceCols;
  out.inputs = {x.id};
  out.begin = begin;
  out.end = end;
  out.value = Tensor<Real>({xv.rows(), w});
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    std::copy_n(xv.data() + r * xv.cols() + begin, w, out.value.data() + r * w);
  }
  out.requires_grad = node(x).requires_grad;
  return push(std::move(out));
}

template <typename Real>
Var Graph<Real>::reshape(Var x, Shape shape) {
  Node out;
  out.op = Op::kReshape;
  out.inputs = {x.id};
  out.value = value(x).reshaped(std::move(shape));
  out.requires_grad = node(x).requires_grad;
  return push(std::move(out));
}

template <typename Real>
Var Graph<Real>::row_sum(Var x) {
  check_rank(x, 2, "row_sum");
  const auto& xv = value(x);
  Node out;
  out.op = Op::kRowSum;
  out.inputs = {x.id};
  out.value = Tensor<Real>({xv.rows()});
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    Real acc{0};
    for (Real v : xv.row(r)) acc += v;
    out.value[r] = acc;
  }
  out.requires_grad = node(x).requires_grad;
  return push(std::move(out));
}

template <typename Real>
Var Graph<Real>::row_sq_norm(Var x) {
  check_rank(x, 2, "row_sq_norm");
  const auto& xv = value(x);
  Node out;
  out.op = Op::kRowSqNorm;
  out.inputs = {x.id};
  out.value = Tensor<Real>({xv.rows()});
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    Real acc{0};
    for (Real v : xv.row(r)) acc += v * v;
    out.value[r] = acc;
  }
  out.requires_grad = node(x).requires_grad;
  return push(std::move(out));
}

template <typename Real>
Var Graph<Real>::sum(Var x) {
  Node out;
  out.op = Op::kSum;
  out.inputs = {x.id};
  Real acc{0};
  for (Real v : value(x).values()) acc += v;
  out.value = Tensor<Real>::scalar(acc);
  out.requires_grad = node(x).requires_grad;
  return push(std::move(out));
}

template <typename Real>
Var Graph<Real>::mean(Var x) {
  const auto& xv = value(x);
  if (xv.size() == 0) throw ContractError("mean: empty tensor");
  Node out;
  out.op = Op::kMean;
  out.inputs = {x.id};
  Real acc{0};
  for (Real v : xv.values()) acc += v;
  out.value = Tensor<Real>::scalar(acc / Real(xv.size()));
  out.requires_grad = node(x).requires_grad;
  return push(std::move(out));
}

template <typename Real>
Var Graph<Real>::opaque(Var x, std::function<Real(Real)> fn, std::string label) {
  Node out;
  out.op = Op::kOpaque;
  out.inputs = {x.id};
  out.label = std::move(label);
  out.value = value(x);
  for (auto& v : out.value.values()) v = fn(v);
  out.requires_grad = node(x).requires_grad;
  return push(std::move(out));
}

template <typename Real>
void Graph<Real>::backward(Var loss) {
  const Node& root = node(loss);
  if (value(loss).size() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        shape_string(value(loss).shape()));
  }
  if (!root.requires_grad) return;

  std::vector<Tensor<Real>> grads(nodes_.size());
  std::vector<bool> live(nodes_.size(), false);
  grads[loss.id] = Tensor<Real>::filled(value(loss).shape(), Real(1));
  live[loss.id] = true;

  // Returns the gradient buffer of input i, allocating it on first use, or
  // nullptr if that input does not need a gradient.
  auto sink = [&](std::uint32_t id) -> Tensor<Real>* {
    if (!nodes_[id].requires_grad) return nullptr;
    if (!live[id]) {
      grads[id] = Tensor<Real>(value(Var{id}).shape());
      live[id] = true;
    }
    return &grads[id];
  };

  for (std::size_t idx = nodes_.size(); idx-- > 0;) {
    if (!live[idx]) continue;
    const Node& n = nodes_[idx];
    const Tensor<Real>& g = grads[idx];
    switch (n.op) {
      case Op::kConstant: break;
      case Op::kParameter: accumulate(n.param->grad, g); break;
      case Op::kMatMul: {
        const auto& av = value(Var{n.inputs[0]});
        const auto& bv = value(Var{n.inputs[1]});
        const std::size_t m = av.rows(), k = av.cols();
        const std::size_t cols = g.cols();
        if (auto* ga = sink(n.inputs[0])) {
          if (n.flag) {
            gemm_nn(g.data(), bv.data(), ga->data(), m, cols, k);
          } else {
            gemm_nt(g.data(), bv.data(), ga->data(), m, cols, k);
          }
        }
        if (auto* gb = sink(n.inputs[1])) {
          if (n.flag) {
            gemm_tn(g.data(), av.data(), gb->data(), m, cols, k);
          } else {
            gemm_tn(av.data(), g.data(), gb->data(), m, k, cols);
          }
        }
        break;
      }
      case Op::kBatchMatMul: {
        const auto& av = value(Var{n.inputs[0]});
        const auto& bv = value(Var{n.inputs[1]});
        const std::size_t batch = av.extent(0), m = av.extent(1), k = av.extent(2);
        const std::size_t cols = g.extent(2);
        auto* ga = sink(n.inputs[0]);
        auto* gb = sink(n.inputs[1]);
        for (std::size_t s = 0; s < batch; ++s) {
          const Real* gp = g.data() + s * m * cols;
          const Real* ap = av.data() + s * m * k;
          const Real* bp = bv.data() + s * k * cols;
          if (ga) {
            Real* out = ga->data() + s * m * k;
            if (n.flag) {
              gemm_nn(gp, bp, out, m, cols, k);
            } else {
              gemm_nt(gp, bp, out, m, cols, k);
            }
          }
          if (gb) {
            Real* out = gb->data() + s * k * cols;
            if (n.flag) {
              gemm_tn(gp, ap, out, m, cols, k);
            } else {
              gemm_tn(ap, gp, out, m, k, cols);
            }
          }
        }
        break;
      }
      case Op::kAdd:
        if (auto* ga = sink(n.inputs[0])) accumulate(*ga, g);
        if (auto* gb = sink(n.inputs[1])) accumulate(*gb, g);
        break;
      case Op::kSub:
        if (auto* ga = sink(n.inputs[0])) accumulate(*ga, g);
        if (auto* gb = sink(n.inputs[1])) {
          for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
        }
        break;
      case Op::kMul: {
        const auto& av = value(Var{n.inputs[0]});
        const auto& bv = value(Var{n.inputs[1]});
        if (auto* ga = sink(n.inputs[0])) {
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
        }
        if (auto* gb = sink(n.inputs[1])) {
          for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
        }
        break;
      }
      case Op::kAddBias: {
        if (auto* gx = sink(n.inputs[0])) accumulate(*gx, g);
        if (auto* gb = sink(n.inputs[1])) {
          const std::size_t cols = g.cols();
          for (std::size_t r = 0; r < g.rows(); ++r) {
            for (std::size_t j = 0; j < cols; ++j) (*gb)[j] += g[r * cols + j];
          }
        }
        break;
      }
      case Op::kScale:
        if (auto* gx = sink(n.inputs[0])) {
          for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * n.scalar;
        }
        break;
      case Op::kActivation:
        if (auto* gx = sink(n.inputs[0])) {
          const auto& xv = value(Var{n.inputs[0]});
          for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * activate_grad(n.act, xv[i]);
        }
        break;
      case Op::kSoftmax:
        if (auto* gx = sink(n.inputs[0])) {
          const std::size_t cols = g.shape().back();
          const std::size_t rows = g.size() / cols;
          for (std::size_t r = 0; r < rows; ++r) {
            const Real* p = n.value.data() + r * cols;
            const Real* gr = g.data() + r * cols;
            Real dot{0};
            for (std::size_t j = 0; j < cols; ++j) dot += p[j] * gr[j];
            Real* out = gx->data() + r * cols;
            for (std::size_t j = 0; j < cols; ++j) out[j] += p[j] * (gr[j] - dot);
          }
        }
        break;
      case Op::kLayerNorm: {
        const std::size_t m = g.rows(), cols = g.cols();
        const auto& gamma = value(Var{n.inputs[1]});
        const Real* xhat = n.saved.data();
        const Real* rstd = n.saved.data() + m * cols;
        if (auto* gg = sink(n.inputs[1])) {
          for (std::size_t r = 0; r < m; ++r) {
            for (std::size_t j = 0; j < cols; ++j) (*gg)[j] += g[r * cols + j] * xhat[r * cols + j];
          }
        }
        if (auto* gb = sink(n.inputs[2])) {
          for (std::size_t r = 0; r < m; ++r) {
            for (std::size_t j = 0; j < cols; ++j) (*gb)[j] += g[r * cols + j];
          }
        }
        if (auto* gx = sink(n.inputs[0])) {
          for (std::size_t r = 0; r < m; ++r) {
            Real mean_d{0}, mean_dx{0};
            for (std::size_t j = 0; j < cols; ++j) {
              const Real d = g[r * cols + j] * gamma[j];
              mean_d += d;
              mean_dx += d * xhat[r * cols + j];
            }
            mean_d /= Real(cols);
            mean_dx /= Real(cols);
            for (std::size_t j = 0; j < cols; ++j) {
              const Real d = g[r * cols + j] * gamma[j];
              (*gx)[r * cols + j] += rstd[r] * (d - mean_d - xhat[r * cols + j] * mean_dx);
            }
          }
        }
        break;
      }
      case Op::kGather:
        if (auto* gs = sink(n.inputs[0])) {
          const std::size_t cols = g.cols();
          for (std::size_t i = 0; i < n.rows.size(); ++i) {
            Real* dst = gs->data() + n.rows[i] * cols;
            const Real* src = g.data() + i * cols;
            for (std::size_t j = 0; j < cols; ++j) dst[j] += src[j];
          }
        }
        break;
      case Op::kConcat: {
        const std::size_t axis = n.begin;
        const std::size_t cols = g.cols();
        std::size_t offset = 0;
        for (std::uint32_t in : n.inputs) {
          const auto& pv = value(Var{in});
          if (auto* gp = sink(in)) {
            if (axis == 0) {
              const Real* src = g.data() + offset * cols;
              for (std::size_t i = 0; i < pv.size(); ++i) (*gp)[i] += src[i];
            } else {
              for (std::size_t r = 0; r < pv.rows(); ++r) {
                for (std::size_t j = 0; j < pv.cols(); ++j) {
                  (*gp)[r * pv.cols() + j] += g[r * cols + offset + j];
                }
              }
            }
          }
          offset += pv.extent(axis);
        }
        break;
      }
      case Op::kSliceCols:
        if (auto* gx = sink(n.inputs[0])) {
          const std::size_t w = n.end - n.begin;
          const std::size_t cols = gx->cols();
          for (std::size_t r = 0; r < g.rows(); ++r) {
            for (std::size_t j = 0; j < w; ++j) (*gx)[r * cols + n.begin + j] += g[r * w + j];
          }
        }
        break;
      case Op::kReshape:
        if (auto* gx = sink(n.inputs[0])) accumulate(*gx, g);
        break;
      case Op::kRowSum:
        if (auto* gx = sink(n.inputs[0])) {
          const std::size_t cols = gx->cols();
          for (std::size_t r = 0; r < gx->rows(); ++r) {
            for (std::size_t j = 0; j < cols; ++j) (*gx)[r * cols + j] += g[r];
          }
        }
        break;
      case Op::kRowSqNorm:
        if (auto* gx = sink(n.inputs[0])) {
          const auto& xv = value(Var{n.inputs[0]});
          const std::size_t cols = gx->cols();
          for (std::size_t r = 0; r < gx->rows(); ++r) {
            for (std::size_t j = 0; j < cols; ++j) {
              (*gx)[r * cols + j] += Real(2) * xv[r * cols + j] * g[r];
            }
          }
        }
        break;
      case Op::kSum:
        if (auto* gx = sink(n.inputs[0])) {
          for (auto& v : gx->values()) v += g[0];
        }
        break;
      case Op::kMean:
        if (auto* gx = sink(n.inputs[0])) {
          const Real share = g[0] / Real(gx->size());
          for (auto& v : gx->values()) v += share;
        }
        break;
      case Op::kOpaque:
        throw UnsupportedOpError("backward: operation '" + n.label + "' is not differentiable");
      default: throw UnsupportedOpError("backward: unknown operation");
    }
    // Free intermediate gradients as soon as they have been propagated.
    grads[idx] = Tensor<Real>();
  }
}

template class Graph<float>;
template class Graph<double>;

}  // namespace dreamrec::num
