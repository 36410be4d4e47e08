#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dreamrec/tensor.hpp"

namespace dreamrec::num {

/// Elementwise nonlinearities understood by the reverse pass.
enum class Activation { kRelu, kTanh, kSigmoid, kGelu, kSilu, kLogSigmoid };

/// Handle to a node of a Graph.
struct Var {
  std::uint32_t id = UINT32_MAX;
  bool valid() const noexcept { return id != UINT32_MAX; }
};

/// Attention-style mask: nonzero entries are excluded from a softmax.
using Mask = std::shared_ptr<const std::vector<std::uint8_t>>;

enum class GradMode { kEnabled, kDisabled };

/// Tape for reverse-mode differentiation over a closed set of primitives:
/// (batched) matrix products, add/sub/mul, scaling, elementwise activations,
/// masked softmax, layer normalization, row gathers (embedding lookup),
/// concatenation and column slices, reshapes, and sum/mean/row reductions.
///
/// A graph is built once per forward pass and discarded afterwards. Parameters
/// are bound by reference; backward() adds dloss/dvalue into Parameter::grad.
template <typename Real>
class Graph {
 public:
  explicit Graph(GradMode mode = GradMode::kEnabled) : mode_(mode) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor<Real> value);
  Var parameter(Parameter<Real>& p);

  const Tensor<Real>& value(Var v) const;
  const Shape& shape(Var v) const { return value(v).shape(); }
  bool requires_grad(Var v) const;
  std::size_t node_count() const noexcept { return nodes_.size(); }

  /// [m,k] x [k,n], or [m,k] x [n,k]^T when transpose_b.
  Var matmul(Var a, Var b, bool transpose_b = false);
  /// [B,m,k] x [B,k,n], or [B,m,k] x [B,n,k]^T when transpose_b.
  Var batch_matmul(Var a, Var b, bool transpose_b = false);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  /// x [m,n] plus bias [n] broadcast over rows.
  Var add_bias(Var x, Var bias);
  Var scale(Var x, Real factor);
  Var activation(Var x, Activation fn);
  /// Softmax over the last axis. Masked entries get probability exactly 0;
  /// a fully masked row is a contract violation.
  Var softmax(Var x, Mask mask = nullptr);
  /// Row-wise layer normalization of x [m,n] with affine gamma/beta [n].
  Var layer_norm(Var x, Var gamma, Var beta, Real eps = Real(1e-5));
  /// Rows of a rank-2 source, in the given order (duplicates allowed).
  Var gather_rows(Var source, std::vector<std::size_t> rows);
  /// Concatenation of rank-2 tensors along axis 0 or 1.
  Var concat(std::span<const Var> parts, std::size_t axis);
  Var slice_cols(Var x, std::size_t begin, std::size_t end);
  Var reshape(Var x, Shape shape);
  Var row_sum(Var x);
  Var row_sq_norm(Var x);
  Var sum(Var x);
  Var mean(Var x);

  /// Forward-only elementwise map. Differentiating through it raises
  /// UnsupportedOpError.
  Var opaque(Var x, std::function<Real(Real)> fn, std::string label);

  /// Accumulates dloss/dparam into every bound parameter. loss must hold a
  /// single value.
  void backward(Var loss);

 private:
  enum class Op {
    kConstant,
    kParameter,
    kMatMul,
    kBatchMatMul,
    kAdd,
    kSub,
    kMul,
    kAddBias,
    kScale,
    kActivation,
    kSoftmax,
    kLayerNorm,
    kGather,
    kConcat,
    kSliceCols,
    kReshape,
    kRowSum,
    kRowSqNorm,
    kSum,
    kMean,
    kOpaque,
  };

  struct Node {
    Op op = Op::kConstant;
    std::vector<std::uint32_t> inputs;
    Tensor<Real> value;
    Parameter<Real>* param = nullptr;
    bool requires_grad = false;
    bool flag = false;
    Real scalar{};
    std::size_t begin = 0;
    std::size_t end = 0;
    Activation act = Activation::kRelu;
    std::vector<std::size_t> rows;
    Mask mask;
    std::vector<Real> saved;
    std::string label;
  };

  Var push(Node node);
  const Node& node(Var v) const;
  void check_rank(Var v, std::size_t rank, const char* op) const;

  GradMode mode_;
  std::vector<Node> nodes_;
};

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace dreamrec::num
