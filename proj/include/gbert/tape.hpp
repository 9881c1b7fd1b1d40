#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <unordered_map>
#include <vector>

#include "gbert/error.hpp"
#include "gbert/param_store.hpp"
#include "gbert/tensor.hpp"

namespace gbert {

/// The closed set of differentiable primitives. Every model computation is a
/// finite DAG over these; each op has a hand-written backward rule that is
/// verified against central finite differences in the test suite.
enum class Op : std::uint8_t {
  kParam,
  kInput,
  kMatMul,
  kAdd,
  kAddScalar,
  kMul,
  kScale,
  kConcat,
  kSlice,
  kSoftmax,
  kSigmoid,
  kTanh,
  kGelu,
  kLeakyRelu,
  kLayerNorm,
  kMean,
  kSum,
  kLog,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kParam: return "param";
    case Op::kInput: return "input";
    case Op::kMatMul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kAddScalar: return "add_scalar";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kConcat: return "concat";
    case Op::kSlice: return "slice";
    case Op::kSoftmax: return "softmax";
    case Op::kSigmoid: return "sigmoid";
    case Op::kTanh: return "tanh";
    case Op::kGelu: return "gelu";
    case Op::kLeakyRelu: return "leaky_relu";
    case Op::kLayerNorm: return "layer_norm";
    case Op::kMean: return "mean";
    case Op::kSum: return "sum";
    case Op::kLog: return "log";
  }
  return "?";
}

/// Eager tape: each operation computes its value on creation and records enough
/// to replay the exact reverse-mode derivative. One tape per training step;
/// nodes are immutable once created. Gradients flow into the bound ParamStore
/// on backward().
template <typename Scalar>
class Tape {
 public:
  using VarId = std::uint32_t;

  explicit Tape(ParamStore<Scalar>* store = nullptr) : store_(store) {}

  // ---------------------------------------------------------------- leaves

  VarId param(const std::string& name) {
    if (store_ == nullptr) {
      throw Error("tape: no parameter store bound");
    }
    const auto it = param_cache_.find(name);
    if (it != param_cache_.end()) {
      return it->second;
    }
    const std::size_t pi = store_->index_of(name);
    Node n;
    n.op = Op::kParam;
    n.param_index = static_cast<int>(pi);
    n.value = store_->entry(pi).value;
    const VarId id = push(std::move(n));
    param_cache_.emplace(name, id);
    return id;
  }

  VarId input(Tensor<Scalar> value) {
    Node n;
    n.op = Op::kInput;
    n.value = std::move(value);
    return push(std::move(n));
  }

  VarId scalar_input(Scalar v) { return input(Tensor<Scalar>::scalar(v)); }

  // ------------------------------------------------------------ primitives

  /// C = opA(A) * opB(B) with optional transposes.
  VarId matmul(VarId a, VarId b, bool trans_a = false, bool trans_b = false) {
    const Tensor<Scalar>& ta = val(a);
    const Tensor<Scalar>& tb = val(b);
    const std::size_t ar = trans_a ? ta.cols() : ta.rows();
    const std::size_t ac = trans_a ? ta.rows() : ta.cols();
    const std::size_t br = trans_b ? tb.cols() : tb.rows();
    const std::size_t bc = trans_b ? tb.rows() : tb.cols();
    if (ac != br) {
      throw ShapeError("matmul: cannot multiply " + Tensor<Scalar>::shape_string(ta.shape) +
                       (trans_a ? "^T" : "") + " by " + Tensor<Scalar>::shape_string(tb.shape) +
                       (trans_b ? "^T" : ""));
    }
    Node n;
    n.op = Op::kMatMul;
    n.inputs = {a, b};
    n.trans_a = trans_a;
    n.trans_b = trans_b;
    n.value = Tensor<Scalar>::zeros({ar, bc});
    matmul_raw(ta.values.data(), ta.rows(), ta.cols(), trans_a, tb.values.data(), tb.rows(),
               tb.cols(), trans_b, n.value.values.data(), false);
    return push(std::move(n));
  }

  /// Elementwise addition; `b` may also be a single row (1, c) broadcast over
  /// the rows of `a`.
  VarId add(VarId a, VarId b) {
    const Tensor<Scalar>& ta = val(a);
    const Tensor<Scalar>& tb = val(b);
    const bool broadcast = !ta.same_shape(tb);
    if (broadcast && !(tb.rows() == 1 && tb.cols() == ta.cols())) {
      throw ShapeError("add: shapes " + Tensor<Scalar>::shape_string(ta.shape) + " and " +
                       Tensor<Scalar>::shape_string(tb.shape) + " are not compatible");
    }
    Node n;
    n.op = Op::kAdd;
    n.inputs = {a, b};
    n.value = ta;
    const std::size_t c = ta.cols();
    for (std::size_t r = 0; r < ta.rows(); ++r) {
      const std::size_t base = r * c;
      const std::size_t bbase = broadcast ? 0 : base;
      for (std::size_t j = 0; j < c; ++j) {
        n.value.values[base + j] += tb.values[bbase + j];
      }
    }
    return push(std::move(n));
  }

  VarId add_scalar(VarId a, Scalar c) {
    Node n;
    n.op = Op::kAddScalar;
    n.inputs = {a};
    n.scalar = c;
    n.value = val(a);
    for (Scalar& v : n.value.values) {
      v += c;
    }
    return push(std::move(n));
  }

  /// Elementwise (Hadamard) product; shapes must match.
  VarId mul(VarId a, VarId b) {
    const Tensor<Scalar>& ta = val(a);
    const Tensor<Scalar>& tb = val(b);
    if (!ta.same_shape(tb)) {
      throw ShapeError("mul: shapes " + Tensor<Scalar>::shape_string(ta.shape) + " and " +
                       Tensor<Scalar>::shape_string(tb.shape) + " differ");
    }
    Node n;
    n.op = Op::kMul;
    n.inputs = {a, b};
    n.value = ta;
    for (std::size_t i = 0; i < tb.numel(); ++i) {
      n.value.values[i] *= tb.values[i];
    }
    return push(std::move(n));
  }

  /// Multiplication by a compile-time-known constant.
  VarId scale(VarId a, Scalar c) {
    Node n;
    n.op = Op::kScale;
    n.inputs = {a};
    n.scalar = c;
    n.value = val(a);
    for (Scalar& v : n.value.values) {
      v *= c;
    }
    return push(std::move(n));
  }

  VarId concat(const std::vector<VarId>& parts, int axis) {
    if (parts.empty()) {
      throw ShapeError("concat: no inputs");
    }
    const Tensor<Scalar>& first = val(parts[0]);
    std::size_t rows = first.rows();
    std::size_t cols = first.cols();
    for (std::size_t i = 1; i < parts.size(); ++i) {
      const Tensor<Scalar>& t = val(parts[i]);
      if (axis == 0) {
        if (t.cols() != cols) {
          throw ShapeError("concat: column mismatch " + std::to_string(t.cols()) + " vs " +
                           std::to_string(cols));
        }
        rows += t.rows();
      } else {
        if (t.rows() != rows) {
          throw ShapeError("concat: row mismatch " + std::to_string(t.rows()) + " vs " +
                           std::to_string(rows));
        }
        cols += t.cols();
      }
    }
    Node n;
    n.op = Op::kConcat;
    n.inputs = parts;
    n.axis = axis;
    n.value = Tensor<Scalar>::zeros({rows, cols});
    if (axis == 0) {
      std::size_t r0 = 0;
      for (const VarId p : parts) {
        const Tensor<Scalar>& t = val(p);
        std::copy(t.values.begin(), t.values.end(), n.value.values.begin() + r0 * cols);
        r0 += t.rows();
      }
    } else {
      std::size_t c0 = 0;
      for (const VarId p : parts) {
        const Tensor<Scalar>& t = val(p);
        for (std::size_t r = 0; r < rows; ++r) {
          std::copy(t.values.begin() + r * t.cols(), t.values.begin() + (r + 1) * t.cols(),
                    n.value.values.begin() + r * cols + c0);
        }
        c0 += t.cols();
      }
    }
    return push(std::move(n));
  }

  /// Contiguous range along rows (axis 0) or columns (axis 1).
  VarId slice(VarId a, int axis, std::size_t start, std::size_t len) {
    const Tensor<Scalar>& ta = val(a);
    const std::size_t extent = axis == 0 ? ta.rows() : ta.cols();
    if (len == 0 || start + len > extent) {
      throw ShapeError("slice: range [" + std::to_string(start) + "," +
                       std::to_string(start + len) + ") exceeds extent " +
                       std::to_string(extent));
    }
    Node n;
    n.op = Op::kSlice;
    n.inputs = {a};
    n.axis = axis;
    n.start = start;
    n.len = len;
    if (axis == 0) {
      n.value = Tensor<Scalar>::zeros({len, ta.cols()});
      std::copy(ta.values.begin() + start * ta.cols(), ta.values.begin() + (start + len) * ta.cols(),
                n.value.values.begin());
    } else {
      n.value = Tensor<Scalar>::zeros({ta.rows(), len});
      for (std::size_t r = 0; r < ta.rows(); ++r) {
        std::copy(ta.values.begin() + r * ta.cols() + start,
                  ta.values.begin() + r * ta.cols() + start + len,
                  n.value.values.begin() + r * len);
      }
    }
    return push(std::move(n));
  }

  /// Softmax along `axis` (1 = within each row, 0 = within each column).
  /// Max-shifted, so the output is exactly invariant to adding a constant
  /// to all logits of a slice.
  VarId softmax(VarId a, int axis) {
    const Tensor<Scalar>& ta = val(a);
    Node n;
    n.op = Op::kSoftmax;
    n.inputs = {a};
    n.axis = axis;
    n.value = ta;
    const std::size_t rows = ta.rows();
    const std::size_t cols = ta.cols();
    const std::size_t n_slices = axis == 1 ? rows : cols;
    const std::size_t slice_len = axis == 1 ? cols : rows;
    const std::size_t stride = axis == 1 ? 1 : cols;
    for (std::size_t s = 0; s < n_slices; ++s) {
      Scalar* base = n.value.values.data() + (axis == 1 ? s * cols : s);
      Scalar mx = base[0];
      for (std::size_t i = 1; i < slice_len; ++i) {
        mx = std::max(mx, base[i * stride]);
      }
      Scalar denom = Scalar(0);
      for (std::size_t i = 0; i < slice_len; ++i) {
        base[i * stride] = std::exp(base[i * stride] - mx);
        denom += base[i * stride];
      }
      for (std::size_t i = 0; i < slice_len; ++i) {
        base[i * stride] /= denom;
      }
    }
    return push(std::move(n));
  }

  VarId sigmoid(VarId a) {
    Node n;
    n.op = Op::kSigmoid;
    n.inputs = {a};
    n.value = val(a);
    for (Scalar& v : n.value.values) {
      v = Scalar(1) / (Scalar(1) + std::exp(-v));
    }
    return push(std::move(n));
  }

  VarId tanh(VarId a) {
    Node n;
    n.op = Op::kTanh;
    n.inputs = {a};
    n.value = val(a);
    for (Scalar& v : n.value.values) {
      v = std::tanh(v);
    }
    return push(std::move(n));
  }

  /// Exact GELU, x * Phi(x) with the Gaussian CDF.
  VarId gelu(VarId a) {
    Node n;
    n.op = Op::kGelu;
    n.inputs = {a};
    n.value = val(a);
    for (Scalar& v : n.value.values) {
      v = v * gauss_cdf(v);
    }
    return push(std::move(n));
  }

  VarId leaky_relu(VarId a, Scalar slope) {
    Node n;
    n.op = Op::kLeakyRelu;
    n.inputs = {a};
    n.scalar = slope;
    n.value = val(a);
    for (Scalar& v : n.value.values) {
      if (v < Scalar(0)) {
        v *= slope;
      }
    }
    return push(std::move(n));
  }

  /// Normalizes each row of `x` over its columns, then applies gain/bias
  /// (each of shape (1, cols)).
  VarId layer_norm(VarId x, VarId gain, VarId bias, Scalar eps = Scalar(1e-12)) {
    const Tensor<Scalar>& tx = val(x);
    const Tensor<Scalar>& tg = val(gain);
    const Tensor<Scalar>& tb = val(bias);
    const std::size_t c = tx.cols();
    if (tg.rows() != 1 || tg.cols() != c || tb.rows() != 1 || tb.cols() != c) {
      throw ShapeError("layer_norm: gain/bias must be (1," + std::to_string(c) + ")");
    }
    Node n;
    n.op = Op::kLayerNorm;
    n.inputs = {x, gain, bias};
    n.scalar = eps;
    n.value = Tensor<Scalar>::zeros(tx.shape);
    n.aux = Tensor<Scalar>::zeros({tx.rows(), c + 1});  // per row: x_hat then 1/std
    for (std::size_t r = 0; r < tx.rows(); ++r) {
      const Scalar* xr = tx.values.data() + r * c;
      Scalar mu = Scalar(0);
      for (std::size_t j = 0; j < c; ++j) {
        mu += xr[j];
      }
      mu /= Scalar(c);
      Scalar var = Scalar(0);
      for (std::size_t j = 0; j < c; ++j) {
        const Scalar d = xr[j] - mu;
        var += d * d;
      }
      var /= Scalar(c);
      const Scalar inv_std = Scalar(1) / std::sqrt(var + eps);
      Scalar* hat = n.aux.values.data() + r * (c + 1);
      hat[c] = inv_std;
      Scalar* out = n.value.values.data() + r * c;
      for (std::size_t j = 0; j < c; ++j) {
        hat[j] = (xr[j] - mu) * inv_std;
        out[j] = tg.values[j] * hat[j] + tb.values[j];
      }
    }
    return push(std::move(n));
  }

  /// Reduce: axis 0 -> (1, c), axis 1 -> (r, 1), axis -1 -> (1, 1).
  VarId mean(VarId a, int axis) { return reduce(a, axis, true); }
  VarId sum(VarId a, int axis) { return reduce(a, axis, false); }

  VarId log(VarId a) {
    Node n;
    n.op = Op::kLog;
    n.inputs = {a};
    n.value = val(a);
    for (Scalar& v : n.value.values) {
      v = std::log(v);
    }
    return push(std::move(n));
  }

  // -------------------------------------------------------------- reverse

  /// Runs reverse-mode differentiation from the scalar `loss` node and
  /// accumulates parameter gradients into the bound store. Returns the loss.
  Scalar backward(VarId loss) {
    const Tensor<Scalar>& lt = val(loss);
    if (lt.numel() != 1) {
      throw ShapeError("backward: loss must be a scalar, got " +
                       Tensor<Scalar>::shape_string(lt.shape));
    }
    for (Node& n : nodes_) {
      n.grad.shape = n.value.shape;
      n.grad.values.assign(n.value.numel(), Scalar(0));
    }
    nodes_[loss].grad.values[0] = Scalar(1);
    for (std::size_t i = loss + 1; i-- > 0;) {
      backward_node(static_cast<VarId>(i));
    }
    if (store_ != nullptr) {
      for (const Node& n : nodes_) {
        if (n.op == Op::kParam) {
          auto& slot = store_->entry(static_cast<std::size_t>(n.param_index)).grad;
          for (std::size_t k = 0; k < slot.numel(); ++k) {
            slot.values[k] += n.grad.values[k];
          }
        }
      }
    }
    return lt.values[0];
  }

  // ------------------------------------------------------------ inspection

  const Tensor<Scalar>& value(VarId id) const { return nodes_[id].value; }
  const Tensor<Scalar>& grad(VarId id) const { return nodes_[id].grad; }
  std::size_t node_count() const { return nodes_.size(); }
  Op op_of(VarId id) const { return nodes_[id].op; }

  /// Fault-injection hook for the finite-difference harness: rescales the
  /// output gradient wherever the given op kind occurs, simulating a broken
  /// backward rule. The gradient check must flag the mismatch.
  void inject_backward_fault(Op op, Scalar scale) {
    fault_op_ = op;
    fault_scale_ = scale;
    fault_active_ = true;
  }

 private:
  struct Node {
    Op op = Op::kInput;
    std::vector<VarId> inputs;
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    Tensor<Scalar> aux;  // layer-norm cache
    bool trans_a = false;
    bool trans_b = false;
    int axis = 0;
    std::size_t start = 0;
    std::size_t len = 0;
    Scalar scalar = Scalar(0);
    int param_index = -1;
  };

  ParamStore<Scalar>* store_;
  std::vector<Node> nodes_;
  std::unordered_map<std::string, VarId> param_cache_;
  Op fault_op_ = Op::kInput;
  Scalar fault_scale_ = Scalar(1);
  bool fault_active_ = false;

  const Tensor<Scalar>& val(VarId id) const {
    if (id >= nodes_.size()) {
      throw Error("tape: invalid node id " + std::to_string(id));
    }
    return nodes_[id].value;
  }

  VarId push(Node&& n) {
    nodes_.push_back(std::move(n));
    return static_cast<VarId>(nodes_.size() - 1);
  }

  VarId reduce(VarId a, int axis, bool divide) {
    const Tensor<Scalar>& ta = val(a);
    Node n;
    n.op = divide ? Op::kMean : Op::kSum;
    n.inputs = {a};
    n.axis = axis;
    const std::size_t rows = ta.rows();
    const std::size_t cols = ta.cols();
    if (axis == 0) {
      n.value = Tensor<Scalar>::zeros({1, cols});
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < cols; ++j) {
          n.value.values[j] += ta.values[r * cols + j];
        }
      }
      if (divide) {
        for (Scalar& v : n.value.values) {
          v /= Scalar(rows);
        }
      }
    } else if (axis == 1) {
      n.value = Tensor<Scalar>::zeros({rows, 1});
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < cols; ++j) {
          n.value.values[r] += ta.values[r * cols + j];
        }
      }
      if (divide) {
        for (Scalar& v : n.value.values) {
          v /= Scalar(cols);
        }
      }
    } else {
      n.value = Tensor<Scalar>::zeros({1, 1});
      for (const Scalar v : ta.values) {
        n.value.values[0] += v;
      }
      if (divide) {
        n.value.values[0] /= Scalar(ta.numel());
      }
    }
    return push(std::move(n));
  }

  static Scalar gauss_cdf(Scalar x) {
    return Scalar(0.5) * (Scalar(1) + std::erf(x * Scalar(0.7071067811865475244)));
  }

  static Scalar gauss_pdf(Scalar x) {
    return Scalar(0.3989422804014326779) * std::exp(Scalar(-0.5) * x * x);
  }

  using EMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const EMat>;
  using MMap = Eigen::Map<EMat>;

  static void matmul_raw(const Scalar* a, std::size_t ar, std::size_t ac, bool ta,
                         const Scalar* b, std::size_t br, std::size_t bc, bool tb, Scalar* out,
                         bool accumulate) {
    CMap ma(a, static_cast<Eigen::Index>(ar), static_cast<Eigen::Index>(ac));
    CMap mb(b, static_cast<Eigen::Index>(br), static_cast<Eigen::Index>(bc));
    const std::size_t out_r = ta ? ac : ar;
    const std::size_t out_c = tb ? br : bc;
    MMap mo(out, static_cast<Eigen::Index>(out_r), static_cast<Eigen::Index>(out_c));
    if (!ta && !tb) {
      if (accumulate) mo.noalias() += ma * mb; else mo.noalias() = ma * mb;
    } else if (ta && !tb) {
      if (accumulate) mo.noalias() += ma.transpose() * mb; else mo.noalias() = ma.transpose() * mb;
    } else if (!ta && tb) {
      if (accumulate) mo.noalias() += ma * mb.transpose(); else mo.noalias() = ma * mb.transpose();
    } else {
      if (accumulate) mo.noalias() += ma.transpose() * mb.transpose();
      else mo.noalias() = ma.transpose() * mb.transpose();
    }
  }

  void backward_node(VarId id) {
    Node& n = nodes_[id];
    if (n.op == Op::kParam || n.op == Op::kInput) {
      return;
    }
    if (fault_active_ && n.op == fault_op_) {
      for (Scalar& g : n.grad.values) {
        g *= fault_scale_;
      }
    }
    const Tensor<Scalar>& gy = n.grad;
    switch (n.op) {
      case Op::kMatMul: {
        const Node& na = nodes_[n.inputs[0]];
        const Node& nb = nodes_[n.inputs[1]];
        Tensor<Scalar>& ga = nodes_[n.inputs[0]].grad;
        Tensor<Scalar>& gb = nodes_[n.inputs[1]].grad;
        // dA_op = dC * opB(B)^T, dB_op = opA(A)^T * dC, transposed back as needed.
        if (!n.trans_a) {
          matmul_raw(gy.values.data(), gy.rows(), gy.cols(), false, nb.value.values.data(),
                     nb.value.rows(), nb.value.cols(), !n.trans_b, ga.values.data(), true);
        } else {
          // dA = (dC * opB(B)^T)^T = opB(B) * dC^T
          matmul_raw(nb.value.values.data(), nb.value.rows(), nb.value.cols(), n.trans_b,
                     gy.values.data(), gy.rows(), gy.cols(), true, ga.values.data(), true);
        }
        if (!n.trans_b) {
          matmul_raw(na.value.values.data(), na.value.rows(), na.value.cols(), !n.trans_a,
                     gy.values.data(), gy.rows(), gy.cols(), false, gb.values.data(), true);
        } else {
          // dB = (opA(A)^T * dC)^T = dC^T * opA(A)
          matmul_raw(gy.values.data(), gy.rows(), gy.cols(), true, na.value.values.data(),
                     na.value.rows(), na.value.cols(), n.trans_a, gb.values.data(), true);
        }
        break;
      }
      case Op::kAdd: {
        Tensor<Scalar>& ga = nodes_[n.inputs[0]].grad;
        Tensor<Scalar>& gb = nodes_[n.inputs[1]].grad;
        for (std::size_t i = 0; i < gy.numel(); ++i) {
          ga.values[i] += gy.values[i];
        }
        if (gb.same_shape(gy)) {
          for (std::size_t i = 0; i < gy.numel(); ++i) {
            gb.values[i] += gy.values[i];
          }
        } else {  // row broadcast: sum over rows
          const std::size_t c = gy.cols();
          for (std::size_t r = 0; r < gy.rows(); ++r) {
            for (std::size_t j = 0; j < c; ++j) {
              gb.values[j] += gy.values[r * c + j];
            }
          }
        }
        break;
      }
      case Op::kAddScalar: {
        Tensor<Scalar>& ga = nodes_[n.inputs[0]].grad;
        for (std::size_t i = 0; i < gy.numel(); ++i) {
          ga.values[i] += gy.values[i];
        }
        break;
      }
      case Op::kMul: {
        Tensor<Scalar>& ga = nodes_[n.inputs[0]].grad;
        Tensor<Scalar>& gb = nodes_[n.inputs[1]].grad;
        const Tensor<Scalar>& va = nodes_[n.inputs[0]].value;
        const Tensor<Scalar>& vb = nodes_[n.inputs[1]].value;
        for (std::size_t i = 0; i < gy.numel(); ++i) {
          ga.values[i] += gy.values[i] * vb.values[i];
          gb.values[i] += gy.values[i] * va.values[i];
        }
        break;
      }
      case Op::kScale: {
        Tensor<Scalar>& ga = nodes_[n.inputs[0]].grad;
        for (std::size_t i = 0; i < gy.numel(); ++i) {
          ga.values[i] += gy.values[i] * n.scalar;
        }
        break;
      }
      case Op::kConcat: {
        const std::size_t cols = n.value.cols();
        if (n.axis == 0) {
          std::size_t r0 = 0;
          for (const VarId p : n.inputs) {
            Tensor<Scalar>& gp = nodes_[p].grad;
            for (std::size_t i = 0; i < gp.numel(); ++i) {
              gp.values[i] += gy.values[r0 * cols + i];
            }
            r0 += gp.rows();
          }
        } else {
          std::size_t c0 = 0;
          for (const VarId p : n.inputs) {
            Tensor<Scalar>& gp = nodes_[p].grad;
            const std::size_t pc = gp.cols();
            for (std::size_t r = 0; r < gp.rows(); ++r) {
              for (std::size_t j = 0; j < pc; ++j) {
                gp.values[r * pc + j] += gy.values[r * cols + c0 + j];
              }
            }
            c0 += pc;
          }
        }
        break;
      }
      case Op::kSlice: {
        Tensor<Scalar>& ga = nodes_[n.inputs[0]].grad;
        const std::size_t ac = ga.cols();
        if (n.axis == 0) {
          for (std::size_t i = 0; i < gy.numel(); ++i) {
            ga.values[n.start * ac + i] += gy.values[i];
          }
        } else {
          for (std::size_t r = 0; r < gy.rows(); ++r) {
            for (std::size_t j = 0; j < n.len; ++j) {
              ga.values[r * ac + n.start + j] += gy.values[r * n.len + j];
            }
          }
        }
        break;
      }
      case Op::kSoftmax: {
        Tensor<Scalar>& ga = nodes_[n.inputs[0]].grad;
        const Tensor<Scalar>& y = n.value;
        const std::size_t rows = y.rows();
        const std::size_t cols = y.cols();
        const std::size_t n_slices = n.axis == 1 ? rows : cols;
        const std::size_t slice_len = n.axis == 1 ? cols : rows;
        const std::size_t stride = n.axis == 1 ? 1 : cols;
        for (std::size_t s = 0; s < n_slices; ++s) {
          const std::size_t off = n.axis == 1 ? s * cols : s;
          Scalar dot = Scalar(0);
          for (std::size_t i = 0; i < slice_len; ++i) {
            dot += gy.values[off + i * stride] * y.values[off + i * stride];
          }
          for (std::size_t i = 0; i < slice_len; ++i) {
            ga.values[off + i * stride] +=
                (gy.values[off + i * stride] - dot) * y.values[off + i * stride];
          }
        }
        break;
      }
      case Op::kSigmoid: {
        Tensor<Scalar>& ga = nodes_[n.inputs[0]].grad;
        for (std::size_t i = 0; i < gy.numel(); ++i) {
          const Scalar y = n.value.values[i];
          ga.values[i] += gy.values[i] * y * (Scalar(1) - y);
        }
        break;
      }
      case Op::kTanh: {
        Tensor<Scalar>& ga = nodes_[n.inputs[0]].grad;
        for (std::size_t i = 0; i < gy.numel(); ++i) {
          const Scalar y = n.value.values[i];
          ga.values[i] += gy.values[i] * (Scalar(1) - y * y);
        }
        break;
      }
      case Op::kGelu: {
        Tensor<Scalar>& ga = nodes_[n.inputs[0]].grad;
        const Tensor<Scalar>& x = nodes_[n.inputs[0]].value;
        for (std::size_t i = 0; i < gy.numel(); ++i) {
          const Scalar xi = x.values[i];
          ga.values[i] += gy.values[i] * (gauss_cdf(xi) + xi * gauss_pdf(xi));
        }
        break;
      }
      case Op::kLeakyRelu: {
        Tensor<Scalar>& ga = nodes_[n.inputs[0]].grad;
        const Tensor<Scalar>& x = nodes_[n.inputs[0]].value;
        for (std::size_t i = 0; i < gy.numel(); ++i) {
          ga.values[i] += gy.values[i] * (x.values[i] < Scalar(0) ? n.scalar : Scalar(1));
        }
        break;
      }
      case Op::kLayerNorm: {
        Tensor<Scalar>& gx = nodes_[n.inputs[0]].grad;
        Tensor<Scalar>& gg = nodes_[n.inputs[1]].grad;
        Tensor<Scalar>& gb = nodes_[n.inputs[2]].grad;
        const Tensor<Scalar>& gain = nodes_[n.inputs[1]].value;
        const std::size_t c = n.value.cols();
        for (std::size_t r = 0; r < n.value.rows(); ++r) {
          const Scalar* hat = n.aux.values.data() + r * (c + 1);
          const Scalar inv_std = hat[c];
          const Scalar* dy = gy.values.data() + r * c;
          Scalar g_mean = Scalar(0);
          Scalar gh_mean = Scalar(0);
          for (std::size_t j = 0; j < c; ++j) {
            const Scalar g = dy[j] * gain.values[j];
            g_mean += g;
            gh_mean += g * hat[j];
            gg.values[j] += dy[j] * hat[j];
            gb.values[j] += dy[j];
          }
          g_mean /= Scalar(c);
          gh_mean /= Scalar(c);
          Scalar* dx = gx.values.data() + r * c;
          for (std::size_t j = 0; j < c; ++j) {
            const Scalar g = dy[j] * gain.values[j];
            dx[j] += inv_std * (g - g_mean - hat[j] * gh_mean);
          }
        }
        break;
      }
      case Op::kMean:
      case Op::kSum: {
        Tensor<Scalar>& ga = nodes_[n.inputs[0]].grad;
        const std::size_t rows = ga.rows();
        const std::size_t cols = ga.cols();
        Scalar denom = Scalar(1);
        if (n.op == Op::kMean) {
          denom = n.axis == 0   ? Scalar(rows)
                  : n.axis == 1 ? Scalar(cols)
                                : Scalar(ga.numel());
        }
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < cols; ++j) {
            const Scalar g = n.axis == 0   ? gy.values[j]
                             : n.axis == 1 ? gy.values[r]
                                           : gy.values[0];
            ga.values[r * cols + j] += g / denom;
          }
        }
        break;
      }
      case Op::kLog: {
        Tensor<Scalar>& ga = nodes_[n.inputs[0]].grad;
        const Tensor<Scalar>& x = nodes_[n.inputs[0]].value;
        for (std::size_t i = 0; i < gy.numel(); ++i) {
          ga.values[i] += gy.values[i] / x.values[i];
        }
        break;
      }
      default:
        break;
    }
  }
};

/// Builds the computation described by `build` on a fresh tape bound to
/// `params`, checks the result is scalar, and runs the reverse pass.
/// Gradients accumulate into the store's gradient slots (callers zero them
/// first when starting a new step).
template <typename Scalar>
Scalar forward_backward(ParamStore<Scalar>& params,
                        const std::function<typename Tape<Scalar>::VarId(Tape<Scalar>&)>& build) {
  Tape<Scalar> tape(&params);
  const auto loss = build(tape);
  return tape.backward(loss);
}

/// Forward-only evaluation of a scalar computation (used by the
/// finite-difference harness).
template <typename Scalar>
Scalar forward_value(ParamStore<Scalar>& params,
                     const std::function<typename Tape<Scalar>::VarId(Tape<Scalar>&)>& build) {
  Tape<Scalar> tape(&params);
  const auto loss = build(tape);
  if (tape.value(loss).numel() != 1) {
    throw ShapeError("forward_value: loss must be a scalar");
  }
  return tape.value(loss).values[0];
}

}  // namespace gbert
