#pragma once

// Reverse-mode differentiation over a closed set of matrix-valued primitives.
//
// Every node holds a row-major matrix. Batched quantities keep one datum per
// row; a batch of H x H covariance matrices is stored as B x (H*H) with entry
// (j, l) of datum b at column j*H + l.
//
// A tape records one forward pass and supports exactly one backward pass.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "dvi/errors.hpp"
#include "dvi/specials.hpp"

namespace dvi::grad {


enum class Op {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kNeg,
  kMatMul,
  kExp,
  kLog,
  kSqrt,
  kSquare,
  kArcsin,
  kNormPdf,
  kNormCdf,
  kSoftRelu,
  kHeaviside,
  kLogSumExp,  // row-wise, B x K -> B x 1
  kSum,        // all entries -> 1 x 1
  kClamp,
  // layout primitives for batched covariance blocks
  kExpandRow,       // B x H -> B x H^2, out(j, l) = x(j)
  kExpandCol,       // B x H -> B x H^2, out(j, l) = x(l)
  kDiagPart,        // B x H^2 -> B x H
  kDiagEmbed,       // B x H -> B x H^2
  kCongruence,      // (B x H^2, H x K) -> B x K^2, W^T C_b W
  kBatchedMatMul,   // (B x H^2, H x K) -> B x (H*K), C_b W
  kBatchedTranspose,
  kSelectCols,
  kCustom,  // fused kernel supplied through OpAttrs::custom
  kCount
};

const char* op_name(Op op);

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using SquareMap = Eigen::Map<Mat>;
using ConstSquareMap = Eigen::Map<const Mat>;

// A primitive defined outside the tape: a forward map and its vector-Jacobian
// product. backward fills grads[k] (same shape as input k) where wants[k].
struct CustomPrimitive {
  virtual ~CustomPrimitive() = default;
  virtual const char* name() const = 0;
  virtual Mat forward(const std::vector<const Mat*>& in) const = 0;
  virtual void backward(const std::vector<const Mat*>& in, const Mat& out, const Mat& g,
                        const std::vector<bool>& wants, std::vector<Mat>& grads) const = 0;
};

struct OpAttrs {
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();
  std::vector<int> cols;
  std::shared_ptr<const CustomPrimitive> custom;
};

class Tape;

// Lightweight handle to a tape node.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
};

using GradientMap = std::map<std::string, Mat>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Differentiable leaf registered under a unique name.
  Var param(const std::string& name, Mat value);
  Var constant(Mat value);
  Var scalar(double v) { return constant(Mat::Constant(1, 1, v)); }

  Var record(Op op, std::vector<Var> inputs, OpAttrs attrs = {});

  const Mat& value(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).value; }
  double scalar_value(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  // Accumulates adjoints from a 1 x 1 root back to every parameter leaf.
  GradientMap backward(Var root);

  // Whether the node depends on any parameter leaf.
  bool needs_grad(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).needs_grad; }

 private:
  struct Node {
    Op op = Op::kLeaf;
    std::vector<int> inputs;
    OpAttrs attrs;
    Mat value;
    bool needs_grad = false;
    std::string param_name;  // non-empty for parameters
  };

  Var push(Node n);
  Mat forward(Op op, const std::vector<Var>& in, const OpAttrs& attrs) const;
  void propagate(const Node& n, const Mat& g, std::vector<Mat>& adj) const;

  std::vector<Node> nodes_;
  std::map<std::string, int> params_;
  bool backward_done_ = false;
};

// --- convenience wrappers -------------------------------------------------

inline Var record1(Op op, Var a, OpAttrs attrs = {}) { return a.tape->record(op, {a}, std::move(attrs)); }
inline Var record2(Op op, Var a, Var b) { return a.tape->record(op, {a, b}); }

inline Var operator+(Var a, Var b) { return record2(Op::kAdd, a, b); }
inline Var operator-(Var a, Var b) { return record2(Op::kSub, a, b); }
inline Var operator*(Var a, Var b) { return record2(Op::kMul, a, b); }
inline Var operator/(Var a, Var b) { return record2(Op::kDiv, a, b); }
inline Var operator-(Var a) { return record1(Op::kNeg, a); }
inline Var operator+(Var a, double c) { return a + a.tape->scalar(c); }
inline Var operator+(double c, Var a) { return a.tape->scalar(c) + a; }
inline Var operator-(Var a, double c) { return a - a.tape->scalar(c); }
inline Var operator-(double c, Var a) { return a.tape->scalar(c) - a; }
inline Var operator*(double c, Var a) { return a.tape->scalar(c) * a; }
inline Var operator*(Var a, double c) { return a * a.tape->scalar(c); }
inline Var operator/(Var a, double c) { return a / a.tape->scalar(c); }

inline Var matmul(Var a, Var b) { return record2(Op::kMatMul, a, b); }
inline Var exp(Var a) { return record1(Op::kExp, a); }
inline Var log(Var a) { return record1(Op::kLog, a); }
inline Var sqrt(Var a) { return record1(Op::kSqrt, a); }
inline Var square(Var a) { return record1(Op::kSquare, a); }
inline Var arcsin(Var a) { return record1(Op::kArcsin, a); }
inline Var norm_pdf(Var a) { return record1(Op::kNormPdf, a); }
inline Var norm_cdf(Var a) { return record1(Op::kNormCdf, a); }
inline Var soft_relu(Var a) { return record1(Op::kSoftRelu, a); }
inline Var heaviside(Var a) { return record1(Op::kHeaviside, a); }
inline Var log_sum_exp_rows(Var a) { return record1(Op::kLogSumExp, a); }
inline Var sum(Var a) { return record1(Op::kSum, a); }
inline Var clamp(Var a, double lo, double hi) { return record1(Op::kClamp, a, OpAttrs{lo, hi, {}}); }
inline Var relu(Var a) { return clamp(a, 0.0, std::numeric_limits<double>::infinity()); }
inline Var expand_row(Var a) { return record1(Op::kExpandRow, a); }
inline Var expand_col(Var a) { return record1(Op::kExpandCol, a); }
inline Var diag_part(Var a) { return record1(Op::kDiagPart, a); }
inline Var diag_embed(Var a) { return record1(Op::kDiagEmbed, a); }
inline Var congruence(Var c, Var w) { return record2(Op::kCongruence, c, w); }
inline Var batched_matmul(Var c, Var w) { return record2(Op::kBatchedMatMul, c, w); }
inline Var batched_transpose(Var c) { return record1(Op::kBatchedTranspose, c); }
inline Var select_cols(Var a, std::vector<int> cols) {
  return record1(Op::kSelectCols, a, OpAttrs{0.0, 0.0, std::move(cols), nullptr});
}
inline Var custom(std::shared_ptr<const CustomPrimitive> prim, std::vector<Var> inputs) {
  if (inputs.empty()) throw StructuralError("custom: no inputs");
  Tape* t = inputs.front().tape;
  return t->record(Op::kCustom, std::move(inputs), OpAttrs{0.0, 0.0, {}, std::move(prim)});
}

// --- implementation -------------------------------------------------------

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kSub: return "subtract";
    case Op::kMul: return "multiply";
    case Op::kDiv: return "divide";
    case Op::kNeg: return "negate";
    case Op::kMatMul: return "matmul";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSqrt: return "sqrt";
    case Op::kSquare: return "square";
    case Op::kArcsin: return "arcsin";
    case Op::kNormPdf: return "std_normal_pdf";
    case Op::kNormCdf: return "std_normal_cdf";
    case Op::kSoftRelu: return "soft_relu";
    case Op::kHeaviside: return "heaviside";
    case Op::kLogSumExp: return "logsumexp";
    case Op::kSum: return "sum";
    case Op::kClamp: return "clamp";
    case Op::kExpandRow: return "expand_row";
    case Op::kExpandCol: return "expand_col";
    case Op::kDiagPart: return "diag_part";
    case Op::kDiagEmbed: return "diag_embed";
    case Op::kCongruence: return "congruence";
    case Op::kBatchedMatMul: return "batched_matmul";
    case Op::kBatchedTranspose: return "batched_transpose";
    case Op::kSelectCols: return "select_cols";
    case Op::kCustom: return "custom";
    case Op::kCount: break;
  }
  return "unknown";
}

namespace impl {

inline int arity(Op op) {
  switch (op) {
    case Op::kAdd:
    case Op::kSub:
    case Op::kMul:
    case Op::kDiv:
    case Op::kMatMul:
    case Op::kCongruence:
    case Op::kBatchedMatMul:
      return 2;
    case Op::kCustom:
      return 0;  // any positive count
    case Op::kLeaf:
    case Op::kCount:
      return -1;
    default:
      return 1;
  }
}

inline bool is_binary_elementwise(Op op) {
  return op == Op::kAdd || op == Op::kSub || op == Op::kMul || op == Op::kDiv;
}

// Broadcasts x to rows x cols. Allowed sources: same shape, 1 x 1, 1 x cols, rows x 1.
inline Mat broadcast(const Mat& x, Eigen::Index rows, Eigen::Index cols) {
  if (x.rows() == rows && x.cols() == cols) return x;
  if (x.rows() == 1 && x.cols() == 1) return Mat::Constant(rows, cols, x(0, 0));
  if (x.rows() == 1 && x.cols() == cols) return x.replicate(rows, 1);
  if (x.cols() == 1 && x.rows() == rows) return x.replicate(1, cols);
  throw StructuralError("broadcast: incompatible shapes");
}

// Reverses broadcast by summing g down to the shape of the source.
inline Mat reduce_to(const Mat& g, Eigen::Index rows, Eigen::Index cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  if (rows == 1 && cols == 1) return Mat::Constant(1, 1, g.sum());
  if (rows == 1 && cols == g.cols()) return g.colwise().sum();
  if (cols == 1 && rows == g.rows()) return g.rowwise().sum();
  throw StructuralError("reduce_to: incompatible shapes");
}

inline std::pair<Eigen::Index, Eigen::Index> broadcast_shape(const Mat& a, const Mat& b) {
  const Eigen::Index r = std::max(a.rows(), b.rows());
  const Eigen::Index c = std::max(a.cols(), b.cols());
  auto ok = [&](const Mat& x) {
    return (x.rows() == r || x.rows() == 1) && (x.cols() == c || x.cols() == 1);
  };
  if (!ok(a) || !ok(b)) {
    throw StructuralError("elementwise op: shapes " + std::to_string(a.rows()) + "x" +
                          std::to_string(a.cols()) + " and " + std::to_string(b.rows()) + "x" +
                          std::to_string(b.cols()) + " do not broadcast");
  }
  return {r, c};
}

inline Eigen::Index square_side(Eigen::Index flat) {
  const auto h = static_cast<Eigen::Index>(std::llround(std::sqrt(static_cast<double>(flat))));
  if (h * h != flat) throw StructuralError("covariance block width is not a perfect square");
  return h;
}

inline constexpr double kArcsinGradLimit = 1.0 - 1e-9;

}  // namespace impl

inline Var Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

inline Var Tape::param(const std::string& name, Mat value) {
  if (params_.count(name) != 0) throw StructuralError("duplicate parameter block: " + name);
  Node n;
  n.value = std::move(value);
  n.needs_grad = true;
  n.param_name = name;
  Var v = push(std::move(n));
  params_[name] = v.id;
  return v;
}

inline Var Tape::constant(Mat value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

inline double Tape::scalar_value(Var v) const {
  const Mat& m = value(v);
  if (m.rows() != 1 || m.cols() != 1) throw StructuralError("scalar_value: node is not 1 x 1");
  return m(0, 0);
}

inline Var Tape::record(Op op, std::vector<Var> inputs, OpAttrs attrs) {
  const int expected = impl::arity(op);
  if (expected < 0) throw StructuralError(std::string("record: unknown primitive ") + op_name(op));
  if (expected == 0 ? inputs.empty() : static_cast<int>(inputs.size()) != expected) {
    throw StructuralError(std::string("record: wrong input count for ") + op_name(op));
  }
  for (const Var& in : inputs) {
    if (in.tape != this || in.id < 0 || static_cast<std::size_t>(in.id) >= nodes_.size()) {
      throw StructuralError(std::string("record: input not on this tape for ") + op_name(op));
    }
  }
  Node n;
  n.op = op;
  n.value = forward(op, inputs, attrs);
  for (const Var& in : inputs) {
    n.inputs.push_back(in.id);
    n.needs_grad = n.needs_grad || nodes_[static_cast<std::size_t>(in.id)].needs_grad;
  }
  n.attrs = std::move(attrs);
  return push(std::move(n));
}

inline Mat Tape::forward(Op op, const std::vector<Var>& in, const OpAttrs& attrs) const {
  auto val = [&](std::size_t k) -> const Mat& { return value(in[k]); };
  if (op == Op::kCustom) {
    if (!attrs.custom) throw StructuralError("custom: missing primitive");
    std::vector<const Mat*> xs;
    for (std::size_t k = 0; k < in.size(); ++k) xs.push_back(&val(k));
    return attrs.custom->forward(xs);
  }
  if (impl::is_binary_elementwise(op)) {
    const auto [r, c] = impl::broadcast_shape(val(0), val(1));
    const Mat a = impl::broadcast(val(0), r, c);
    const Mat b = impl::broadcast(val(1), r, c);
    switch (op) {
      case Op::kAdd: return a + b;
      case Op::kSub: return a - b;
      case Op::kMul: return a.cwiseProduct(b);
      default: return a.cwiseQuotient(b);
    }
  }
  const Mat& x = val(0);
  switch (op) {
    case Op::kNeg: return -x;
    case Op::kMatMul:
      if (x.cols() != val(1).rows()) throw StructuralError("matmul: inner dimensions differ");
      return x * val(1);
    case Op::kExp: return x.array().exp().matrix();
    case Op::kLog: return x.array().log().matrix();
    case Op::kSqrt: return x.array().sqrt().matrix();
    case Op::kSquare: return x.array().square().matrix();
    case Op::kArcsin: return x.unaryExpr([](double t) { return std::asin(t); });
    case Op::kNormPdf: return x.unaryExpr([](double t) { return std_normal_pdf(t); });
    case Op::kNormCdf: return x.unaryExpr([](double t) { return std_normal_cdf(t); });
    case Op::kSoftRelu: return x.unaryExpr([](double t) { return dvi::soft_relu(t); });
    case Op::kHeaviside: return x.unaryExpr([](double t) { return t > 0.0 ? 1.0 : 0.0; });
    case Op::kLogSumExp: {
      Mat out(x.rows(), 1);
      for (Eigen::Index b = 0; b < x.rows(); ++b) {
        const double m = x.row(b).maxCoeff();
        out(b, 0) = m + std::log((x.row(b).array() - m).exp().sum());
      }
      return out;
    }
    case Op::kSum: return Mat::Constant(1, 1, x.sum());
    case Op::kClamp: return x.cwiseMax(attrs.lo).cwiseMin(attrs.hi);
    case Op::kExpandRow: {
      const Eigen::Index h = x.cols();
      Mat out(x.rows(), h * h);
      for (Eigen::Index b = 0; b < x.rows(); ++b)
        for (Eigen::Index j = 0; j < h; ++j) out.row(b).segment(j * h, h).setConstant(x(b, j));
      return out;
    }
    case Op::kExpandCol: {
      const Eigen::Index h = x.cols();
      Mat out(x.rows(), h * h);
      for (Eigen::Index b = 0; b < x.rows(); ++b)
        for (Eigen::Index j = 0; j < h; ++j) out.row(b).segment(j * h, h) = x.row(b);
      return out;
    }
    case Op::kDiagPart: {
      const Eigen::Index h = impl::square_side(x.cols());
      Mat out(x.rows(), h);
      for (Eigen::Index b = 0; b < x.rows(); ++b)
        for (Eigen::Index j = 0; j < h; ++j) out(b, j) = x(b, j * h + j);
      return out;
    }
    case Op::kDiagEmbed: {
      const Eigen::Index h = x.cols();
      Mat out = Mat::Zero(x.rows(), h * h);
      for (Eigen::Index b = 0; b < x.rows(); ++b)
        for (Eigen::Index j = 0; j < h; ++j) out(b, j * h + j) = x(b, j);
      return out;
    }
    case Op::kCongruence: {
      const Mat& w = val(1);
      const Eigen::Index h = impl::square_side(x.cols());
      if (w.rows() != h) throw StructuralError("congruence: weight rows differ from block side");
      const Eigen::Index k = w.cols();
      Mat out(x.rows(), k * k);
      for (Eigen::Index b = 0; b < x.rows(); ++b) {
        ConstSquareMap c(x.row(b).data(), h, h);
        SquareMap o(out.row(b).data(), k, k);
        o.noalias() = w.transpose() * (c * w);
      }
      return out;
    }
    case Op::kBatchedMatMul: {
      const Mat& w = val(1);
      const Eigen::Index h = impl::square_side(x.cols());
      if (w.rows() != h) throw StructuralError("batched_matmul: weight rows differ from block side");
      const Eigen::Index k = w.cols();
      Mat out(x.rows(), h * k);
      for (Eigen::Index b = 0; b < x.rows(); ++b) {
        ConstSquareMap c(x.row(b).data(), h, h);
        SquareMap o(out.row(b).data(), h, k);
        o.noalias() = c * w;
      }
      return out;
    }
    case Op::kBatchedTranspose: {
      const Eigen::Index h = impl::square_side(x.cols());
      Mat out(x.rows(), h * h);
      for (Eigen::Index b = 0; b < x.rows(); ++b) {
        ConstSquareMap c(x.row(b).data(), h, h);
        SquareMap o(out.row(b).data(), h, h);
        o = c.transpose();
      }
      return out;
    }
    case Op::kSelectCols: {
      Mat out(x.rows(), static_cast<Eigen::Index>(attrs.cols.size()));
      for (std::size_t k = 0; k < attrs.cols.size(); ++k) {
        const int c = attrs.cols[k];
        if (c < 0 || c >= x.cols()) throw StructuralError("select_cols: column out of range");
        out.col(static_cast<Eigen::Index>(k)) = x.col(c);
      }
      return out;
    }
    default:
      throw StructuralError(std::string("forward: unsupported primitive ") + op_name(op));
  }
}

// Adds the vector-Jacobian products of node n (adjoint g) into adj.
inline void Tape::propagate(const Node& n, const Mat& g, std::vector<Mat>& adj) const {
  auto in_val = [&](std::size_t k) -> const Mat& { return nodes_[static_cast<std::size_t>(n.inputs[k])].value; };
  auto wants = [&](std::size_t k) { return nodes_[static_cast<std::size_t>(n.inputs[k])].needs_grad; };
  auto accumulate = [&](std::size_t k, const Mat& contrib) {
    Mat& dst = adj[static_cast<std::size_t>(n.inputs[k])];
    if (dst.size() == 0) {
      dst = contrib;
    } else {
      dst += contrib;
    }
  };
  if (n.op == Op::kCustom) {
    std::vector<const Mat*> xs;
    std::vector<bool> w;
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      xs.push_back(&in_val(k));
      w.push_back(wants(k));
    }
    std::vector<Mat> grads(n.inputs.size());
    n.attrs.custom->backward(xs, n.value, g, w, grads);
    for (std::size_t k = 0; k < grads.size(); ++k)
      if (w[k]) accumulate(k, grads[k]);
    return;
  }
  const Mat& x = in_val(0);
  const Mat& y = n.value;

  if (impl::is_binary_elementwise(n.op)) {
    const Mat& bv = in_val(1);
    const Eigen::Index r = g.rows(), c = g.cols();
    if (n.op == Op::kAdd || n.op == Op::kSub) {
      if (wants(0)) accumulate(0, impl::reduce_to(g, x.rows(), x.cols()));
      if (wants(1)) accumulate(1, impl::reduce_to(n.op == Op::kAdd ? g : Mat(-g), bv.rows(), bv.cols()));
      return;
    }
    const Mat a = impl::broadcast(x, r, c);
    const Mat b = impl::broadcast(bv, r, c);
    if (n.op == Op::kMul) {
      if (wants(0)) accumulate(0, impl::reduce_to(g.cwiseProduct(b), x.rows(), x.cols()));
      if (wants(1)) accumulate(1, impl::reduce_to(g.cwiseProduct(a), bv.rows(), bv.cols()));
    } else {
      const Mat ga = g.cwiseQuotient(b);
      if (wants(0)) accumulate(0, impl::reduce_to(ga, x.rows(), x.cols()));
      if (wants(1)) accumulate(1, impl::reduce_to(Mat(-ga.cwiseProduct(y)), bv.rows(), bv.cols()));
    }
    return;
  }

  switch (n.op) {
    case Op::kNeg: accumulate(0, -g); break;
    case Op::kMatMul: {
      const Mat& w = in_val(1);
      if (wants(0)) accumulate(0, g * w.transpose());
      if (wants(1)) accumulate(1, x.transpose() * g);
      break;
    }
    case Op::kExp: accumulate(0, g.cwiseProduct(y)); break;
    case Op::kLog: accumulate(0, g.cwiseQuotient(x)); break;
    case Op::kSqrt: accumulate(0, (0.5 * g.array() / y.array()).matrix()); break;
    case Op::kSquare: accumulate(0, (2.0 * g.array() * x.array()).matrix()); break;
    case Op::kArcsin: {
      Mat d = x.unaryExpr([](double t) {
        const double c = std::clamp(t, -impl::kArcsinGradLimit, impl::kArcsinGradLimit);
        return 1.0 / std::sqrt(1.0 - c * c);
      });
      accumulate(0, g.cwiseProduct(d));
      break;
    }
    case Op::kNormPdf: accumulate(0, (-g.array() * x.array() * y.array()).matrix()); break;
    case Op::kNormCdf:
      accumulate(0, g.cwiseProduct(x.unaryExpr([](double t) { return std_normal_pdf(t); })));
      break;
    case Op::kSoftRelu:
      accumulate(0, g.cwiseProduct(x.unaryExpr([](double t) { return std_normal_cdf(t); })));
      break;
    case Op::kHeaviside: break;  // zero almost everywhere
    case Op::kLogSumExp: {
      Mat d(x.rows(), x.cols());
      for (Eigen::Index b = 0; b < x.rows(); ++b) {
        d.row(b) = (x.row(b).array() - y(b, 0)).exp().matrix() * g(b, 0);
      }
      accumulate(0, d);
      break;
    }
    case Op::kSum: accumulate(0, Mat::Constant(x.rows(), x.cols(), g(0, 0))); break;
    case Op::kClamp: {
      const double lo = n.attrs.lo, hi = n.attrs.hi;
      Mat d = g;
      for (Eigen::Index i = 0; i < x.rows(); ++i)
        for (Eigen::Index j = 0; j < x.cols(); ++j)
          if (x(i, j) < lo || x(i, j) > hi) d(i, j) = 0.0;
      accumulate(0, d);
      break;
    }
    case Op::kExpandRow: {
      const Eigen::Index h = x.cols();
      Mat d(x.rows(), h);
      for (Eigen::Index b = 0; b < x.rows(); ++b)
        for (Eigen::Index j = 0; j < h; ++j) d(b, j) = g.row(b).segment(j * h, h).sum();
      accumulate(0, d);
      break;
    }
    case Op::kExpandCol: {
      const Eigen::Index h = x.cols();
      Mat d = Mat::Zero(x.rows(), h);
      for (Eigen::Index b = 0; b < x.rows(); ++b)
        for (Eigen::Index j = 0; j < h; ++j) d.row(b) += g.row(b).segment(j * h, h);
      accumulate(0, d);
      break;
    }
    case Op::kDiagPart: {
      const Eigen::Index h = y.cols();
      Mat d = Mat::Zero(x.rows(), x.cols());
      for (Eigen::Index b = 0; b < x.rows(); ++b)
        for (Eigen::Index j = 0; j < h; ++j) d(b, j * h + j) = g(b, j);
      accumulate(0, d);
      break;
    }
    case Op::kDiagEmbed: {
      const Eigen::Index h = x.cols();
      Mat d(x.rows(), h);
      for (Eigen::Index b = 0; b < x.rows(); ++b)
        for (Eigen::Index j = 0; j < h; ++j) d(b, j) = g(b, j * h + j);
      accumulate(0, d);
      break;
    }
    case Op::kCongruence: {
      const Mat& w = in_val(1);
      const Eigen::Index h = w.rows(), k = w.cols();
      Mat dc(x.rows(), x.cols());
      Mat dw = Mat::Zero(h, k);
      for (Eigen::Index b = 0; b < x.rows(); ++b) {
        ConstSquareMap c(x.row(b).data(), h, h);
        ConstSquareMap gb(g.row(b).data(), k, k);
        if (wants(0)) {
          SquareMap o(dc.row(b).data(), h, h);
          o.noalias() = w * (gb * w.transpose());
        }
        if (wants(1)) {
          dw.noalias() += c * (w * gb.transpose());
          dw.noalias() += c.transpose() * (w * gb);
        }
      }
      if (wants(0)) accumulate(0, dc);
      if (wants(1)) accumulate(1, dw);
      break;
    }
    case Op::kBatchedMatMul: {
      const Mat& w = in_val(1);
      const Eigen::Index h = w.rows(), k = w.cols();
      Mat dc(x.rows(), x.cols());
      Mat dw = Mat::Zero(h, k);
      for (Eigen::Index b = 0; b < x.rows(); ++b) {
        ConstSquareMap c(x.row(b).data(), h, h);
        ConstSquareMap gb(g.row(b).data(), h, k);
        if (wants(0)) {
          SquareMap o(dc.row(b).data(), h, h);
          o.noalias() = gb * w.transpose();
        }
        if (wants(1)) dw.noalias() += c.transpose() * gb;
      }
      if (wants(0)) accumulate(0, dc);
      if (wants(1)) accumulate(1, dw);
      break;
    }
    case Op::kBatchedTranspose: {
      const Eigen::Index h = impl::square_side(x.cols());
      Mat d(x.rows(), x.cols());
      for (Eigen::Index b = 0; b < x.rows(); ++b) {
        ConstSquareMap gb(g.row(b).data(), h, h);
        SquareMap o(d.row(b).data(), h, h);
        o = gb.transpose();
      }
      accumulate(0, d);
      break;
    }
    case Op::kSelectCols: {
      Mat d = Mat::Zero(x.rows(), x.cols());
      for (std::size_t k = 0; k < n.attrs.cols.size(); ++k) {
        d.col(n.attrs.cols[k]) += g.col(static_cast<Eigen::Index>(k));
      }
      accumulate(0, d);
      break;
    }
    default:
      throw StructuralError(std::string("backward: unsupported primitive ") + op_name(n.op));
  }
}

inline GradientMap Tape::backward(Var root) {
  if (backward_done_) throw StructuralError("backward: tape already differentiated");
  if (root.tape != this) throw StructuralError("backward: root is not on this tape");
  const Mat& rv = value(root);
  if (rv.rows() != 1 || rv.cols() != 1) throw StructuralError("backward: root must be a 1 x 1 scalar");
  backward_done_ = true;

  std::vector<Mat> adj(nodes_.size());
  adj[static_cast<std::size_t>(root.id)] = Mat::Ones(1, 1);
  for (int i = root.id; i >= 0; --i) {
    const Node& n = nodes_[static_cast<std::size_t>(i)];
    Mat& g = adj[static_cast<std::size_t>(i)];
    if (g.size() == 0 || !n.needs_grad || n.op == Op::kLeaf) continue;
    propagate(n, g, adj);
    g.resize(0, 0);
  }

  GradientMap out;
  for (const auto& [name, id] : params_) {
    const Mat& g = adj[static_cast<std::size_t>(id)];
    const Mat& v = nodes_[static_cast<std::size_t>(id)].value;
    out[name] = g.size() == 0 ? Mat::Zero(v.rows(), v.cols()) : g;
  }
  return out;
}

}  // namespace dvi::grad
