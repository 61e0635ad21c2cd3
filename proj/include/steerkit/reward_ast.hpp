#pragma once

#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace steerkit {

// Geometric scaffold the reward programs index into. Labels are unique,
// coordinates finite, all points share one workspace dimension.
struct KeypointSet {
  int dim = 2;
  std::vector<std::string> labels;
  std::vector<double> coords;  // size() * dim, row-major

  int size() const { return static_cast<int>(labels.size()); }
  double at(int i, int d) const {
    return coords[static_cast<std::size_t>(i) * dim + static_cast<std::size_t>(d)];
  }
  int find(const std::string& label) const {
    for (int i = 0; i < size(); ++i)
      if (labels[i] == label) return i;
    return -1;
  }
};

inline void validate_keypoints(const KeypointSet& ks) {
  if (ks.dim != 2 && ks.dim != 3) throw std::invalid_argument("keypoint dim must be 2 or 3");
  if (ks.coords.size() != static_cast<std::size_t>(ks.size()) * ks.dim)
    throw std::invalid_argument("keypoint coordinate count does not match label count");
  for (double c : ks.coords)
    if (!std::isfinite(c)) throw std::invalid_argument("keypoint coordinates must be finite");
  for (std::size_t i = 0; i < ks.labels.size(); ++i)
    for (std::size_t j = i + 1; j < ks.labels.size(); ++j)
      if (ks.labels[i] == ks.labels[j])
        throw std::invalid_argument("duplicate keypoint label: " + ks.labels[i]);
}

// Shape a program is bound against. kp_dim is the coordinate count of
// keypoints and grip_start (the workspace dimension), not the chunk width D.
struct RewardDims {
  int T = 0;
  int D = 0;
  int n = 0;
  int kp_dim = 2;
};

// Integer index expressions: literals and the symbols T, D, n, t combined
// with +, -, *. t is only meaningful inside a reduction body.
struct IndexExpr {
  enum class Kind { Lit, DimT, DimD, DimN, BoundT, Neg, Add, Sub, Mul };
  Kind kind = Kind::Lit;
  long lit = 0;
  std::unique_ptr<IndexExpr> lhs, rhs;
  int line = 0, col = 0;
};

inline long eval_index(const IndexExpr& e, const RewardDims& dims, long t) {
  switch (e.kind) {
    case IndexExpr::Kind::Lit: return e.lit;
    case IndexExpr::Kind::DimT: return dims.T;
    case IndexExpr::Kind::DimD: return dims.D;
    case IndexExpr::Kind::DimN: return dims.n;
    case IndexExpr::Kind::BoundT: return t;
    case IndexExpr::Kind::Neg: return -eval_index(*e.lhs, dims, t);
    case IndexExpr::Kind::Add: return eval_index(*e.lhs, dims, t) + eval_index(*e.rhs, dims, t);
    case IndexExpr::Kind::Sub: return eval_index(*e.lhs, dims, t) - eval_index(*e.rhs, dims, t);
    case IndexExpr::Kind::Mul: return eval_index(*e.lhs, dims, t) * eval_index(*e.rhs, dims, t);
  }
  return 0;
}

inline bool index_contains_t(const IndexExpr& e) {
  if (e.kind == IndexExpr::Kind::BoundT) return true;
  if (e.lhs && index_contains_t(*e.lhs)) return true;
  if (e.rhs && index_contains_t(*e.rhs)) return true;
  return false;
}

enum class UnaryOp { Neg, Exp, Log, Tanh, Sigmoid, Softplus, SqrtSafe };
enum class BinaryOp { Add, Sub, Mul, Div, Pow };
enum class ReduceOp { Sum, Mean, SoftMin, SoftMax };

// One AST node. Scalar nodes have width 1; slice-valued variable refs and
// elementwise ops over them have width > 1. Widths are fixed at parse time.
struct Expr {
  enum class Kind { Const, VarA, VarCum, VarP, VarGrip, Unary, Binary, Norm2, Dot, Reduce };
  Kind kind = Kind::Const;
  int line = 0, col = 0;
  int width = 1;

  double cval = 0.0;  // Const value; Binary/Pow stores the folded exponent here
  UnaryOp uop = UnaryOp::Neg;
  BinaryOp bop = BinaryOp::Add;
  ReduceOp rop = ReduceOp::Sum;
  double tau = 0.0;  // SoftMin/SoftMax temperature

  // Variable refs: i0 is the first index (t position or keypoint id),
  // i1 the second index or slice lower bound, i2 the slice upper bound.
  // grip_start uses i1/i2 only. is_slice marks [lo:hi] refs.
  std::unique_ptr<IndexExpr> i0, i1, i2;
  bool is_slice = false;

  std::unique_ptr<Expr> a, b;
};

struct RewardStage {
  std::string name;
  std::unique_ptr<Expr> reward;
  double r_high = 0.0;
  double r_low = 0.0;
  std::string desc;
};

struct RewardProgram {
  RewardDims dims;
  std::vector<RewardStage> stages;
  int stage_count() const { return static_cast<int>(stages.size()); }
};

namespace reward_detail {

inline std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline const char* unary_name(UnaryOp op) {
  switch (op) {
    case UnaryOp::Neg: return "-";
    case UnaryOp::Exp: return "exp";
    case UnaryOp::Log: return "log";
    case UnaryOp::Tanh: return "tanh";
    case UnaryOp::Sigmoid: return "sigmoid";
    case UnaryOp::Softplus: return "softplus";
    case UnaryOp::SqrtSafe: return "sqrt_safe";
  }
  return "?";
}

inline const char* reduce_name(ReduceOp op) {
  switch (op) {
    case ReduceOp::Sum: return "sum_t";
    case ReduceOp::Mean: return "mean_t";
    case ReduceOp::SoftMin: return "softmin_t";
    case ReduceOp::SoftMax: return "softmax_t";
  }
  return "?";
}

inline std::string print_index(const IndexExpr& e) {
  switch (e.kind) {
    case IndexExpr::Kind::Lit: return std::to_string(e.lit);
    case IndexExpr::Kind::DimT: return "T";
    case IndexExpr::Kind::DimD: return "D";
    case IndexExpr::Kind::DimN: return "n";
    case IndexExpr::Kind::BoundT: return "t";
    case IndexExpr::Kind::Neg: return "(-" + print_index(*e.lhs) + ")";
    case IndexExpr::Kind::Add: return "(" + print_index(*e.lhs) + " + " + print_index(*e.rhs) + ")";
    case IndexExpr::Kind::Sub: return "(" + print_index(*e.lhs) + " - " + print_index(*e.rhs) + ")";
    case IndexExpr::Kind::Mul: return "(" + print_index(*e.lhs) + " * " + print_index(*e.rhs) + ")";
  }
  return "?";
}

inline std::string print_subscripts(const Expr& e, bool with_first) {
  std::string out;
  if (with_first) out += "[" + print_index(*e.i0) + "]";
  out += "[" + print_index(*e.i1);
  if (e.is_slice) out += ":" + print_index(*e.i2);
  out += "]";
  return out;
}

inline std::string print_expr(const Expr& e) {
  switch (e.kind) {
    case Expr::Kind::Const: return format_number(e.cval);
    case Expr::Kind::VarA: return "a" + print_subscripts(e, true);
    case Expr::Kind::VarCum: return "cum(a)" + print_subscripts(e, true);
    case Expr::Kind::VarP: return "p" + print_subscripts(e, true);
    case Expr::Kind::VarGrip: return "grip_start" + print_subscripts(e, false);
    case Expr::Kind::Unary:
      if (e.uop == UnaryOp::Neg) return "(-" + print_expr(*e.a) + ")";
      return std::string(unary_name(e.uop)) + "(" + print_expr(*e.a) + ")";
    case Expr::Kind::Binary: {
      const char* op = e.bop == BinaryOp::Add   ? " + "
                       : e.bop == BinaryOp::Sub ? " - "
                       : e.bop == BinaryOp::Mul ? " * "
                       : e.bop == BinaryOp::Div ? " / "
                                                : " ^ ";
      if (e.bop == BinaryOp::Pow)
        return "(" + print_expr(*e.a) + op + format_number(e.cval) + ")";
      return "(" + print_expr(*e.a) + op + print_expr(*e.b) + ")";
    }
    case Expr::Kind::Norm2: return "norm2(" + print_expr(*e.a) + ")";
    case Expr::Kind::Dot: return "dot(" + print_expr(*e.a) + ", " + print_expr(*e.b) + ")";
    case Expr::Kind::Reduce: {
      std::string out = std::string(reduce_name(e.rop)) + "(" + print_expr(*e.a);
      if (e.rop == ReduceOp::SoftMin || e.rop == ReduceOp::SoftMax)
        out += ", " + format_number(e.tau);
      return out + ")";
    }
  }
  return "?";
}

inline std::string escape_string(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      default: out += c;
    }
  }
  out += '"';
  return out;
}

inline bool index_equal(const IndexExpr& x, const IndexExpr& y) {
  if (x.kind != y.kind) return false;
  if (x.kind == IndexExpr::Kind::Lit) return x.lit == y.lit;
  if (x.lhs && (!y.lhs || !index_equal(*x.lhs, *y.lhs))) return false;
  if (!x.lhs && y.lhs) return false;
  if (x.rhs && (!y.rhs || !index_equal(*x.rhs, *y.rhs))) return false;
  if (!x.rhs && y.rhs) return false;
  return true;
}

inline bool expr_equal(const Expr& x, const Expr& y) {
  if (x.kind != y.kind || x.width != y.width) return false;
  switch (x.kind) {
    case Expr::Kind::Const: return x.cval == y.cval;
    case Expr::Kind::VarA:
    case Expr::Kind::VarCum:
    case Expr::Kind::VarP:
      if (!index_equal(*x.i0, *y.i0)) return false;
      [[fallthrough]];
    case Expr::Kind::VarGrip:
      if (x.is_slice != y.is_slice) return false;
      if (!index_equal(*x.i1, *y.i1)) return false;
      if (x.is_slice && !index_equal(*x.i2, *y.i2)) return false;
      return true;
    case Expr::Kind::Unary: return x.uop == y.uop && expr_equal(*x.a, *y.a);
    case Expr::Kind::Binary:
      if (x.bop != y.bop) return false;
      if (x.bop == BinaryOp::Pow) return x.cval == y.cval && expr_equal(*x.a, *y.a);
      return expr_equal(*x.a, *y.a) && expr_equal(*x.b, *y.b);
    case Expr::Kind::Norm2: return expr_equal(*x.a, *y.a);
    case Expr::Kind::Dot: return expr_equal(*x.a, *y.a) && expr_equal(*x.b, *y.b);
    case Expr::Kind::Reduce:
      return x.rop == y.rop && x.tau == y.tau && expr_equal(*x.a, *y.a);
  }
  return false;
}

}  // namespace reward_detail

// Canonical text form; parsing it back yields a structurally equal program.
inline std::string print_reward(const RewardProgram& p) {
  std::string out = "dims T=" + std::to_string(p.dims.T) + " D=" + std::to_string(p.dims.D) +
                    " n=" + std::to_string(p.dims.n) + "\n";
  for (const auto& st : p.stages) {
    out += "stage " + st.name + " {\n";
    out += "  reward: " + reward_detail::print_expr(*st.reward) + ";\n";
    out += "  high: " + reward_detail::format_number(st.r_high) + ";\n";
    out += "  low: " + reward_detail::format_number(st.r_low) + ";\n";
    if (!st.desc.empty()) out += "  desc: " + reward_detail::escape_string(st.desc) + ";\n";
    out += "}\n";
  }
  return out;
}

inline bool program_equal(const RewardProgram& x, const RewardProgram& y) {
  if (x.dims.T != y.dims.T || x.dims.D != y.dims.D || x.dims.n != y.dims.n) return false;
  if (x.stages.size() != y.stages.size()) return false;
  for (std::size_t i = 0; i < x.stages.size(); ++i) {
    const auto& sx = x.stages[i];
    const auto& sy = y.stages[i];
    if (sx.name != sy.name || sx.r_high != sy.r_high || sx.r_low != sy.r_low ||
        sx.desc != sy.desc)
      return false;
    if (!reward_detail::expr_equal(*sx.reward, *sy.reward)) return false;
  }
  return true;
}

}  // namespace steerkit
