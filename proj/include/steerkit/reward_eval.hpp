#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "steerkit/chunk.hpp"
#include "steerkit/reward_ast.hpp"

namespace steerkit {

class RewardError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace reward_detail {

inline const char* node_name(const Expr& e) {
  switch (e.kind) {
    case Expr::Kind::Const: return "const";
    case Expr::Kind::VarA: return "a";
    case Expr::Kind::VarCum: return "cum";
    case Expr::Kind::VarP: return "p";
    case Expr::Kind::VarGrip: return "grip_start";
    case Expr::Kind::Unary: return unary_name(e.uop);
    case Expr::Kind::Binary:
      switch (e.bop) {
        case BinaryOp::Add: return "+";
        case BinaryOp::Sub: return "-";
        case BinaryOp::Mul: return "*";
        case BinaryOp::Div: return "/";
        case BinaryOp::Pow: return "^";
      }
      return "?";
    case Expr::Kind::Norm2: return "norm2";
    case Expr::Kind::Dot: return "dot";
    case Expr::Kind::Reduce: return reduce_name(e.rop);
  }
  return "?";
}

// Records the forward pass as a flat tape; leaves 0..T*D-1 are chunk
// entries, everything else lists (parent, partial) pairs for the reverse
// sweep. Non-finite values or partials abort with the offending node.
class Evaluator {
 public:
  Evaluator(const RewardProgram& prog, const ActionChunk& chunk, const KeypointSet& kps,
            const std::vector<double>& grip_start)
      : dims_(prog.dims), chunk_(chunk), kps_(kps), grip_(grip_start) {
    if (chunk.T != dims_.T || chunk.D != dims_.D)
      throw std::invalid_argument("action chunk shape does not match program dims");
    if (kps.size() != dims_.n) throw std::invalid_argument("keypoint count does not match program dims");
    if (kps.dim != dims_.kp_dim)
      throw std::invalid_argument("keypoint dim does not match program dims");
    if (static_cast<int>(grip_start.size()) != dims_.kp_dim)
      throw std::invalid_argument("grip_start must have kp_dim coordinates");
    n_leaf_ = chunk.size();
  }

  double value(const Expr& root) {
    reset();
    return val_[eval_scalar(root)];
  }

  ActionChunk gradient(const Expr& root, double* value_out) {
    reset();
    const int out = eval_scalar(root);
    if (value_out) *value_out = val_[out];
    adj_.assign(val_.size(), 0.0);
    adj_[out] = 1.0;
    for (int i = static_cast<int>(val_.size()) - 1; i >= n_leaf_; --i) {
      const double a = adj_[i];
      if (a == 0.0) continue;
      const int s = astart_[i];
      for (int j = 0; j < acount_[i]; ++j) adj_[aix_[s + j]] += a * apd_[s + j];
    }
    ActionChunk g(dims_.T, dims_.D);
    for (int i = 0; i < n_leaf_; ++i) {
      if (!std::isfinite(adj_[i])) throw RewardError("non-finite gradient entry");
      g[i] = adj_[i];
    }
    return g;
  }

 private:
  const RewardDims dims_;
  const ActionChunk& chunk_;
  const KeypointSet& kps_;
  const std::vector<double>& grip_;
  int n_leaf_ = 0;

  std::vector<double> val_;
  std::vector<int> astart_, acount_;
  std::vector<int> aix_;
  std::vector<double> apd_;
  std::vector<double> adj_;
  std::vector<int> cum_ids_;
  std::vector<int> scratch_;

  void reset() {
    val_.clear();
    astart_.clear();
    acount_.clear();
    aix_.clear();
    apd_.clear();
    val_.reserve(256);
    for (int i = 0; i < n_leaf_; ++i) {
      if (!std::isfinite(chunk_[i]))
        throw std::invalid_argument("action chunk entries must be finite");
      val_.push_back(chunk_[i]);
      astart_.push_back(0);
      acount_.push_back(0);
    }
    cum_ids_.assign(static_cast<std::size_t>(dims_.T) * dims_.kp_dim, -1);
  }

  [[noreturn]] void die(const Expr& e, const char* what) const {
    throw RewardError(std::string(what) + " in '" + node_name(e) + "' at " +
                      std::to_string(e.line) + ":" + std::to_string(e.col));
  }

  void check(double v, const Expr& e) const {
    if (!std::isfinite(v)) die(e, "non-finite value");
  }

  int push(double v, const Expr& e, std::initializer_list<std::pair<int, double>> args) {
    check(v, e);
    const int id = static_cast<int>(val_.size());
    val_.push_back(v);
    astart_.push_back(static_cast<int>(aix_.size()));
    acount_.push_back(static_cast<int>(args.size()));
    for (const auto& [ix, pd] : args) {
      if (!std::isfinite(pd)) die(e, "non-finite derivative");
      aix_.push_back(ix);
      apd_.push_back(pd);
    }
    return id;
  }

  int push_k(double v, const Expr& e, const int* ids, const double* pds, int k) {
    check(v, e);
    const int id = static_cast<int>(val_.size());
    val_.push_back(v);
    astart_.push_back(static_cast<int>(aix_.size()));
    acount_.push_back(k);
    for (int j = 0; j < k; ++j) {
      if (!std::isfinite(pds[j])) die(e, "non-finite derivative");
      aix_.push_back(ids[j]);
      apd_.push_back(pds[j]);
    }
    return id;
  }

  int leaf(long t, long d) const { return static_cast<int>(t * dims_.D + d); }

  int cum_node(const Expr& e, long t, long d) {
    int& slot = cum_ids_[static_cast<std::size_t>(t) * dims_.kp_dim + d];
    if (slot >= 0) return slot;
    double v = grip_[static_cast<std::size_t>(d)];
    std::vector<int> ids(static_cast<std::size_t>(t) + 1);
    std::vector<double> pds(static_cast<std::size_t>(t) + 1, 1.0);
    for (long u = 0; u <= t; ++u) {
      ids[static_cast<std::size_t>(u)] = leaf(u, d);
      v += chunk_.at(static_cast<int>(u), static_cast<int>(d));
    }
    slot = push_k(v, e, ids.data(), pds.data(), static_cast<int>(t) + 1);
    return slot;
  }

  int eval_scalar(const Expr& e) {
    eval_node(e, -1, scratch_);
    return scratch_[0];
  }

  // t >= 0 while inside a reduction body. out receives `width` tape ids.
  void eval_node(const Expr& e, long t, std::vector<int>& out) {
    switch (e.kind) {
      case Expr::Kind::Const:
        out.assign(1, push(e.cval, e, {}));
        return;
      case Expr::Kind::VarA:
      case Expr::Kind::VarCum: {
        const long ti = eval_index(*e.i0, dims_, t);
        const long lo = eval_index(*e.i1, dims_, t);
        const long hi = e.is_slice ? eval_index(*e.i2, dims_, t) : lo + 1;
        out.clear();
        for (long d = lo; d < hi; ++d)
          out.push_back(e.kind == Expr::Kind::VarA ? leaf(ti, d) : cum_node(e, ti, d));
        return;
      }
      case Expr::Kind::VarP: {
        const long i = eval_index(*e.i0, dims_, t);
        const long lo = eval_index(*e.i1, dims_, t);
        const long hi = e.is_slice ? eval_index(*e.i2, dims_, t) : lo + 1;
        out.clear();
        for (long d = lo; d < hi; ++d)
          out.push_back(push(kps_.at(static_cast<int>(i), static_cast<int>(d)), e, {}));
        return;
      }
      case Expr::Kind::VarGrip: {
        const long lo = eval_index(*e.i1, dims_, t);
        const long hi = e.is_slice ? eval_index(*e.i2, dims_, t) : lo + 1;
        out.clear();
        for (long d = lo; d < hi; ++d) out.push_back(push(grip_[static_cast<std::size_t>(d)], e, {}));
        return;
      }
      case Expr::Kind::Unary: {
        std::vector<int> in;
        eval_node(*e.a, t, in);
        out.clear();
        for (int id : in) {
          const double x = val_[id];
          double v = 0.0, pd = 0.0;
          switch (e.uop) {
            case UnaryOp::Neg: v = -x; pd = -1.0; break;
            case UnaryOp::Exp: v = std::exp(x); pd = v; break;
            case UnaryOp::Log: v = std::log(x); pd = 1.0 / x; break;
            case UnaryOp::Tanh: v = std::tanh(x); pd = 1.0 - v * v; break;
            case UnaryOp::Sigmoid: {
              v = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
              pd = v * (1.0 - v);
              break;
            }
            case UnaryOp::Softplus: {
              v = x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
              pd = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
              break;
            }
            case UnaryOp::SqrtSafe: {
              const double u = (x > 0.0 ? x : 0.0) + 1e-12;
              v = std::sqrt(u);
              pd = x > 0.0 ? 0.5 / v : 0.0;  // subgradient 0 below the clamp
              break;
            }
          }
          out.push_back(push(v, e, {{id, pd}}));
        }
        return;
      }
      case Expr::Kind::Binary: {
        std::vector<int> xl;
        eval_node(*e.a, t, xl);
        if (e.bop == BinaryOp::Pow) {
          const double c = e.cval;
          out.clear();
          for (int id : xl) {
            const double x = val_[id];
            const double v = std::pow(x, c);
            const double pd = c == 0.0 ? 0.0 : c * std::pow(x, c - 1.0);
            out.push_back(push(v, e, {{id, pd}}));
          }
          return;
        }
        std::vector<int> xr;
        eval_node(*e.b, t, xr);
        const int w = e.width;
        out.clear();
        for (int i = 0; i < w; ++i) {
          const int il = xl[static_cast<std::size_t>(xl.size() == 1 ? 0 : i)];
          const int ir = xr[static_cast<std::size_t>(xr.size() == 1 ? 0 : i)];
          const double x = val_[il], y = val_[ir];
          switch (e.bop) {
            case BinaryOp::Add: out.push_back(push(x + y, e, {{il, 1.0}, {ir, 1.0}})); break;
            case BinaryOp::Sub: out.push_back(push(x - y, e, {{il, 1.0}, {ir, -1.0}})); break;
            case BinaryOp::Mul: out.push_back(push(x * y, e, {{il, y}, {ir, x}})); break;
            case BinaryOp::Div: {
              // guarded: x / y evaluates x*y / (y^2 + 1e-9)
              const double den = y * y + 1e-9;
              const double v = x * y / den;
              const double px = y / den;
              const double py = x * (1e-9 - y * y) / (den * den);
              out.push_back(push(v, e, {{il, px}, {ir, py}}));
              break;
            }
            case BinaryOp::Pow: break;  // handled above
          }
        }
        return;
      }
      case Expr::Kind::Norm2: {
        std::vector<int> in;
        eval_node(*e.a, t, in);
        double ss = 0.0;
        for (int id : in) ss += val_[id] * val_[id];
        const double r = std::sqrt(ss);
        std::vector<double> pds(in.size());
        for (std::size_t i = 0; i < in.size(); ++i)
          pds[i] = r == 0.0 ? 0.0 : val_[in[i]] / r;  // subgradient 0 at the origin
        out.assign(1, push_k(r, e, in.data(), pds.data(), static_cast<int>(in.size())));
        return;
      }
      case Expr::Kind::Dot: {
        std::vector<int> xs, ys;
        eval_node(*e.a, t, xs);
        eval_node(*e.b, t, ys);
        double v = 0.0;
        std::vector<int> ids;
        std::vector<double> pds;
        ids.reserve(xs.size() * 2);
        pds.reserve(xs.size() * 2);
        for (std::size_t i = 0; i < xs.size(); ++i) {
          v += val_[xs[i]] * val_[ys[i]];
          ids.push_back(xs[i]);
          pds.push_back(val_[ys[i]]);
          ids.push_back(ys[i]);
          pds.push_back(val_[xs[i]]);
        }
        out.assign(1, push_k(v, e, ids.data(), pds.data(), static_cast<int>(ids.size())));
        return;
      }
      case Expr::Kind::Reduce: {
        std::vector<int> ids(static_cast<std::size_t>(dims_.T));
        std::vector<int> tmp;
        for (long tt = 0; tt < dims_.T; ++tt) {
          eval_node(*e.a, tt, tmp);
          ids[static_cast<std::size_t>(tt)] = tmp[0];
        }
        const int n = dims_.T;
        std::vector<double> pds(static_cast<std::size_t>(n));
        double v = 0.0;
        switch (e.rop) {
          case ReduceOp::Sum:
            for (int i = 0; i < n; ++i) v += val_[ids[i]];
            pds.assign(static_cast<std::size_t>(n), 1.0);
            break;
          case ReduceOp::Mean:
            for (int i = 0; i < n; ++i) v += val_[ids[i]];
            v /= n;
            pds.assign(static_cast<std::size_t>(n), 1.0 / n);
            break;
          case ReduceOp::SoftMin: {
            double m = val_[ids[0]];
            for (int i = 1; i < n; ++i) m = std::min(m, val_[ids[i]]);
            double s = 0.0;
            for (int i = 0; i < n; ++i) s += std::exp(-(val_[ids[i]] - m) / e.tau);
            v = m - e.tau * std::log(s);
            for (int i = 0; i < n; ++i) pds[i] = std::exp(-(val_[ids[i]] - m) / e.tau) / s;
            break;
          }
          case ReduceOp::SoftMax: {
            double m = val_[ids[0]];
            for (int i = 1; i < n; ++i) m = std::max(m, val_[ids[i]]);
            double s = 0.0;
            for (int i = 0; i < n; ++i) s += std::exp((val_[ids[i]] - m) / e.tau);
            v = m + e.tau * std::log(s);
            for (int i = 0; i < n; ++i) pds[i] = std::exp((val_[ids[i]] - m) / e.tau) / s;
            break;
          }
        }
        out.assign(1, push_k(v, e, ids.data(), pds.data(), n));
        return;
      }
    }
  }
};

inline const RewardStage& stage_at(const RewardProgram& p, int s) {
  if (s < 1 || s > p.stage_count()) throw std::invalid_argument("stage index out of range");
  return p.stages[static_cast<std::size_t>(s - 1)];
}

}  // namespace reward_detail

// Stage indices are 1-based, matching how stage progress is reported.
inline double eval_reward(const RewardProgram& p, int s, const ActionChunk& chunk,
                          const KeypointSet& kps, const std::vector<double>& grip_start) {
  reward_detail::Evaluator ev(p, chunk, kps, grip_start);
  return ev.value(*reward_detail::stage_at(p, s).reward);
}

inline ActionChunk grad_reward(const RewardProgram& p, int s, const ActionChunk& chunk,
                               const KeypointSet& kps, const std::vector<double>& grip_start,
                               double* value_out = nullptr) {
  reward_detail::Evaluator ev(p, chunk, kps, grip_start);
  return ev.gradient(*reward_detail::stage_at(p, s).reward, value_out);
}

// Worst relative disagreement between the reverse-mode gradient and central
// finite differences, with a per-entry denominator floored at 1e-3.
inline double check_grad(const RewardProgram& p, int s, const ActionChunk& chunk,
                         const KeypointSet& kps, const std::vector<double>& grip_start,
                         double h = 1e-5) {
  const ActionChunk g = grad_reward(p, s, chunk, kps, grip_start);
  double worst = 0.0;
  ActionChunk probe = chunk;
  for (int i = 0; i < chunk.size(); ++i) {
    probe[i] = chunk[i] + h;
    const double fp = eval_reward(p, s, probe, kps, grip_start);
    probe[i] = chunk[i] - h;
    const double fm = eval_reward(p, s, probe, kps, grip_start);
    probe[i] = chunk[i];
    const double fd = (fp - fm) / (2.0 * h);
    const double denom = std::max({std::fabs(fd), std::fabs(g[i]), 1e-3});
    worst = std::max(worst, std::fabs(fd - g[i]) / denom);
  }
  return worst;
}

}  // namespace steerkit
