#pragma once

#include <cctype>
#include <cstdlib>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "steerkit/reward_ast.hpp"

namespace steerkit {

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace reward_detail {

struct Token {
  enum class Type { Ident, Number, Str, Punct, End };
  Type type = Type::End;
  std::string text;
  double num = 0.0;
  int line = 1, col = 1;
};

inline std::vector<Token> lex_reward(std::string_view src) {
  std::vector<Token> out;
  int line = 1, col = 1;
  std::size_t i = 0;
  auto fail = [&](const std::string& msg) {
    throw ParseError("parse error at " + std::to_string(line) + ":" + std::to_string(col) + ": " + msg);
  };
  while (i < src.size()) {
    const char c = src[i];
    if (c == '\n') {
      ++line;
      col = 1;
      ++i;
      continue;
    }
    if (c == ' ' || c == '\t' || c == '\r') {
      ++col;
      ++i;
      continue;
    }
    if (c == '#') {
      while (i < src.size() && src[i] != '\n') ++i;
      continue;
    }
    Token t;
    t.line = line;
    t.col = col;
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      std::size_t j = i;
      while (j < src.size() &&
             (std::isalnum(static_cast<unsigned char>(src[j])) || src[j] == '_'))
        ++j;
      t.type = Token::Type::Ident;
      t.text = std::string(src.substr(i, j - i));
      col += static_cast<int>(j - i);
      i = j;
    } else if (std::isdigit(static_cast<unsigned char>(c)) ||
               (c == '.' && i + 1 < src.size() &&
                std::isdigit(static_cast<unsigned char>(src[i + 1])))) {
      const char* begin = src.data() + i;
      char* end = nullptr;
      t.type = Token::Type::Number;
      t.num = std::strtod(begin, &end);
      const std::size_t len = static_cast<std::size_t>(end - begin);
      t.text = std::string(src.substr(i, len));
      col += static_cast<int>(len);
      i += len;
    } else if (c == '"') {
      t.type = Token::Type::Str;
      ++i;
      ++col;
      std::string s;
      bool closed = false;
      while (i < src.size()) {
        const char d = src[i];
        if (d == '"') {
          closed = true;
          ++i;
          ++col;
          break;
        }
        if (d == '\n') fail("newline in string literal");
        if (d == '\\') {
          if (i + 1 >= src.size()) fail("dangling escape in string literal");
          const char e = src[i + 1];
          if (e == '"') s += '"';
          else if (e == '\\') s += '\\';
          else if (e == 'n') s += '\n';
          else if (e == 't') s += '\t';
          else fail(std::string("unknown escape \\") + e);
          i += 2;
          col += 2;
        } else {
          s += d;
          ++i;
          ++col;
        }
      }
      if (!closed) fail("unterminated string literal");
      t.text = s;
    } else if (std::string_view("{}()[]:;,+-*/^=").find(c) != std::string_view::npos) {
      t.type = Token::Type::Punct;
      t.text = std::string(1, c);
      ++i;
      ++col;
    } else {
      fail(std::string("unexpected character '") + c + "'");
    }
    out.push_back(std::move(t));
  }
  Token end;
  end.type = Token::Type::End;
  end.line = line;
  end.col = col;
  out.push_back(end);
  return out;
}

class Parser {
 public:
  explicit Parser(std::string_view text) : toks_(lex_reward(text)) {}

  // want_dims: required shape when provided; a dims header must then agree
  // on T, D, n. Without want_dims the header is mandatory.
  RewardProgram parse(const RewardDims* want_dims) {
    RewardProgram prog;
    std::optional<RewardDims> header = try_parse_header();
    if (want_dims) {
      prog.dims = *want_dims;
      if (header && (header->T != want_dims->T || header->D != want_dims->D ||
                     header->n != want_dims->n))
        fail(toks_[0], "dims header does not match the declared shape");
    } else {
      if (!header) fail(peek(), "expected a dims header line");
      prog.dims = *header;
    }
    validate_dims(prog.dims);

    if (peek_ident("stage")) {
      while (peek_ident("stage")) prog.stages.push_back(parse_stage(prog.dims));
    } else if (peek_ident("reward")) {
      // Bare shorthand: a single unnamed stage with default thresholds.
      get();
      expect_punct(":");
      RewardStage st;
      st.name = "main";
      const Token& at = peek();
      st.reward = parse_expr(prog.dims);
      if (st.reward->width != 1) fail(at, "stage reward must be scalar");
      st.r_high = -0.05;
      st.r_low = -0.5;
      accept_punct(";");
      prog.stages.push_back(std::move(st));
    } else {
      fail(peek(), "expected 'stage' or 'reward'");
    }
    if (peek().type != Token::Type::End) fail(peek(), "trailing input after program");
    if (prog.stages.empty()) fail(peek(), "program declares no stages");
    return prog;
  }

 private:
  std::vector<Token> toks_;
  std::size_t pos_ = 0;
  int t_depth_ = 0;

  [[noreturn]] void fail(const Token& t, const std::string& msg) const {
    throw ParseError("parse error at " + std::to_string(t.line) + ":" + std::to_string(t.col) +
                     ": " + msg);
  }
  const Token& peek() const { return toks_[pos_]; }
  const Token& get() { return toks_[pos_++]; }
  bool peek_ident(const char* s) const {
    return peek().type == Token::Type::Ident && peek().text == s;
  }
  bool peek_punct(const char* s) const {
    return peek().type == Token::Type::Punct && peek().text == s;
  }
  bool accept_punct(const char* s) {
    if (!peek_punct(s)) return false;
    ++pos_;
    return true;
  }
  void expect_punct(const char* s) {
    if (!accept_punct(s)) fail(peek(), std::string("expected '") + s + "'");
  }
  const Token& expect_ident() {
    if (peek().type != Token::Type::Ident) fail(peek(), "expected identifier");
    return get();
  }
  long expect_int() {
    if (peek().type != Token::Type::Number) fail(peek(), "expected integer");
    const Token& t = get();
    const long v = static_cast<long>(t.num);
    if (static_cast<double>(v) != t.num) fail(t, "expected integer, got " + t.text);
    return v;
  }

  static void validate_dims(const RewardDims& d) {
    if (d.T < 1 || d.D < 1 || d.n < 0) throw ParseError("invalid dims: T and D must be >= 1, n >= 0");
    if (d.kp_dim != 2 && d.kp_dim != 3) throw ParseError("invalid dims: kp_dim must be 2 or 3");
  }

  std::optional<RewardDims> try_parse_header() {
    if (!peek_ident("dims")) return std::nullopt;
    get();
    RewardDims d;
    auto field = [&](const char* name) {
      const Token& id = expect_ident();
      if (id.text != name) fail(id, std::string("expected '") + name + "' in dims header");
      expect_punct("=");
      return expect_int();
    };
    d.T = static_cast<int>(field("T"));
    d.D = static_cast<int>(field("D"));
    d.n = static_cast<int>(field("n"));
    return d;
  }

  RewardStage parse_stage(const RewardDims& dims) {
    get();  // 'stage'
    RewardStage st;
    const Token& name = expect_ident();
    st.name = name.text;
    expect_punct("{");
    bool has_reward = false, has_high = false, has_low = false, has_desc = false;
    while (!accept_punct("}")) {
      const Token& field = expect_ident();
      expect_punct(":");
      if (field.text == "reward") {
        if (has_reward) fail(field, "duplicate reward field");
        st.reward = parse_expr(dims);
        if (st.reward->width != 1) fail(field, "stage reward must be scalar");
        has_reward = true;
      } else if (field.text == "high") {
        if (has_high) fail(field, "duplicate high field");
        st.r_high = parse_signed_number();
        has_high = true;
      } else if (field.text == "low") {
        if (has_low) fail(field, "duplicate low field");
        st.r_low = parse_signed_number();
        has_low = true;
      } else if (field.text == "desc") {
        if (has_desc) fail(field, "duplicate desc field");
        if (peek().type != Token::Type::Str) fail(peek(), "desc expects a string literal");
        st.desc = get().text;
        has_desc = true;
      } else {
        fail(field, "unknown stage field '" + field.text + "'");
      }
      expect_punct(";");
    }
    if (!has_reward) fail(name, "stage '" + st.name + "' is missing its reward");
    if (!has_high || !has_low)
      fail(name, "stage '" + st.name + "' is missing thresholds (high and low are required)");
    if (!std::isfinite(st.r_high) || !std::isfinite(st.r_low) || !(st.r_high > st.r_low))
      fail(name, "stage '" + st.name + "' needs finite thresholds with high > low");
    return st;
  }

  double parse_signed_number() {
    bool neg = false;
    while (peek_punct("-") || peek_punct("+")) {
      if (get().text == "-") neg = !neg;
    }
    if (peek().type != Token::Type::Number) fail(peek(), "expected a number");
    const double v = get().num;
    return neg ? -v : v;
  }

  // --- expression grammar -------------------------------------------------

  std::unique_ptr<Expr> parse_expr(const RewardDims& dims) { return parse_additive(dims); }

  std::unique_ptr<Expr> parse_additive(const RewardDims& dims) {
    auto lhs = parse_multiplicative(dims);
    while (peek_punct("+") || peek_punct("-")) {
      const Token& op = get();
      auto rhs = parse_multiplicative(dims);
      lhs = make_binary(op, op.text == "+" ? BinaryOp::Add : BinaryOp::Sub, std::move(lhs),
                        std::move(rhs));
    }
    return lhs;
  }

  std::unique_ptr<Expr> parse_multiplicative(const RewardDims& dims) {
    auto lhs = parse_unary(dims);
    while (peek_punct("*") || peek_punct("/")) {
      const Token& op = get();
      auto rhs = parse_unary(dims);
      lhs = make_binary(op, op.text == "*" ? BinaryOp::Mul : BinaryOp::Div, std::move(lhs),
                        std::move(rhs));
    }
    return lhs;
  }

  std::unique_ptr<Expr> parse_unary(const RewardDims& dims) {
    if (peek_punct("-")) {
      const Token& op = get();
      auto inner = parse_unary(dims);
      if (inner->kind == Expr::Kind::Const) {
        inner->cval = -inner->cval;  // canonical: negated literals fold
        return inner;
      }
      auto e = std::make_unique<Expr>();
      e->kind = Expr::Kind::Unary;
      e->uop = UnaryOp::Neg;
      e->line = op.line;
      e->col = op.col;
      e->width = inner->width;
      e->a = std::move(inner);
      return e;
    }
    return parse_power(dims);
  }

  std::unique_ptr<Expr> parse_power(const RewardDims& dims) {
    auto base = parse_primary(dims);
    if (!peek_punct("^")) return base;
    const Token& op = get();
    auto exp = parse_unary(dims);
    const std::optional<double> folded = fold_const(*exp);
    if (!folded) fail(op, "exponent must be a constant");
    auto e = std::make_unique<Expr>();
    e->kind = Expr::Kind::Binary;
    e->bop = BinaryOp::Pow;
    e->line = op.line;
    e->col = op.col;
    e->width = base->width;
    e->cval = *folded;
    e->a = std::move(base);
    return e;
  }

  static std::optional<double> fold_const(const Expr& e) {
    switch (e.kind) {
      case Expr::Kind::Const: return e.cval;
      case Expr::Kind::Unary: {
        if (e.uop != UnaryOp::Neg) return std::nullopt;
        auto v = fold_const(*e.a);
        if (v) return -*v;
        return std::nullopt;
      }
      case Expr::Kind::Binary: {
        if (e.bop == BinaryOp::Pow) {
          auto x = fold_const(*e.a);
          if (x) return std::pow(*x, e.cval);
          return std::nullopt;
        }
        auto x = fold_const(*e.a);
        auto y = fold_const(*e.b);
        if (!x || !y) return std::nullopt;
        switch (e.bop) {
          case BinaryOp::Add: return *x + *y;
          case BinaryOp::Sub: return *x - *y;
          case BinaryOp::Mul: return *x * *y;
          default: return std::nullopt;
        }
      }
      default: return std::nullopt;
    }
  }

  std::unique_ptr<Expr> make_binary(const Token& at, BinaryOp op, std::unique_ptr<Expr> a,
                                    std::unique_ptr<Expr> b) {
    if (a->width != b->width && a->width != 1 && b->width != 1)
      fail(at, "operand widths " + std::to_string(a->width) + " and " +
                   std::to_string(b->width) + " do not match");
    auto e = std::make_unique<Expr>();
    e->kind = Expr::Kind::Binary;
    e->bop = op;
    e->line = at.line;
    e->col = at.col;
    e->width = a->width > b->width ? a->width : b->width;
    e->a = std::move(a);
    e->b = std::move(b);
    return e;
  }

  std::unique_ptr<Expr> parse_primary(const RewardDims& dims) {
    const Token& t = peek();
    if (t.type == Token::Type::Number) {
      get();
      auto e = std::make_unique<Expr>();
      e->kind = Expr::Kind::Const;
      e->cval = t.num;
      e->line = t.line;
      e->col = t.col;
      return e;
    }
    if (accept_punct("(")) {
      auto e = parse_expr(dims);
      expect_punct(")");
      return e;
    }
    if (t.type != Token::Type::Ident) fail(t, "expected expression");
    const Token id = get();
    const std::string& s = id.text;

    if (s == "a") return parse_var(id, Expr::Kind::VarA, dims);
    if (s == "cum") {
      expect_punct("(");
      const Token& inner = expect_ident();
      if (inner.text != "a") fail(inner, "cum() applies to a");
      expect_punct(")");
      return parse_var(id, Expr::Kind::VarCum, dims);
    }
    if (s == "p") return parse_var(id, Expr::Kind::VarP, dims);
    if (s == "grip_start") return parse_var(id, Expr::Kind::VarGrip, dims);

    auto unary = [&](UnaryOp op) {
      expect_punct("(");
      auto arg = parse_expr(dims);
      expect_punct(")");
      auto e = std::make_unique<Expr>();
      e->kind = Expr::Kind::Unary;
      e->uop = op;
      e->line = id.line;
      e->col = id.col;
      e->width = arg->width;
      e->a = std::move(arg);
      return e;
    };
    if (s == "exp") return unary(UnaryOp::Exp);
    if (s == "log") return unary(UnaryOp::Log);
    if (s == "tanh") return unary(UnaryOp::Tanh);
    if (s == "sigmoid") return unary(UnaryOp::Sigmoid);
    if (s == "softplus") return unary(UnaryOp::Softplus);
    if (s == "sqrt_safe") return unary(UnaryOp::SqrtSafe);

    if (s == "norm2") {
      expect_punct("(");
      auto arg = parse_expr(dims);
      expect_punct(")");
      auto e = std::make_unique<Expr>();
      e->kind = Expr::Kind::Norm2;
      e->line = id.line;
      e->col = id.col;
      e->a = std::move(arg);
      return e;
    }
    if (s == "dot") {
      expect_punct("(");
      auto x = parse_expr(dims);
      expect_punct(",");
      auto y = parse_expr(dims);
      expect_punct(")");
      if (x->width != y->width) fail(id, "dot() operands must have equal width");
      auto e = std::make_unique<Expr>();
      e->kind = Expr::Kind::Dot;
      e->line = id.line;
      e->col = id.col;
      e->a = std::move(x);
      e->b = std::move(y);
      return e;
    }
    if (s == "sum_t" || s == "mean_t" || s == "softmin_t" || s == "softmax_t") {
      if (t_depth_ > 0) fail(id, "reductions cannot nest");
      const ReduceOp op = s == "sum_t"    ? ReduceOp::Sum
                          : s == "mean_t" ? ReduceOp::Mean
                          : s == "softmin_t" ? ReduceOp::SoftMin
                                             : ReduceOp::SoftMax;
      expect_punct("(");
      ++t_depth_;
      auto body = parse_expr(dims);
      --t_depth_;
      if (body->width != 1) fail(id, "reduction body must be scalar");
      auto e = std::make_unique<Expr>();
      e->kind = Expr::Kind::Reduce;
      e->rop = op;
      e->line = id.line;
      e->col = id.col;
      e->a = std::move(body);
      if (op == ReduceOp::SoftMin || op == ReduceOp::SoftMax) {
        expect_punct(",");
        const Token& at = peek();
        auto tau_expr = parse_expr(dims);
        const std::optional<double> tau = fold_const(*tau_expr);
        if (!tau) fail(at, "temperature must be a constant");
        if (!(*tau > 0.0)) fail(at, "temperature must be positive");
        e->tau = *tau;
      }
      expect_punct(")");
      return e;
    }
    fail(id, "unknown identifier '" + s + "'");
  }

  // --- variable references -------------------------------------------------

  std::unique_ptr<IndexExpr> parse_index_expr(bool allow_t) {
    auto lhs = parse_index_term(allow_t);
    while (peek_punct("+") || peek_punct("-")) {
      const Token& op = get();
      auto rhs = parse_index_term(allow_t);
      auto e = std::make_unique<IndexExpr>();
      e->kind = op.text == "+" ? IndexExpr::Kind::Add : IndexExpr::Kind::Sub;
      e->line = op.line;
      e->col = op.col;
      e->lhs = std::move(lhs);
      e->rhs = std::move(rhs);
      lhs = std::move(e);
    }
    return lhs;
  }

  std::unique_ptr<IndexExpr> parse_index_term(bool allow_t) {
    auto lhs = parse_index_factor(allow_t);
    while (peek_punct("*")) {
      const Token& op = get();
      auto rhs = parse_index_factor(allow_t);
      auto e = std::make_unique<IndexExpr>();
      e->kind = IndexExpr::Kind::Mul;
      e->line = op.line;
      e->col = op.col;
      e->lhs = std::move(lhs);
      e->rhs = std::move(rhs);
      lhs = std::move(e);
    }
    return lhs;
  }

  std::unique_ptr<IndexExpr> parse_index_factor(bool allow_t) {
    const Token& t = peek();
    auto e = std::make_unique<IndexExpr>();
    e->line = t.line;
    e->col = t.col;
    if (accept_punct("-")) {
      e->kind = IndexExpr::Kind::Neg;
      e->lhs = parse_index_factor(allow_t);
      return e;
    }
    if (accept_punct("(")) {
      auto inner = parse_index_expr(allow_t);
      expect_punct(")");
      return inner;
    }
    if (t.type == Token::Type::Number) {
      get();
      e->kind = IndexExpr::Kind::Lit;
      e->lit = static_cast<long>(t.num);
      if (static_cast<double>(e->lit) != t.num) fail(t, "indices must be integers");
      return e;
    }
    if (t.type == Token::Type::Ident) {
      get();
      if (t.text == "T") e->kind = IndexExpr::Kind::DimT;
      else if (t.text == "D") e->kind = IndexExpr::Kind::DimD;
      else if (t.text == "n") e->kind = IndexExpr::Kind::DimN;
      else if (t.text == "t") {
        if (!allow_t || t_depth_ == 0) fail(t, "t is only available inside a reduction");
        e->kind = IndexExpr::Kind::BoundT;
      } else {
        fail(t, "unknown index symbol '" + t.text + "'");
      }
      return e;
    }
    fail(t, "expected index expression");
  }

  void check_index(const Token& at, const IndexExpr& ix, const RewardDims& dims, long limit,
                   const char* what) {
    if (index_contains_t(ix)) {
      for (long tv = 0; tv < dims.T; ++tv) {
        const long v = eval_index(ix, dims, tv);
        if (v < 0 || v >= limit)
          fail(at, std::string(what) + " index " + std::to_string(v) + " out of range [0, " +
                       std::to_string(limit) + ") at t=" + std::to_string(tv));
      }
    } else {
      const long v = eval_index(ix, dims, 0);
      if (v < 0 || v >= limit)
        fail(at, std::string(what) + " index " + std::to_string(v) + " out of range [0, " +
                     std::to_string(limit) + ")");
    }
  }

  // One bracket group: scalar [i] or slice [lo:hi]. Slice bounds are constant.
  void parse_subscript(const Token& at, Expr& e, const RewardDims& dims, long limit,
                       const char* what) {
    expect_punct("[");
    e.i1 = parse_index_expr(true);
    if (accept_punct(":")) {
      e.is_slice = true;
      e.i2 = parse_index_expr(false);
      if (index_contains_t(*e.i1)) fail(at, "slice bounds must be constant");
      const long lo = eval_index(*e.i1, dims, 0);
      const long hi = eval_index(*e.i2, dims, 0);
      if (lo < 0 || hi > limit || lo >= hi)
        fail(at, std::string(what) + " slice [" + std::to_string(lo) + ":" + std::to_string(hi) +
                     ") invalid for range [0, " + std::to_string(limit) + ")");
      e.width = static_cast<int>(hi - lo);
    } else {
      check_index(at, *e.i1, dims, limit, what);
      e.width = 1;
    }
    expect_punct("]");
  }

  std::unique_ptr<Expr> parse_var(const Token& id, Expr::Kind kind, const RewardDims& dims) {
    auto e = std::make_unique<Expr>();
    e->kind = kind;
    e->line = id.line;
    e->col = id.col;
    const long cum_limit = dims.kp_dim < dims.D ? dims.kp_dim : dims.D;
    if (kind == Expr::Kind::VarA || kind == Expr::Kind::VarCum) {
      expect_punct("[");
      e->i0 = parse_index_expr(true);
      check_index(id, *e->i0, dims, dims.T, "time");
      expect_punct("]");
      parse_subscript(id, *e, dims, kind == Expr::Kind::VarA ? dims.D : cum_limit, "dimension");
    } else if (kind == Expr::Kind::VarP) {
      expect_punct("[");
      e->i0 = parse_index_expr(true);
      check_index(id, *e->i0, dims, dims.n, "keypoint");
      expect_punct("]");
      parse_subscript(id, *e, dims, dims.kp_dim, "coordinate");
    } else {
      parse_subscript(id, *e, dims, dims.kp_dim, "coordinate");
    }
    return e;
  }
};

}  // namespace reward_detail

// Parse a program against a known shape. A dims header in the text, when
// present, must agree with the declared shape.
inline RewardProgram parse_reward(const std::string& text, const RewardDims& dims) {
  if (text.empty()) throw ParseError("empty reward program");
  reward_detail::Parser parser(text);
  return parser.parse(&dims);
}

// Parse a self-describing program; the dims header is required.
inline RewardProgram parse_reward_text(const std::string& text) {
  if (text.empty()) throw ParseError("empty reward program");
  reward_detail::Parser parser(text);
  return parser.parse(nullptr);
}

}  // namespace steerkit
