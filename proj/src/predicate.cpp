#include "urgent/predicate.hpp"

#include <cctype>
#include <cstdlib>

namespace urgent::pred {

using nlohmann::json;

PredicateSyntax::PredicateSyntax(std::size_t offset, const std::string& what)
    : Error(ErrorCode::PredicateSyntax, what + " at offset " + std::to_string(offset)),
      offset_(offset) {}

const char* to_string(Op op) {
  switch (op) {
    case Op::EQ: return "==";
    case Op::NE: return "!=";
    case Op::LT: return "<";
    case Op::LE: return "<=";
    case Op::GT: return ">";
    case Op::GE: return ">=";
  }
  return "?";
}

namespace {

bool ident_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_'; }
bool ident_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }

class Parser {
 public:
  explicit Parser(std::string_view s) : s_(s) {}

  Node run() {
    Node n = expr();
    skip();
    if (pos_ != s_.size()) throw PredicateSyntax(pos_, "unexpected '" + std::string(1, s_[pos_]) + "'");
    return n;
  }

 private:
  void skip() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }
  bool eat(std::string_view tok) {
    skip();
    if (s_.substr(pos_, tok.size()) != tok) return false;
    pos_ += tok.size();
    return true;
  }

  Node combine(Node::Kind kind, std::vector<Node> parts) {
    if (parts.size() == 1) return std::move(parts[0]);
    Node n;
    n.kind = kind;
    for (auto& p : parts) {
      // Flatten a || (b || c) into one n-ary node.
      if (p.kind == kind) {
        for (auto& c : p.children) n.children.push_back(std::move(c));
      } else {
        n.children.push_back(std::move(p));
      }
    }
    return n;
  }

  Node expr() {
    std::vector<Node> parts{conj()};
    while (eat("||")) parts.push_back(conj());
    return combine(Node::Kind::OR, std::move(parts));
  }

  Node conj() {
    std::vector<Node> parts{primary()};
    while (eat("&&")) parts.push_back(primary());
    return combine(Node::Kind::AND, std::move(parts));
  }

  Node primary() {
    skip();
    if (eat("(")) {
      Node n = expr();
      if (!eat(")")) throw PredicateSyntax(pos_, "expected ')'");
      return n;
    }
    Node n;
    n.path = path();
    n.op = op();
    n.literal = literal();
    return n;
  }

  std::string path() {
    skip();
    const auto start = pos_;
    while (true) {
      if (pos_ >= s_.size() || !ident_start(s_[pos_]))
        throw PredicateSyntax(pos_, "expected a field path");
      while (pos_ < s_.size() && ident_char(s_[pos_])) ++pos_;
      if (pos_ < s_.size() && s_[pos_] == '.') {
        ++pos_;
        continue;
      }
      break;
    }
    auto p = std::string(s_.substr(start, pos_ - start));
    if (p == "true" || p == "false") throw PredicateSyntax(start, "expected a field path");
    return p;
  }

  Op op() {
    skip();
    static const std::pair<std::string_view, Op> ops[] = {
        {"==", Op::EQ}, {"!=", Op::NE}, {"<=", Op::LE}, {">=", Op::GE}, {"<", Op::LT}, {">", Op::GT}};
    for (const auto& [tok, o] : ops)
      if (eat(tok)) return o;
    throw PredicateSyntax(pos_, "expected a comparison operator");
  }

  Literal literal() {
    skip();
    Literal l;
    if (pos_ >= s_.size()) throw PredicateSyntax(pos_, "expected a literal");
    const char c = s_[pos_];
    if (c == '"') {
      const auto start = pos_++;
      l.kind = Literal::Kind::STRING;
      while (true) {
        if (pos_ >= s_.size()) throw PredicateSyntax(start, "unterminated string");
        char d = s_[pos_++];
        if (d == '"') break;
        if (d == '\\') {
          if (pos_ >= s_.size()) throw PredicateSyntax(start, "unterminated string");
          d = s_[pos_++];
          if (d != '"' && d != '\\') throw PredicateSyntax(pos_ - 2, "unknown escape");
        }
        l.text += d;
      }
      return l;
    }
    if (ident_start(c)) {
      const auto start = pos_;
      while (pos_ < s_.size() && ident_char(s_[pos_])) ++pos_;
      auto word = s_.substr(start, pos_ - start);
      if (word != "true" && word != "false") throw PredicateSyntax(start, "expected a literal");
      l.kind = Literal::Kind::BOOL;
      l.boolean = word == "true";
      l.text = std::string(word);
      return l;
    }
    const auto start = pos_;
    if (c == '-' || c == '+') ++pos_;
    while (pos_ < s_.size() &&
           (std::isdigit(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '.' || s_[pos_] == 'e' ||
            s_[pos_] == 'E' ||
            ((s_[pos_] == '-' || s_[pos_] == '+') && (s_[pos_ - 1] == 'e' || s_[pos_ - 1] == 'E'))))
      ++pos_;
    auto text = std::string(s_.substr(start, pos_ - start));
    char* end = nullptr;
    l.number = std::strtod(text.c_str(), &end);
    if (text.empty() || end != text.c_str() + text.size() ||
        !std::isdigit(static_cast<unsigned char>(text[text[0] == '-' || text[0] == '+' ? 1 : 0])))
      throw PredicateSyntax(start, "expected a literal");
    l.kind = Literal::Kind::NUMBER;
    l.text = text;
    return l;
  }

  std::string_view s_;
  std::size_t pos_ = 0;
};

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

template <typename T>
bool compare(Op op, const T& a, const T& b) {
  switch (op) {
    case Op::EQ: return a == b;
    case Op::NE: return a != b;
    case Op::LT: return a < b;
    case Op::LE: return a <= b;
    case Op::GT: return a > b;
    case Op::GE: return a >= b;
  }
  return false;
}

const char* json_kind(const json& v) {
  if (v.is_number()) return "number";
  if (v.is_string()) return "string";
  if (v.is_boolean()) return "boolean";
  if (v.is_null()) return "null";
  return "structure";
}

}  // namespace

Node parse(std::string_view expression) { return Parser(expression).run(); }

std::string print(const Node& n) {
  switch (n.kind) {
    case Node::Kind::COMPARE: {
      std::string lit = n.literal.kind == Literal::Kind::STRING ? quote(n.literal.text) : n.literal.text;
      return n.path + " " + to_string(n.op) + " " + lit;
    }
    case Node::Kind::AND:
    case Node::Kind::OR: {
      std::string out;
      const char* sep = n.kind == Node::Kind::AND ? " && " : " || ";
      for (std::size_t i = 0; i < n.children.size(); ++i) {
        if (i) out += sep;
        const auto& c = n.children[i];
        // Nested nodes always alternate kinds after flattening; only an OR
        // under an AND needs brackets, but bracketing both is unambiguous.
        out += c.kind == Node::Kind::COMPARE ? print(c) : "(" + print(c) + ")";
      }
      return out;
    }
  }
  return {};
}

const json* lookup(const json& context, const std::string& path) {
  if (!context.is_object()) return nullptr;
  if (auto it = context.find(path); it != context.end()) return &*it;
  const json* cur = &context;
  std::size_t start = 0;
  while (true) {
    auto dot = path.find('.', start);
    auto key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!cur->is_object()) return nullptr;
    auto it = cur->find(key);
    if (it == cur->end()) return nullptr;
    cur = &*it;
    if (dot == std::string::npos) return cur;
    start = dot + 1;
  }
}

bool eval(const Node& n, const json& context) {
  switch (n.kind) {
    case Node::Kind::AND:
      for (const auto& c : n.children)
        if (!eval(c, context)) return false;
      return true;
    case Node::Kind::OR:
      for (const auto& c : n.children)
        if (eval(c, context)) return true;
      return false;
    case Node::Kind::COMPARE: break;
  }
  const json* v = lookup(context, n.path);
  if (!v) fail(ErrorCode::MissingField, n.path);
  const auto& lit = n.literal;
  auto mismatch = [&] {
    fail(ErrorCode::TypeMismatch, n.path + " is a " + json_kind(*v) + "; cannot apply " +
                                      to_string(n.op) + " " + print(n).substr(n.path.size() + 1));
  };
  switch (lit.kind) {
    case Literal::Kind::NUMBER:
      if (!v->is_number()) mismatch();
      return compare(n.op, v->get<double>(), lit.number);
    case Literal::Kind::STRING:
      if (!v->is_string() || (n.op != Op::EQ && n.op != Op::NE)) mismatch();
      return compare(n.op, v->get<std::string>(), lit.text);
    case Literal::Kind::BOOL:
      if (!v->is_boolean() || (n.op != Op::EQ && n.op != Op::NE)) mismatch();
      return compare(n.op, v->get<bool>(), lit.boolean);
  }
  return false;
}

bool eval(std::string_view expression, const json& context) { return eval(parse(expression), context); }

}  // namespace urgent::pred
