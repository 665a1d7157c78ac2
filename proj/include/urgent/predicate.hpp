#pragma once

// Edge conditions: comparisons of context fields against literals, combined
// with && and || (&& binds tighter) and parentheses.
//
//   expr    := and ( "||" and )*
//   and     := primary ( "&&" primary )*
//   primary := "(" expr ")" | path op literal
//   op      := == | != | < | <= | > | >=
//   literal := number | "string" | true | false
//   path    := ident ( "." ident )*

#include <memory>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "urgent/common.hpp"

namespace urgent::pred {

class PredicateSyntax : public Error {
 public:
  PredicateSyntax(std::size_t offset, const std::string& what);
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

enum class Op { EQ, NE, LT, LE, GT, GE };
const char* to_string(Op op);

struct Literal {
  enum class Kind { NUMBER, STRING, BOOL };
  Kind kind = Kind::NUMBER;
  double number = 0;
  std::string text;  // number lexeme or string contents
  bool boolean = false;

  bool operator==(const Literal&) const = default;
};

struct Node {
  enum class Kind { COMPARE, AND, OR };
  Kind kind = Kind::COMPARE;
  std::string path;
  Op op = Op::EQ;
  Literal literal;
  std::vector<Node> children;  // AND / OR operands, at least two

  bool operator==(const Node&) const = default;
};

Node parse(std::string_view expression);
/// Canonical text; parse(print(n)) == n.
std::string print(const Node& n);

/// `context` is a JSON object. A path resolves first as a literal key
/// ("fire.area") and then by descending nested objects. && and || short-
/// circuit left to right. MissingField / TypeMismatch on failure.
bool eval(const Node& n, const nlohmann::json& context);
bool eval(std::string_view expression, const nlohmann::json& context);

/// The value at `path`, or nullptr when absent.
const nlohmann::json* lookup(const nlohmann::json& context, const std::string& path);

}  // namespace urgent::pred
