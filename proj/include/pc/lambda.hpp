#ifndef PC_LAMBDA_HPP
#define PC_LAMBDA_HPP

// User-facing computation graph (Reader/Selection/MultiSelect/Join/Aggregate/
// Writer) plus the lambda-term construction families, compiled into TCAP.

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "pc/object_model.hpp"
#include "pc/tcap.hpp"

namespace pc::lam {

// Coarse semantic type tags; full static typing of user types is out of scope.
enum class TypeTag { Bool, Int, Double, String, Object, Unknown };

enum class TermKind { MemberAccess, MethodCall, NativeOpaque, Self, BinaryOp, Constant };

struct LambdaTerm;
using TermPtr = std::shared_ptr<const LambdaTerm>;

struct LambdaTerm {
    TermKind kind = TermKind::Self;
    std::string name;     // attName | methodName | functionId | operator
    int inputSlot = -1;   // leaf terms: which computation argument they read
    std::string literal;  // Constant: decimal/string literal text
    TypeTag outputType = TypeTag::Unknown;
    std::vector<TermPtr> children;
};

// -- term families ----------------------------------------------------------

TermPtr make_lambda_from_member(int slot, const std::string& attName,
                                TypeTag out = TypeTag::Object);
TermPtr make_lambda_from_method(int slot, const std::string& methodName,
                                TypeTag out = TypeTag::Object);
TermPtr make_lambda_from_self(int slot);
// Opaque native function; functionId must be registered (UnknownFunction).
TermPtr make_lambda(int slot, const std::string& functionId);

TermPtr make_constant(int64_t v);
TermPtr make_constant(double v);
TermPtr make_constant(const std::string& v);

// op ∈ {==, !=, >, <, >=, <=, &&, ||, +, -, *}.  Comparisons yield Bool;
// && and || require Bool operands; arithmetic requires numeric operands
// (TypeMismatch otherwise).
TermPtr make_binary(const std::string& op, TermPtr lhs, TermPtr rhs);
TermPtr make_not(TermPtr x);

// -- native function registry -----------------------------------------------

struct NativeFunction {
    std::string id;
    TypeTag outputType = TypeTag::Object;
    // Row-wise evaluation: one argument value per selection column.
    std::function<ScalarValue(const std::vector<ScalarValue>&)> fn;
};

// Re-registering an id replaces the previous function (handy in tests).
void register_native(NativeFunction f);
const NativeFunction* find_native(const std::string& id);  // nullptr if absent
const NativeFunction& native(const std::string& id);       // UnknownFunction if absent

// -- computation graph ------------------------------------------------------

enum class CompKind { Reader, Writer, Selection, MultiSelect, Join, Aggregate };

struct Computation;
using CompPtr = std::shared_ptr<const Computation>;

struct Computation {
    CompKind kind = CompKind::Reader;
    std::string name;  // TCAP computation label
    std::vector<CompPtr> inputs;
    std::string db, set;                     // Reader / Writer
    TermPtr selection;                       // Selection / Join predicate
    TermPtr projection;                      // optional output term
    TermPtr keyProjection, valueProjection;  // Aggregate
    std::string combineFn = "sum";           // Aggregate merge function
};

CompPtr make_reader(const std::string& db, const std::string& set, const std::string& name);
CompPtr make_selection(CompPtr input, TermPtr selection, const std::string& name,
                       TermPtr projection = nullptr);
CompPtr make_multiselect(CompPtr input, TermPtr projection, const std::string& name);
CompPtr make_join(std::vector<CompPtr> inputs, TermPtr selection, const std::string& name,
                  TermPtr projection = nullptr);
CompPtr make_aggregate(CompPtr input, TermPtr keyProjection, TermPtr valueProjection,
                       const std::string& name, const std::string& combineFn = "sum");
CompPtr make_writer(CompPtr input, const std::string& db, const std::string& set,
                    const std::string& name);

// Compile the graphs ending in the given Writer sinks into one TCAP program.
// Deterministic: identical graphs produce identical programs.
tcap::Program compile_to_tcap(const std::vector<CompPtr>& sinks);
inline tcap::Program compile_to_tcap(const CompPtr& sink) {
    return compile_to_tcap(std::vector<CompPtr>{sink});
}

}  // namespace pc::lam

#endif
