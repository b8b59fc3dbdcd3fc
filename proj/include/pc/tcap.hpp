#ifndef PC_TCAP_HPP
#define PC_TCAP_HPP

// The TCAP dataflow IR: statements over named vector lists, with a parser,
// printer, validator, and def-use DAG builder.
//
// Grammar:
//   program := stmt+
//   stmt    := NAME '(' namelist ')' '<=' OPKIND '(' args ')' ';'
//   input   := NAME '(' namelist ')'
//   kvlist  := '[' (pair (',' pair)*)? ']'
//   pair    := '(' QSTRING ',' QSTRING ')'
// with /* ... */ comments and insignificant whitespace.  Names referenced
// before definition must begin with "In" (external sources); anything else
// is an undefined input.

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "pc/common.hpp"

namespace pc::tcap {

class TcapError : public PcError {
public:
    explicit TcapError(const std::string& msg) : PcError(msg) {}
};

class CyclicProgram : public PcError {
public:
    explicit CyclicProgram(const std::string& msg = "cyclic def-use graph") : PcError(msg) {}
};

enum class OpKind { Apply, Filter, Hash, Join, Aggregate, Output };

std::string_view opKindName(OpKind k);

struct InputRef {
    std::string list;
    std::vector<std::string> columns;

    bool operator==(const InputRef&) const = default;
};

struct KvPair {
    std::string key;
    std::string value;

    bool operator==(const KvPair&) const = default;
};

struct Statement {
    std::string outputName;
    std::vector<std::string> outputColumns;
    OpKind op = OpKind::Apply;
    // Apply/Filter/Hash: [selection, copy]; Join: [leftHash, leftCopy,
    // rightHash, rightCopy]; Aggregate: [key, value]; Output: [columns].
    std::vector<InputRef> inputs;
    std::string computation;
    std::string stage;  // Apply only
    std::string db;     // Output only
    std::string set;    // Output only
    std::vector<KvPair> kv;
    int line = 0;

    const std::string* kvGet(std::string_view key) const;
    bool structurallyEquals(const Statement& o) const;
};

struct Program {
    std::vector<Statement> statements;

    // Names referenced but never defined (all begin with "In").
    std::vector<std::string> sources() const;
    const Statement* find(std::string_view outputName) const;
    int indexOf(std::string_view outputName) const;  // -1 if absent
    bool structurallyEquals(const Program& o) const;
};

struct Diagnostic {
    std::string file = "<tcap>";
    int line = 0;
    int col = 0;
    std::string code;
    std::string message;

    std::string str() const;  // "file:line:col: code: message"
};

// Throws TcapError carrying a formatted diagnostic on syntax errors,
// undefined inputs, and duplicate output names.
Program parse(std::string_view text, const std::string& file = "<tcap>");

std::string print(const Program& p);

std::vector<Diagnostic> validate(const Program& p);

struct DagNode {
    std::string name;
    bool isSource = false;
    int stmtIndex = -1;                  // -1 for sources
    std::vector<std::string> consumers;  // statement output names reading this list
};

struct Dag {
    std::vector<DagNode> nodes;
    std::unordered_map<std::string, size_t> index;

    const DagNode& at(std::string_view name) const;
    size_t consumerCount(std::string_view name) const;
};

// Requires validate(p) to be empty; throws CyclicProgram on cycles.
Dag build_dag(const Program& p);

}  // namespace pc::tcap

#endif
