#include "pc/tcap.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace pc::tcap {

std::string_view opKindName(OpKind k) {
    switch (k) {
        case OpKind::Apply: return "APPLY";
        case OpKind::Filter: return "FILTER";
        case OpKind::Hash: return "HASH";
        case OpKind::Join: return "JOIN";
        case OpKind::Aggregate: return "AGGREGATE";
        case OpKind::Output: return "OUTPUT";
    }
    return "?";
}

const std::string* Statement::kvGet(std::string_view key) const {
    for (const auto& p : kv)
        if (p.key == key) return &p.value;
    return nullptr;
}

bool Statement::structurallyEquals(const Statement& o) const {
    return outputName == o.outputName && outputColumns == o.outputColumns && op == o.op &&
           inputs == o.inputs && computation == o.computation && stage == o.stage && db == o.db &&
           set == o.set && kv == o.kv;
}

bool Program::structurallyEquals(const Program& o) const {
    if (statements.size() != o.statements.size()) return false;
    for (size_t i = 0; i < statements.size(); ++i)
        if (!statements[i].structurallyEquals(o.statements[i])) return false;
    return true;
}

std::vector<std::string> Program::sources() const {
    std::unordered_set<std::string> defined;
    std::vector<std::string> out;
    std::unordered_set<std::string> seen;
    for (const auto& s : statements) {
        for (const auto& in : s.inputs) {
            if (!defined.count(in.list) && !seen.count(in.list)) {
                seen.insert(in.list);
                out.push_back(in.list);
            }
        }
        defined.insert(s.outputName);
    }
    return out;
}

const Statement* Program::find(std::string_view outputName) const {
    int i = indexOf(outputName);
    return i < 0 ? nullptr : &statements[static_cast<size_t>(i)];
}

int Program::indexOf(std::string_view outputName) const {
    for (size_t i = 0; i < statements.size(); ++i)
        if (statements[i].outputName == outputName) return static_cast<int>(i);
    return -1;
}

std::string Diagnostic::str() const {
    std::ostringstream os;
    os << file << ':' << line << ':' << col << ": " << code << ": " << message;
    return os.str();
}

// ---------------------------------------------------------------------------
// Lexer

namespace {

enum class Tok { Name, QString, LParen, RParen, LBracket, RBracket, Comma, Semi, Arrow, End };

struct Token {
    Tok kind;
    std::string text;
    int line, col;
};

struct Lexer {
    std::string_view src;
    std::string file;
    size_t pos = 0;
    int line = 1, col = 1;

    [[noreturn]] void fail(int l, int c, const std::string& msg) const {
        Diagnostic d{file, l, c, "SyntaxError", msg};
        throw TcapError(d.str());
    }

    void advance(size_t n) {
        for (size_t i = 0; i < n && pos < src.size(); ++i, ++pos) {
            if (src[pos] == '\n') {
                ++line;
                col = 1;
            } else {
                ++col;
            }
        }
    }

    void skipSpace() {
        for (;;) {
            while (pos < src.size() && std::isspace(static_cast<unsigned char>(src[pos])))
                advance(1);
            if (pos + 1 < src.size() && src[pos] == '/' && src[pos + 1] == '*') {
                int l = line, c = col;
                advance(2);
                while (pos + 1 < src.size() && !(src[pos] == '*' && src[pos + 1] == '/')) advance(1);
                if (pos + 1 >= src.size()) fail(l, c, "unterminated comment");
                advance(2);
                continue;
            }
            break;
        }
    }

    Token next() {
        skipSpace();
        int l = line, c = col;
        if (pos >= src.size()) return {Tok::End, "", l, c};
        char ch = src[pos];
        auto one = [&](Tok k) {
            advance(1);
            return Token{k, std::string(1, ch), l, c};
        };
        switch (ch) {
            case '(': return one(Tok::LParen);
            case ')': return one(Tok::RParen);
            case '[': return one(Tok::LBracket);
            case ']': return one(Tok::RBracket);
            case ',': return one(Tok::Comma);
            case ';': return one(Tok::Semi);
            case '<':
                if (pos + 1 < src.size() && src[pos + 1] == '=') {
                    advance(2);
                    return {Tok::Arrow, "<=", l, c};
                }
                fail(l, c, "expected '<='");
            case '\'': {
                advance(1);
                size_t start = pos;
                while (pos < src.size() && src[pos] != '\'') advance(1);
                if (pos >= src.size()) fail(l, c, "unterminated string");
                std::string text(src.substr(start, pos - start));
                advance(1);
                return {Tok::QString, std::move(text), l, c};
            }
            default:
                if (std::isalpha(static_cast<unsigned char>(ch)) || ch == '_') {
                    size_t start = pos;
                    while (pos < src.size() &&
                           (std::isalnum(static_cast<unsigned char>(src[pos])) || src[pos] == '_'))
                        advance(1);
                    return {Tok::Name, std::string(src.substr(start, pos - start)), l, c};
                }
                fail(l, c, std::string("unexpected character '") + ch + "'");
        }
    }
};

struct Parser {
    Lexer lex;
    Token tok;

    explicit Parser(std::string_view text, const std::string& file) : lex{text, file} {
        tok = lex.next();
    }

    [[noreturn]] void fail(const std::string& code, const std::string& msg) {
        Diagnostic d{lex.file, tok.line, tok.col, code, msg};
        throw TcapError(d.str());
    }

    Token expect(Tok k, const char* what) {
        if (tok.kind != k) fail("SyntaxError", std::string("expected ") + what);
        Token t = tok;
        tok = lex.next();
        return t;
    }

    bool accept(Tok k) {
        if (tok.kind != k) return false;
        tok = lex.next();
        return true;
    }

    std::vector<std::string> namelist() {
        std::vector<std::string> names;
        expect(Tok::LParen, "'('");
        if (tok.kind == Tok::Name) {
            names.push_back(expect(Tok::Name, "name").text);
            while (accept(Tok::Comma)) names.push_back(expect(Tok::Name, "name").text);
        }
        expect(Tok::RParen, "')'");
        return names;
    }

    InputRef input() {
        InputRef in;
        in.list = expect(Tok::Name, "input list name").text;
        in.columns = namelist();
        return in;
    }

    std::vector<KvPair> kvlist() {
        std::vector<KvPair> kv;
        expect(Tok::LBracket, "'['");
        if (tok.kind == Tok::LParen) {
            do {
                expect(Tok::LParen, "'('");
                KvPair p;
                p.key = expect(Tok::QString, "quoted key").text;
                expect(Tok::Comma, "','");
                p.value = expect(Tok::QString, "quoted value").text;
                expect(Tok::RParen, "')'");
                kv.push_back(std::move(p));
            } while (accept(Tok::Comma));
        }
        expect(Tok::RBracket, "']'");
        return kv;
    }

    Program parse() {
        Program p;
        std::unordered_set<std::string> defined;
        while (tok.kind != Tok::End) {
            Statement s;
            s.line = tok.line;
            Token out = expect(Tok::Name, "output list name");
            s.outputName = out.text;
            if (defined.count(s.outputName))
                fail("DuplicateOutput", "duplicate output name " + s.outputName);
            s.outputColumns = namelist();
            expect(Tok::Arrow, "'<='");
            Token op = expect(Tok::Name, "operation kind");
            expect(Tok::LParen, "'('");
            if (op.text == "APPLY") {
                s.op = OpKind::Apply;
                s.inputs.push_back(input());
                expect(Tok::Comma, "','");
                s.inputs.push_back(input());
                expect(Tok::Comma, "','");
                s.computation = expect(Tok::QString, "computation name").text;
                expect(Tok::Comma, "','");
                s.stage = expect(Tok::QString, "stage name").text;
                expect(Tok::Comma, "','");
                s.kv = kvlist();
            } else if (op.text == "FILTER" || op.text == "HASH" || op.text == "AGGREGATE") {
                s.op = op.text == "FILTER"  ? OpKind::Filter
                       : op.text == "HASH" ? OpKind::Hash
                                           : OpKind::Aggregate;
                s.inputs.push_back(input());
                expect(Tok::Comma, "','");
                s.inputs.push_back(input());
                expect(Tok::Comma, "','");
                s.computation = expect(Tok::QString, "computation name").text;
                expect(Tok::Comma, "','");
                s.kv = kvlist();
            } else if (op.text == "JOIN") {
                s.op = OpKind::Join;
                for (int i = 0; i < 4; ++i) {
                    s.inputs.push_back(input());
                    expect(Tok::Comma, "','");
                }
                s.computation = expect(Tok::QString, "computation name").text;
                expect(Tok::Comma, "','");
                s.kv = kvlist();
            } else if (op.text == "OUTPUT") {
                s.op = OpKind::Output;
                s.inputs.push_back(input());
                expect(Tok::Comma, "','");
                s.db = expect(Tok::QString, "database name").text;
                expect(Tok::Comma, "','");
                s.set = expect(Tok::QString, "set name").text;
                expect(Tok::Comma, "','");
                s.computation = expect(Tok::QString, "computation name").text;
                expect(Tok::Comma, "','");
                s.kv = kvlist();
            } else {
                Diagnostic d{lex.file, op.line, op.col, "SyntaxError",
                             "unknown operation kind " + op.text};
                throw TcapError(d.str());
            }
            expect(Tok::RParen, "')'");
            expect(Tok::Semi, "';'");
            for (const auto& in : s.inputs) {
                if (!defined.count(in.list) && in.list.rfind("In", 0) != 0) {
                    Diagnostic d{lex.file, s.line, 1, "UndefinedInput",
                                 "undefined input " + in.list};
                    throw TcapError(d.str());
                }
            }
            defined.insert(s.outputName);
            p.statements.push_back(std::move(s));
        }
        return p;
    }
};

void printNamelist(std::ostringstream& os, const std::vector<std::string>& names) {
    os << '(';
    for (size_t i = 0; i < names.size(); ++i) {
        if (i) os << ',';
        os << names[i];
    }
    os << ')';
}

void printInput(std::ostringstream& os, const InputRef& in) {
    os << in.list;
    printNamelist(os, in.columns);
}

void printKv(std::ostringstream& os, const std::vector<KvPair>& kv) {
    os << '[';
    for (size_t i = 0; i < kv.size(); ++i) {
        if (i) os << ", ";
        os << "('" << kv[i].key << "', '" << kv[i].value << "')";
    }
    os << ']';
}

}  // namespace

Program parse(std::string_view text, const std::string& file) {
    return Parser(text, file).parse();
}

std::string print(const Program& p) {
    std::ostringstream os;
    for (const auto& s : p.statements) {
        os << s.outputName;
        printNamelist(os, s.outputColumns);
        os << " <= " << opKindName(s.op) << '(';
        switch (s.op) {
            case OpKind::Apply:
                printInput(os, s.inputs[0]);
                os << ", ";
                printInput(os, s.inputs[1]);
                os << ", '" << s.computation << "', '" << s.stage << "', ";
                printKv(os, s.kv);
                break;
            case OpKind::Filter:
            case OpKind::Hash:
            case OpKind::Aggregate:
                printInput(os, s.inputs[0]);
                os << ", ";
                printInput(os, s.inputs[1]);
                os << ", '" << s.computation << "', ";
                printKv(os, s.kv);
                break;
            case OpKind::Join:
                for (const auto& in : s.inputs) {
                    printInput(os, in);
                    os << ", ";
                }
                os << "'" << s.computation << "', ";
                printKv(os, s.kv);
                break;
            case OpKind::Output:
                printInput(os, s.inputs[0]);
                os << ", '" << s.db << "', '" << s.set << "', '" << s.computation << "', ";
                printKv(os, s.kv);
                break;
        }
        os << ");\n";
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Validation

namespace {

struct Checker {
    const Program& p;
    std::vector<Diagnostic> out;
    std::unordered_map<std::string, const Statement*> defs;

    void emit(const Statement& s, const std::string& code, const std::string& msg) {
        out.push_back({"<tcap>", s.line, 1, code, msg});
    }

    // columns referenced on a defined list must exist there; sources are open
    void checkColumns(const Statement& s, const InputRef& in) {
        auto it = defs.find(in.list);
        if (it == defs.end()) return;
        const auto& have = it->second->outputColumns;
        for (const auto& c : in.columns) {
            if (std::find(have.begin(), have.end(), c) == have.end())
                emit(s, "UnknownColumn", "column " + c + " not produced by " + in.list);
        }
    }

    void checkSameList(const Statement& s, const InputRef& a, const InputRef& b) {
        if (a.list != b.list)
            emit(s, "ArityViolation",
                 "selection and copy lists must name the same input (" + a.list + " vs " +
                     b.list + ")");
    }

    static bool isPrefix(const std::vector<std::string>& pre, const std::vector<std::string>& all) {
        if (pre.size() > all.size()) return false;
        return std::equal(pre.begin(), pre.end(), all.begin());
    }

    void run() {
        for (const auto& s : p.statements) {
            for (const auto& in : s.inputs) checkColumns(s, in);
            switch (s.op) {
                case OpKind::Apply:
                    checkSameList(s, s.inputs[0], s.inputs[1]);
                    if (s.outputColumns.size() != s.inputs[1].columns.size() + 1 ||
                        !isPrefix(s.inputs[1].columns, s.outputColumns))
                        emit(s, "ArityViolation",
                             "APPLY output must be the copy columns plus exactly one new column");
                    break;
                case OpKind::Filter:
                    checkSameList(s, s.inputs[0], s.inputs[1]);
                    if (s.inputs[0].columns.size() != 1)
                        emit(s, "ArityViolation", "FILTER predicate selection must be one column");
                    if (s.outputColumns != s.inputs[1].columns)
                        emit(s, "UnknownColumn",
                             "FILTER output columns must equal its copy columns");
                    break;
                case OpKind::Hash:
                    checkSameList(s, s.inputs[0], s.inputs[1]);
                    if (s.inputs[0].columns.size() != 1)
                        emit(s, "ArityViolation", "HASH key selection must be one column");
                    if (s.outputColumns.size() != s.inputs[1].columns.size() + 1 ||
                        !isPrefix(s.inputs[1].columns, s.outputColumns))
                        emit(s, "ArityViolation",
                             "HASH output must be the copy columns plus the hash column");
                    break;
                case OpKind::Join: {
                    checkSameList(s, s.inputs[0], s.inputs[1]);
                    checkSameList(s, s.inputs[2], s.inputs[3]);
                    if (s.inputs[0].columns.size() != 1 || s.inputs[2].columns.size() != 1)
                        emit(s, "ArityViolation", "JOIN hash selections must be one column each");
                    std::vector<std::string> expect = s.inputs[1].columns;
                    expect.insert(expect.end(), s.inputs[3].columns.begin(),
                                  s.inputs[3].columns.end());
                    if (s.outputColumns != expect)
                        emit(s, "ArityViolation",
                             "JOIN output columns must be left copy followed by right copy");
                    break;
                }
                case OpKind::Aggregate:
                    checkSameList(s, s.inputs[0], s.inputs[1]);
                    if (s.inputs[0].columns.size() != 1 || s.inputs[1].columns.size() != 1)
                        emit(s, "ArityViolation",
                             "AGGREGATE takes one key column and one value column");
                    if (s.outputColumns.size() != 2)
                        emit(s, "ArityViolation", "AGGREGATE produces a (key, value) list");
                    break;
                case OpKind::Output:
                    if (!s.outputColumns.empty())
                        emit(s, "ArityViolation", "OUTPUT defines no vector list columns");
                    break;
            }
            defs[s.outputName] = &s;
        }
    }
};

}  // namespace

std::vector<Diagnostic> validate(const Program& p) {
    Checker c{p, {}, {}};
    c.run();
    return c.out;
}

Dag build_dag(const Program& p) {
    auto diags = validate(p);
    if (!diags.empty()) throw TcapError("build_dag on invalid program: " + diags[0].str());
    Dag d;
    auto ensureNode = [&](const std::string& name, bool isSource, int idx) -> DagNode& {
        auto it = d.index.find(name);
        if (it != d.index.end()) return d.nodes[it->second];
        d.index.emplace(name, d.nodes.size());
        d.nodes.push_back({name, isSource, idx, {}});
        return d.nodes.back();
    };
    for (size_t i = 0; i < p.statements.size(); ++i) {
        const auto& s = p.statements[i];
        std::unordered_set<std::string> seen;
        for (const auto& in : s.inputs) {
            if (in.list == s.outputName) throw CyclicProgram("statement reads its own output");
            if (!seen.insert(in.list).second) continue;
            bool src = p.find(in.list) == nullptr;
            ensureNode(in.list, src, src ? -1 : p.indexOf(in.list));
            d.nodes[d.index[in.list]].consumers.push_back(s.outputName);
        }
        ensureNode(s.outputName, false, static_cast<int>(i));
    }
    // defined-earlier parsing already prevents cycles; this guards manual
    // program construction
    for (const auto& n : d.nodes) {
        if (!n.isSource && n.stmtIndex >= 0) {
            for (const auto& in : p.statements[static_cast<size_t>(n.stmtIndex)].inputs) {
                int j = p.indexOf(in.list);
                if (j >= 0 && j >= n.stmtIndex)
                    throw CyclicProgram("statement " + n.name + " reads a later definition");
            }
        }
    }
    return d;
}

const DagNode& Dag::at(std::string_view name) const {
    auto it = index.find(std::string(name));
    if (it == index.end()) throw PcError("unknown dag node " + std::string(name));
    return nodes[it->second];
}

size_t Dag::consumerCount(std::string_view name) const { return at(name).consumers.size(); }

}  // namespace pc::tcap
