#include "pc/lambda.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <mutex>
#include <set>
#include <unordered_map>

namespace pc::lam {

namespace {

bool isNumeric(TypeTag t) { return t == TypeTag::Int || t == TypeTag::Double; }

bool isComparison(const std::string& op) {
    return op == "==" || op == "!=" || op == ">" || op == "<" || op == ">=" || op == "<=";
}

bool isArith(const std::string& op) { return op == "+" || op == "-" || op == "*"; }

std::string mirrored(const std::string& op) {
    if (op == ">") return "<";
    if (op == "<") return ">";
    if (op == ">=") return "<=";
    if (op == "<=") return ">=";
    return op;  // == and != are symmetric
}

TermPtr leaf(TermKind k, int slot, std::string name, TypeTag out) {
    if (slot < 0) throw PcError("negative input slot");
    auto t = std::make_shared<LambdaTerm>();
    t->kind = k;
    t->inputSlot = slot;
    t->name = std::move(name);
    t->outputType = out;
    return t;
}

std::unordered_map<std::string, NativeFunction>& nativeRegistry() {
    static std::unordered_map<std::string, NativeFunction> reg;
    return reg;
}

std::mutex& nativeMutex() {
    static std::mutex m;
    return m;
}

}  // namespace

TermPtr make_lambda_from_member(int slot, const std::string& attName, TypeTag out) {
    return leaf(TermKind::MemberAccess, slot, attName, out);
}

TermPtr make_lambda_from_method(int slot, const std::string& methodName, TypeTag out) {
    return leaf(TermKind::MethodCall, slot, methodName, out);
}

TermPtr make_lambda_from_self(int slot) {
    return leaf(TermKind::Self, slot, "", TypeTag::Object);
}

TermPtr make_lambda(int slot, const std::string& functionId) {
    return leaf(TermKind::NativeOpaque, slot, functionId, native(functionId).outputType);
}

TermPtr make_constant(int64_t v) {
    auto t = std::make_shared<LambdaTerm>();
    t->kind = TermKind::Constant;
    t->literal = std::to_string(v);
    t->outputType = TypeTag::Int;
    return t;
}

TermPtr make_constant(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    auto t = std::make_shared<LambdaTerm>();
    t->kind = TermKind::Constant;
    t->literal = buf;
    t->outputType = TypeTag::Double;
    return t;
}

TermPtr make_constant(const std::string& v) {
    auto t = std::make_shared<LambdaTerm>();
    t->kind = TermKind::Constant;
    t->literal = v;
    t->outputType = TypeTag::String;
    return t;
}

TermPtr make_binary(const std::string& op, TermPtr lhs, TermPtr rhs) {
    if (!lhs || !rhs) throw PcError("null operand");
    TypeTag result;
    if (isComparison(op)) {
        result = TypeTag::Bool;
    } else if (op == "&&" || op == "||") {
        if (lhs->outputType != TypeTag::Bool || rhs->outputType != TypeTag::Bool)
            throw TypeMismatch("logical " + op + " over non-boolean operands");
        result = TypeTag::Bool;
    } else if (isArith(op)) {
        if (!isNumeric(lhs->outputType) || !isNumeric(rhs->outputType))
            throw TypeMismatch("arithmetic " + op + " over non-numeric operands");
        result = (lhs->outputType == TypeTag::Double || rhs->outputType == TypeTag::Double)
                     ? TypeTag::Double
                     : TypeTag::Int;
    } else {
        throw PcError("unknown operator " + op);
    }
    auto t = std::make_shared<LambdaTerm>();
    t->kind = TermKind::BinaryOp;
    t->name = op;
    t->outputType = result;
    t->children = {std::move(lhs), std::move(rhs)};
    return t;
}

TermPtr make_not(TermPtr x) {
    if (!x) throw PcError("null operand");
    if (x->outputType != TypeTag::Bool) throw TypeMismatch("! over a non-boolean operand");
    auto t = std::make_shared<LambdaTerm>();
    t->kind = TermKind::BinaryOp;
    t->name = "!";
    t->outputType = TypeTag::Bool;
    t->children = {std::move(x)};
    return t;
}

void register_native(NativeFunction f) {
    std::lock_guard<std::mutex> lock(nativeMutex());
    nativeRegistry()[f.id] = std::move(f);
}

const NativeFunction* find_native(const std::string& id) {
    std::lock_guard<std::mutex> lock(nativeMutex());
    auto it = nativeRegistry().find(id);
    return it == nativeRegistry().end() ? nullptr : &it->second;
}

const NativeFunction& native(const std::string& id) {
    const NativeFunction* f = find_native(id);
    if (!f) throw UnknownFunction("native function '" + id + "' is not registered");
    return *f;
}

// -- graph construction -----------------------------------------------------

namespace {

CompPtr node(Computation c) { return std::make_shared<Computation>(std::move(c)); }

}  // namespace

CompPtr make_reader(const std::string& db, const std::string& set, const std::string& name) {
    Computation c;
    c.kind = CompKind::Reader;
    c.name = name;
    c.db = db;
    c.set = set;
    return node(std::move(c));
}

CompPtr make_selection(CompPtr input, TermPtr selection, const std::string& name,
                       TermPtr projection) {
    if (!input) throw PcError("selection without input");
    Computation c;
    c.kind = CompKind::Selection;
    c.name = name;
    c.inputs = {std::move(input)};
    c.selection = std::move(selection);
    c.projection = std::move(projection);
    return node(std::move(c));
}

CompPtr make_multiselect(CompPtr input, TermPtr projection, const std::string& name) {
    if (!input) throw PcError("multiselect without input");
    if (!projection) throw PcError("multiselect requires a projection");
    Computation c;
    c.kind = CompKind::MultiSelect;
    c.name = name;
    c.inputs = {std::move(input)};
    c.projection = std::move(projection);
    return node(std::move(c));
}

CompPtr make_join(std::vector<CompPtr> inputs, TermPtr selection, const std::string& name,
                  TermPtr projection) {
    if (inputs.size() < 2) throw PcError("join requires at least two inputs");
    if (!selection) throw PcError("join requires a selection predicate");
    Computation c;
    c.kind = CompKind::Join;
    c.name = name;
    c.inputs = std::move(inputs);
    c.selection = std::move(selection);
    c.projection = std::move(projection);
    return node(std::move(c));
}

CompPtr make_aggregate(CompPtr input, TermPtr keyProjection, TermPtr valueProjection,
                       const std::string& name, const std::string& combineFn) {
    if (!input) throw PcError("aggregate without input");
    if (!keyProjection || !valueProjection)
        throw PcError("aggregate requires key and value projections");
    Computation c;
    c.kind = CompKind::Aggregate;
    c.name = name;
    c.inputs = {std::move(input)};
    c.keyProjection = std::move(keyProjection);
    c.valueProjection = std::move(valueProjection);
    c.combineFn = combineFn;
    return node(std::move(c));
}

CompPtr make_writer(CompPtr input, const std::string& db, const std::string& set,
                    const std::string& name) {
    if (!input) throw PcError("writer without input");
    Computation c;
    c.kind = CompKind::Writer;
    c.name = name;
    c.inputs = {std::move(input)};
    c.db = db;
    c.set = set;
    return node(std::move(c));
}

// -- compilation ------------------------------------------------------------

namespace {

using tcap::OpKind;
using tcap::Statement;

void slotsUsed(const TermPtr& t, std::set<int>& out) {
    if (t->inputSlot >= 0) out.insert(t->inputSlot);
    for (const auto& c : t->children) slotsUsed(c, out);
}

struct CompResult {
    std::string list;
    std::vector<std::string> cols;  // carried argument columns
};

struct Compiler {
    tcap::Program out;
    std::map<const Computation*, CompResult> done;
    std::map<std::string, int> stageSeq;
    std::map<std::string, int> colSeq;
    std::map<std::string, int> listSeq;

    std::string stage(const std::string& kind) {
        return kind + "_" + std::to_string(++stageSeq[kind]);
    }
    std::string col(const std::string& prefix) {
        return prefix + std::to_string(++colSeq[prefix]);
    }
    std::string list(const std::string& comp) {
        return comp + "_" + std::to_string(++listSeq[comp]);
    }

    CompResult compile(const CompPtr& c);
};

// Emits the APPLY chain for one lambda tree over a fixed base of carried
// columns; copy lists carry base plus still-live intermediate columns.
struct TermEmitter {
    Compiler& c;
    std::string comp;
    std::string list;                    // current vector list
    std::vector<std::string> base;       // columns carried through every stage
    std::vector<std::string> slotCols;   // argument column per input slot
    std::vector<std::string> pending;    // live intermediate columns

    std::vector<std::string> copyList() {
        std::vector<std::string> copy = base;
        copy.insert(copy.end(), pending.begin(), pending.end());
        return copy;
    }

    void consume(const std::string& col) {
        auto it = std::find(pending.begin(), pending.end(), col);
        if (it != pending.end()) pending.erase(it);
    }

    std::string emitApply(const std::vector<std::string>& sel, std::vector<tcap::KvPair> kv,
                          const std::string& stageKind, const std::string& colPrefix) {
        for (const auto& s : sel) consume(s);
        std::vector<std::string> copy = copyList();
        Statement st;
        st.op = OpKind::Apply;
        st.outputName = c.list(comp);
        st.computation = comp;
        st.stage = c.stage(stageKind);
        st.kv = std::move(kv);
        std::string fresh = c.col(colPrefix);
        st.inputs = {{list, sel}, {list, copy}};
        st.outputColumns = copy;
        st.outputColumns.push_back(fresh);
        c.out.statements.push_back(std::move(st));
        list = c.out.statements.back().outputName;
        pending.push_back(fresh);
        return fresh;
    }

    std::string argCol(int slot) {
        if (slot < 0 || size_t(slot) >= slotCols.size())
            throw PcError("input slot " + std::to_string(slot) + " out of range for " + comp);
        return slotCols[size_t(slot)];
    }

    std::string emit(const TermPtr& t) {
        switch (t->kind) {
            case TermKind::Self:
                return argCol(t->inputSlot);
            case TermKind::Constant:
                throw TypeMismatch("constant-only expression in " + comp);
            case TermKind::MemberAccess:
                return emitApply({argCol(t->inputSlot)},
                                 {{"type", "attAccess"}, {"attName", t->name}}, "att_access",
                                 "nm");
            case TermKind::MethodCall:
                return emitApply({argCol(t->inputSlot)},
                                 {{"type", "methodCall"}, {"methodName", t->name}},
                                 "method_call", "mt");
            case TermKind::NativeOpaque:
                return emitApply({argCol(t->inputSlot)}, {{"functionId", t->name}}, "native",
                                 "fx");
            case TermKind::BinaryOp:
                break;
        }
        const std::string& op = t->name;
        if (op == "!") {
            std::string a = emit(t->children[0]);
            return emitApply({a}, {{"type", "bool_not"}}, "not", "bl");
        }
        const TermPtr& l = t->children[0];
        const TermPtr& r = t->children[1];
        bool lc = l->kind == TermKind::Constant, rc = r->kind == TermKind::Constant;
        if (lc && rc) throw TypeMismatch("constant-only expression in " + comp);
        if (lc || rc) {
            const TermPtr& v = lc ? r : l;
            const TermPtr& k = lc ? l : r;
            std::string effOp = lc ? mirrored(op) : op;
            std::string a = emit(v);
            if (isComparison(op))
                return emitApply({a},
                                 {{"type", "const_comparison"}, {"op", effOp},
                                  {"value", k->literal}},
                                 "cmp", "bl");
            // arithmetic with a constant; cside marks a left-hand constant
            std::vector<tcap::KvPair> kv = {
                {"type", "const_arith"}, {"op", op}, {"value", k->literal}};
            if (lc) kv.push_back({"cside", "l"});
            return emitApply({a}, std::move(kv), "arith", "ar");
        }
        std::string a = emit(l);
        std::string b = emit(r);
        if (op == "==")
            return emitApply({a, b}, {{"type", "equalityCheck"}}, "eq", "bl");
        if (op == "&&") return emitApply({a, b}, {{"type", "bool_and"}}, "and", "bl");
        if (op == "||") return emitApply({a, b}, {{"type", "bool_or"}}, "or", "bl");
        if (isComparison(op))
            return emitApply({a, b}, {{"type", "comparison"}, {"op", op}}, "cmp", "bl");
        return emitApply({a, b}, {{"type", "arith"}, {"op", op}}, "arith", "ar");
    }

    void emitFilter(const std::string& predCol) {
        consume(predCol);
        std::vector<std::string> copy = copyList();
        Statement st;
        st.op = OpKind::Filter;
        st.outputName = c.list(comp);
        st.computation = comp;
        st.inputs = {{list, {predCol}}, {list, copy}};
        st.outputColumns = copy;
        c.out.statements.push_back(std::move(st));
        list = c.out.statements.back().outputName;
    }

    std::string emitHash(const std::string& keyCol) {
        consume(keyCol);
        std::vector<std::string> copy = copyList();
        Statement st;
        st.op = OpKind::Hash;
        st.outputName = c.list(comp);
        st.computation = comp;
        st.kv = {};
        std::string fresh = c.col("hash");
        st.inputs = {{list, {keyCol}}, {list, copy}};
        st.outputColumns = copy;
        st.outputColumns.push_back(fresh);
        c.out.statements.push_back(std::move(st));
        list = c.out.statements.back().outputName;
        return fresh;
    }
};

void requireBool(const TermPtr& t, const std::string& comp) {
    if (t->outputType != TypeTag::Bool)
        throw TypeMismatch("selection predicate of " + comp + " is not boolean");
}

// Flatten a top-level && tree into conjuncts.
void conjunctsOf(const TermPtr& t, std::vector<TermPtr>& out) {
    if (t->kind == TermKind::BinaryOp && t->name == "&&") {
        conjunctsOf(t->children[0], out);
        conjunctsOf(t->children[1], out);
    } else {
        out.push_back(t);
    }
}

CompResult Compiler::compile(const CompPtr& c) {
    auto it = done.find(c.get());
    if (it != done.end()) return it->second;
    CompResult res;
    switch (c->kind) {
        case CompKind::Reader:
            res = {"In" + c->set, {c->set}};
            break;
        case CompKind::Selection:
        case CompKind::MultiSelect: {
            CompResult in = compile(c->inputs[0]);
            TermEmitter te{*this, c->name, in.list, in.cols, in.cols, {}};
            bool identity = !c->selection || c->selection->kind == TermKind::Self;
            if (!identity) {
                requireBool(c->selection, c->name);
                te.emitFilter(te.emit(c->selection));
            }
            if (c->projection && c->projection->kind != TermKind::Self) {
                std::string proj = te.emit(c->projection);
                res = {te.list, {proj}};
            } else {
                res = {te.list, te.base};
            }
            break;
        }
        case CompKind::Join: {
            std::vector<CompResult> ins;
            for (const auto& i : c->inputs) {
                ins.push_back(compile(i));
                if (ins.back().cols.size() != 1)
                    throw PcError("join input of " + c->name +
                                  " must produce a single column (add a projection)");
            }
            std::vector<TermPtr> conj;
            conjunctsOf(c->selection, conj);
            requireBool(c->selection, c->name);

            // slot -> carried column (grows as inputs are joined in)
            std::vector<std::string> slotCols(c->inputs.size());
            slotCols[0] = ins[0].cols[0];
            std::string curList = ins[0].list;
            std::vector<std::string> curCols = {slotCols[0]};
            std::set<int> joined = {0};
            for (size_t k = 1; k < ins.size(); ++k) {
                // an equality conjunct linking the accumulated side to input k
                TermPtr leftKey, rightKey;
                for (const auto& cj : conj) {
                    if (cj->kind != TermKind::BinaryOp || cj->name != "==") continue;
                    std::set<int> ls, rs;
                    slotsUsed(cj->children[0], ls);
                    slotsUsed(cj->children[1], rs);
                    auto inJoined = [&](const std::set<int>& s) {
                        return !s.empty() &&
                               std::all_of(s.begin(), s.end(),
                                           [&](int x) { return joined.count(x) > 0; });
                    };
                    auto isK = [&](const std::set<int>& s) {
                        return s.size() == 1 && *s.begin() == int(k);
                    };
                    if (inJoined(ls) && isK(rs)) {
                        leftKey = cj->children[0];
                        rightKey = cj->children[1];
                        break;
                    }
                    if (isK(ls) && inJoined(rs)) {
                        leftKey = cj->children[1];
                        rightKey = cj->children[0];
                        break;
                    }
                }
                if (!leftKey)
                    throw PcError("join " + c->name + " has no equality predicate linking input " +
                                  std::to_string(k));

                TermEmitter lte{*this, c->name, curList, curCols, slotCols, {}};
                std::string lh = lte.emitHash(lte.emit(leftKey));
                std::vector<std::string> rSlots(c->inputs.size());
                rSlots[k] = ins[k].cols[0];
                TermEmitter rte{*this, c->name, ins[k].list, {ins[k].cols[0]}, rSlots, {}};
                std::string rh = rte.emitHash(rte.emit(rightKey));

                Statement st;
                st.op = OpKind::Join;
                st.outputName = list(c->name);
                st.computation = c->name;
                st.inputs = {{lte.list, {lh}},
                             {lte.list, lte.base},
                             {rte.list, {rh}},
                             {rte.list, rte.base}};
                st.outputColumns = lte.base;
                st.outputColumns.insert(st.outputColumns.end(), rte.base.begin(),
                                        rte.base.end());
                out.statements.push_back(st);
                curList = st.outputName;
                curCols = st.outputColumns;
                slotCols[k] = ins[k].cols[0];
                joined.insert(int(k));
            }

            // the full predicate is re-evaluated after the join (hash matches
            // may be accidental); the optimizer pushes parts back down
            TermEmitter te{*this, c->name, curList, curCols, slotCols, {}};
            te.emitFilter(te.emit(c->selection));
            if (c->projection && c->projection->kind != TermKind::Self) {
                std::string proj = te.emit(c->projection);
                res = {te.list, {proj}};
            } else {
                res = {te.list, te.base};
            }
            break;
        }
        case CompKind::Aggregate: {
            CompResult in = compile(c->inputs[0]);
            if (in.cols.size() != 1)
                throw PcError("aggregate input of " + c->name + " must produce a single column");
            TermEmitter te{*this, c->name, in.list, in.cols, in.cols, {}};
            std::string kcol = te.emit(c->keyProjection);
            std::string vcol = te.emit(c->valueProjection);
            te.consume(kcol);
            te.consume(vcol);
            Statement st;
            st.op = OpKind::Aggregate;
            st.outputName = list(c->name);
            st.computation = c->name;
            st.inputs = {{te.list, {kcol}}, {te.list, {vcol}}};
            st.outputColumns = {col("key"), col("val")};
            st.kv = {{"fn", c->combineFn}};
            out.statements.push_back(st);
            res = {st.outputName, st.outputColumns};
            break;
        }
        case CompKind::Writer: {
            CompResult in = compile(c->inputs[0]);
            Statement st;
            st.op = OpKind::Output;
            st.outputName = list(c->name);
            st.computation = c->name;
            st.db = c->db;
            st.set = c->set;
            st.inputs = {{in.list, in.cols}};
            out.statements.push_back(st);
            res = {st.outputName, {}};
            break;
        }
    }
    done.emplace(c.get(), res);
    return res;
}

}  // namespace

tcap::Program compile_to_tcap(const std::vector<CompPtr>& sinks) {
    if (sinks.empty()) throw PcError("no sinks to compile");
    Compiler comp;
    for (const auto& s : sinks) {
        if (!s || s->kind != CompKind::Writer) throw PcError("compile target must be a writer");
        comp.compile(s);
    }
    auto diags = tcap::validate(comp.out);
    if (!diags.empty()) throw PcError("compiler produced invalid TCAP: " + diags[0].str());
    return comp.out;
}

}  // namespace pc::lam
