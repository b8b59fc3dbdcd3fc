#include "pc/engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_map>

#include "pc/detail/map_sink.hpp"
#include "pc/lambda.hpp"

namespace pc::eng {

// ---------------------------------------------------------------------------
// columns

size_t Column::size() const {
    return data.index() == 0 ? std::get<0>(data).size() : std::get<1>(data).size();
}

ScalarValue Column::at(size_t i) const {
    if (data.index() == 0) return std::get<0>(data)[i];
    return deref_field(std::get<1>(data)[i]);
}

void Column::append(ScalarValue v) { std::get<0>(data).push_back(std::move(v)); }

void Column::appendRaw(FieldRef f) {
    if (data.index() == 0 && std::get<0>(data).empty()) data = std::vector<FieldRef>{};
    std::get<1>(data).push_back(f);
}

ScalarValue deref_field(const FieldRef& f) {
    switch (f.tag) {
        case FieldTag::Int64:
            return *reinterpret_cast<const int64_t*>(f.addr);
        case FieldTag::Int32:
            return int64_t(*reinterpret_cast<const int32_t*>(f.addr));
        case FieldTag::Double:
            return *reinterpret_cast<const double*>(f.addr);
        case FieldTag::Bool:
            return *reinterpret_cast<const bool*>(f.addr);
        case FieldTag::UInt64:
            return *reinterpret_cast<const uint64_t*>(f.addr);
        case FieldTag::HandleField: {
            const auto* s = reinterpret_cast<const StoredHandle*>(f.addr);
            std::byte* t = pc::detail::storedTarget(*s);
            if (!t) return std::monostate{};
            return ObjRef{payloadOf(reinterpret_cast<const ObjectHeader*>(t)), s->typeCode};
        }
    }
    return std::monostate{};
}

uint64_t hash_cell(const ScalarValue& v) {
    switch (v.index()) {
        case 0:
            return 0;
        case 1: {
            int64_t x = std::get<int64_t>(v);
            return hash64(&x, sizeof x);
        }
        case 2: {
            double d = std::get<double>(v);
            return hash64(&d, sizeof d);
        }
        case 3: {
            int64_t x = std::get<bool>(v) ? 1 : 0;
            return hash64(&x, sizeof x);
        }
        case 4: {
            uint64_t u = std::get<uint64_t>(v);
            int64_t x = int64_t(u);
            return hash64(&x, sizeof x);
        }
        case 5: {
            const auto& s = std::get<std::string>(v);
            return hash64(s.data(), s.size());
        }
        case 6: {
            const ObjRef& r = std::get<ObjRef>(v);
            if (r.typeCode == typeCodeOf<PString>()) {
                auto sv = reinterpret_cast<const PString*>(r.payload)->view();
                return hash64(sv.data(), sv.size());
            }
            if (isSimpleType(r.typeCode)) return hash64(r.payload, simpleTypeSize(r.typeCode));
            const auto& d = TypeRegistry::instance().resolve(r.typeCode);
            if (!d.variableSize) return hash64(r.payload, d.payloadSize);
            return hash64(&r.payload, sizeof r.payload);  // identity hash
        }
    }
    return 0;
}

namespace {

bool isIntCell(const ScalarValue& v) {
    return v.index() == 1 || v.index() == 3 || v.index() == 4;
}

bool isNumCell(const ScalarValue& v) { return isIntCell(v) || v.index() == 2; }

int64_t asInt(const ScalarValue& v) {
    switch (v.index()) {
        case 1:
            return std::get<int64_t>(v);
        case 3:
            return std::get<bool>(v) ? 1 : 0;
        case 4:
            return int64_t(std::get<uint64_t>(v));
        case 2:
            return int64_t(std::get<double>(v));
        default:
            throw StageTypeError("expected a numeric cell");
    }
}

double asDouble(const ScalarValue& v) {
    if (v.index() == 2) return std::get<double>(v);
    return double(asInt(v));
}

std::string_view stringView(const ScalarValue& v) {
    if (v.index() == 5) return std::get<std::string>(v);
    if (v.index() == 6) {
        const ObjRef& r = std::get<ObjRef>(v);
        if (r.typeCode == typeCodeOf<PString>())
            return reinterpret_cast<const PString*>(r.payload)->view();
    }
    throw StageTypeError("expected a string cell");
}

bool isStringCell(const ScalarValue& v) {
    return v.index() == 5 ||
           (v.index() == 6 && std::get<ObjRef>(v).typeCode == typeCodeOf<PString>());
}

}  // namespace

bool cell_equals(const ScalarValue& a, const ScalarValue& b) {
    if (a.index() == 0 || b.index() == 0) return a.index() == b.index();
    if (isNumCell(a) && isNumCell(b)) {
        if (isIntCell(a) && isIntCell(b)) return asInt(a) == asInt(b);
        return asDouble(a) == asDouble(b);
    }
    if (isStringCell(a) && isStringCell(b)) return stringView(a) == stringView(b);
    if (a.index() == 6 && b.index() == 6) {
        const ObjRef& x = std::get<ObjRef>(a);
        const ObjRef& y = std::get<ObjRef>(b);
        if (x.typeCode != y.typeCode) return false;
        if (isSimpleType(x.typeCode))
            return std::memcmp(x.payload, y.payload, simpleTypeSize(x.typeCode)) == 0;
        const auto& d = TypeRegistry::instance().resolve(x.typeCode);
        if (!d.variableSize) return std::memcmp(x.payload, y.payload, d.payloadSize) == 0;
        return x.payload == y.payload;
    }
    return false;
}

bool cell_truthy(const ScalarValue& v) {
    switch (v.index()) {
        case 0:
            return false;
        case 3:
            return std::get<bool>(v);
        case 1:
            return std::get<int64_t>(v) != 0;
        case 4:
            return std::get<uint64_t>(v) != 0;
        case 2:
            return std::get<double>(v) != 0.0;
        default:
            throw StageTypeError("non-boolean predicate cell");
    }
}

const Column* VectorList::find(const std::string& name) const {
    for (const auto& [n, c] : cols)
        if (n == name) return &c;
    return nullptr;
}

Column* VectorList::find(const std::string& name) {
    for (auto& [n, c] : cols)
        if (n == name) return &c;
    return nullptr;
}

// ---------------------------------------------------------------------------
// input-set construction

using RowVec = PVector<Handle<AnyObject>>;

namespace {

BlockPtr newRowPage(size_t pageSize) {
    BlockPtr b = make_block(pageSize);
    auto root = make_object<RowVec>();
    set_block_root(*b, root);
    return b;
}

}  // namespace

MaterializedList build_object_set(size_t rowCount, size_t pageSize,
                                  const std::function<Handle<AnyObject>(size_t)>& makeRow,
                                  const std::string& column) {
    std::vector<BlockPtr> pages;
    BlockPtr cur = newRowPage(pageSize);
    bool fresh = true;
    for (size_t i = 0; i < rowCount; ++i) {
        for (;;) {
            try {
                auto root = get_block_root<RowVec>(*cur);
                root->push_back(makeRow(i));
                fresh = false;
                break;
            } catch (const OutOfBlockMemory&) {
                if (fresh) throw;  // a single row exceeds the page size
                freeze_block(cur);
                pages.push_back(cur);
                cur = newRowPage(pageSize);
                fresh = true;
            }
        }
    }
    freeze_block(cur);
    pages.push_back(cur);
    return scan_object_pages(std::move(pages), column);
}

MaterializedList scan_object_pages(std::vector<BlockPtr> pages, const std::string& column) {
    MaterializedList out;
    out.columns = {column};
    for (const auto& b : pages) {
        auto root = get_block_root<RowVec>(*b);
        if (!root.get()) continue;
        const RowVec& v = *root;
        for (uint64_t i = 0; i < v.size(); ++i) {
            std::byte* p = v.elemPayload(i);
            if (!p) {
                out.rows.push_back({std::monostate{}});
            } else {
                out.rows.push_back({ObjRef{p, v.slots()[i].typeCode}});
            }
        }
    }
    out.pages = std::move(pages);
    return out;
}

// ---------------------------------------------------------------------------
// pipeline decomposition

std::vector<Pipeline> decompose(const tcap::Program& p) {
    using tcap::OpKind;
    auto dag = tcap::build_dag(p);
    std::vector<Pipeline> pipes;
    std::map<std::string, int> open;  // list name -> extendable pipeline

    auto probeSide = [&](const tcap::Statement& j) {
        const std::string* h = j.kvGet("probe");
        return (h && *h == "left") ? 0 : 1;  // default: last-listed input probes
    };

    auto pipelineFor = [&](const std::string& list) -> Pipeline& {
        auto it = open.find(list);
        if (it != open.end()) {
            Pipeline& pl = pipes[size_t(it->second)];
            open.erase(it);
            return pl;
        }
        pipes.push_back(Pipeline{list, {}, SinkKind::Materialize, -1, -1});
        return pipes.back();
    };

    for (int i = 0; i < int(p.statements.size()); ++i) {
        const tcap::Statement& s = p.statements[size_t(i)];
        std::string inList =
            s.op == OpKind::Join ? s.inputs[size_t(probeSide(s) * 2)].list : s.inputs[0].list;
        Pipeline& pl = pipelineFor(inList);
        size_t self = size_t(&pl - pipes.data());
        pl.stmts.push_back(i);

        if (s.op == OpKind::Aggregate) {
            pl.sink = SinkKind::Aggregation;
            pl.sinkStmt = i;
            continue;
        }
        if (s.op == OpKind::Output) {
            pl.sink = SinkKind::Output;
            pl.sinkStmt = i;
            continue;
        }
        size_t consumers = dag.consumerCount(s.outputName);
        if (consumers == 1) {
            // a build-side hash list ends its pipeline at the join
            int ci = p.indexOf(dag.at(s.outputName).consumers[0]);
            const tcap::Statement& c = p.statements[size_t(ci)];
            if (c.op == OpKind::Join) {
                int build = 1 - probeSide(c);
                if (c.inputs[size_t(build * 2)].list == s.outputName) {
                    pl.sink = SinkKind::JoinBuild;
                    pl.sinkStmt = ci;
                    pl.buildSide = build;
                    continue;
                }
            }
            open[s.outputName] = int(self);
            continue;
        }
        // multi-consumer (or dangling) outputs are materialized
        pl.sink = SinkKind::Materialize;
        pl.sinkStmt = i;
    }
    std::stable_sort(pipes.begin(), pipes.end(), [](const Pipeline& a, const Pipeline& b) {
        return a.stmts.back() < b.stmts.back();
    });
    return pipes;
}

// ---------------------------------------------------------------------------
// stage evaluation

namespace {

using tcap::OpKind;
using tcap::Statement;

const BehaviorDescriptor& descriptorOf(TypeCode tc) {
    return TypeRegistry::instance().resolve(tc);
}

ObjRef objCell(const ScalarValue& v, const char* what) {
    if (v.index() != 6) throw StageTypeError(std::string("expected an object cell for ") + what);
    return std::get<ObjRef>(v);
}

ScalarValue parseLiteral(const std::string& s) {
    if (s.find_first_of(".eE") != std::string::npos) return std::stod(s);
    try {
        return int64_t(std::stoll(s));
    } catch (...) {
        return s;  // a string constant
    }
}

bool compareCells(const std::string& op, const ScalarValue& a, const ScalarValue& b) {
    if (op == "==") return cell_equals(a, b);
    if (op == "!=") return !cell_equals(a, b);
    int c;
    if (isStringCell(a) && isStringCell(b)) {
        auto va = stringView(a), vb = stringView(b);
        c = va < vb ? -1 : (va == vb ? 0 : 1);
    } else {
        double x = asDouble(a), y = asDouble(b);
        c = x < y ? -1 : (x == y ? 0 : 1);
    }
    if (op == ">") return c > 0;
    if (op == "<") return c < 0;
    if (op == ">=") return c >= 0;
    if (op == "<=") return c <= 0;
    throw StageTypeError("unknown comparison op " + op);
}

ScalarValue arithCells(const std::string& op, const ScalarValue& a, const ScalarValue& b) {
    if (isIntCell(a) && isIntCell(b)) {
        int64_t x = asInt(a), y = asInt(b);
        if (op == "+") return x + y;
        if (op == "-") return x - y;
        if (op == "*") return x * y;
    } else {
        double x = asDouble(a), y = asDouble(b);
        if (op == "+") return x + y;
        if (op == "-") return x - y;
        if (op == "*") return x * y;
    }
    throw StageTypeError("unknown arithmetic op " + op);
}

void compact(VectorList& vl, const std::vector<size_t>& keep) {
    for (auto& [name, col] : vl.cols) {
        if (col.data.index() == 0) {
            auto& cells = std::get<0>(col.data);
            std::vector<ScalarValue> next;
            next.reserve(keep.size());
            for (size_t i : keep) next.push_back(std::move(cells[i]));
            cells = std::move(next);
        } else {
            auto& fs = std::get<1>(col.data);
            std::vector<FieldRef> next;
            next.reserve(keep.size());
            for (size_t i : keep) next.push_back(fs[i]);
            fs = std::move(next);
        }
    }
    vl.length = keep.size();
}

// Project the named columns of src (by reference-copy of whole columns).
VectorList projectColumns(const VectorList& src, const std::vector<std::string>& names,
                          const std::vector<std::string>& outNames) {
    VectorList out;
    out.length = src.length;
    for (size_t i = 0; i < names.size(); ++i) {
        const Column* c = src.find(names[i]);
        if (!c) throw StageTypeError("unknown column " + names[i]);
        out.cols.emplace_back(outNames.empty() ? names[i] : outNames[i], *c);
    }
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// sinks

namespace {

// Page-writing sink shared by Output and Materialize: object cells are
// lazily deep-copied onto live output pages; full pages that still belong to
// an in-flight chunk are zombies (at most two held, then the oldest is
// flushed).
struct PageSink {
    size_t pageSize;
    BlockPtr live;
    std::vector<BlockPtr> done;
    std::vector<BlockPtr> zombies;
    PipelineMetrics* pm;

    void ensureLive() {
        if (!live) {
            live = newRowPage(pageSize);
            ++pm->pagesOut;
        }
    }

    void rotate(bool midChunk) {
        freeze_block(live);
        if (midChunk) {
            zombies.push_back(live);
            while (zombies.size() > 2) {
                done.push_back(zombies.front());
                zombies.erase(zombies.begin());
            }
            pm->zombieHighWater = std::max<uint64_t>(pm->zombieHighWater, zombies.size());
        } else {
            done.push_back(live);
        }
        live = nullptr;
    }

    ObjRef writeObject(const ObjRef& r, bool firstTryOnFreshPage = false) {
        for (;;) {
            ensureLive();
            try {
                auto root = get_block_root<RowVec>(*live);
                Handle<AnyObject> h;
                pc::detail::bindStored(const_cast<StoredHandle&>(h.stored()),
                                   const_cast<std::byte*>(r.payload) - sizeof(ObjectHeader),
                                   r.typeCode);
                root->push_back(h);
                return ObjRef{root->elemPayload(root->size() - 1), r.typeCode};
            } catch (const OutOfBlockMemory&) {
                if (firstTryOnFreshPage) throw;  // object larger than a page
                ++pm->allocRetries;
                rotate(true);
                firstTryOnFreshPage = true;
            }
        }
    }

    void chunkEnd() {
        for (auto& z : zombies) done.push_back(z);
        zombies.clear();
    }

    std::vector<BlockPtr> finish() {
        chunkEnd();
        if (live) rotate(false);
        return std::move(done);
    }
};

// aggregation sink key/value shaping
enum class KeyKind { Unset, Int, Str };
enum class ValKind { Unset, Int, Dbl, Obj };


struct JoinTable {
    std::vector<std::string> copyCols;
    std::unordered_multimap<uint64_t, size_t> byHash;
    std::vector<std::vector<ScalarValue>> rows;
};

}  // namespace

// ---------------------------------------------------------------------------
// executor

namespace {

struct AggState {
    KeyKind keyKind = KeyKind::Unset;
    ValKind valKind = ValKind::Unset;
    // one of these is used once the shape is known
    detail::MapSinkT<int64_t, int64_t> ii;
    detail::MapSinkT<int64_t, double> id;
    detail::MapSinkT<int64_t, Handle<AnyObject>> io;
    detail::MapSinkT<Handle<PString>, int64_t> si;
    detail::MapSinkT<Handle<PString>, double> sd;
    detail::MapSinkT<Handle<PString>, Handle<AnyObject>> so;
    std::unordered_map<int64_t, ScalarValue> keyRepr;  // int key -> original cell
};


struct ExecCtx {
    const tcap::Program& p;
    EngineConfig cfg;
    std::map<std::string, MaterializedList>& sets;
    std::map<int, std::map<int, JoinTable>> joinTables;  // joinStmt -> side -> table
    RunMetrics& metrics;

    VectorList evalApply(const Statement& s, VectorList vl);
    VectorList evalStage(const Statement& s, VectorList vl);
    void runPipeline(const Pipeline& pl, std::map<std::string, MaterializedList>& outputs);
};

VectorList ExecCtx::evalApply(const Statement& s, VectorList vl) {
    const auto& sel = s.inputs[0].columns;
    std::vector<const Column*> args;
    for (const auto& n : sel) {
        const Column* c = vl.find(n);
        if (!c) throw StageTypeError("unknown column " + n + " in " + s.outputName);
        args.push_back(c);
    }
    const std::string* type = s.kvGet("type");
    Column fresh;
    std::vector<size_t> keep;  // used by opaque flat-map drops
    bool opaqueDrop = false;

    if (!type) {
        const std::string* fid = s.kvGet("functionId");
        if (!fid) throw StageTypeError("APPLY without type or functionId");
        const auto& fn = lam::native(*fid);
        for (size_t i = 0; i < vl.length; ++i) {
            std::vector<ScalarValue> row;
            row.reserve(args.size());
            for (const auto* a : args) row.push_back(a->at(i));
            ScalarValue r = fn.fn(row);
            if (r.index() == 0) {
                opaqueDrop = true;
            } else {
                keep.push_back(i);
            }
            fresh.append(std::move(r));
        }
    } else if (*type == "attAccess") {
        const std::string& att = *s.kvGet("attName");
        for (size_t i = 0; i < vl.length; ++i) {
            ObjRef r = objCell(args[0]->at(i), "attAccess");
            const auto& d = descriptorOf(r.typeCode);
            if (!d.getMember) throw StageTypeError("type " + d.name + " has no member access");
            FieldRef f = d.getMember(r.payload, att);
            if (!f.addr) throw StageTypeError("type " + d.name + " has no member " + att);
            fresh.appendRaw(f);
        }
    } else if (*type == "methodCall") {
        const std::string& m = *s.kvGet("methodName");
        for (size_t i = 0; i < vl.length; ++i) {
            ObjRef r = objCell(args[0]->at(i), "methodCall");
            const auto& d = descriptorOf(r.typeCode);
            if (!d.callMethod) throw StageTypeError("type " + d.name + " has no methods");
            fresh.append(d.callMethod(r.payload, m));
        }
    } else if (*type == "const_comparison") {
        ScalarValue k = parseLiteral(*s.kvGet("value"));
        const std::string& op = *s.kvGet("op");
        for (size_t i = 0; i < vl.length; ++i)
            fresh.append(compareCells(op, args[0]->at(i), k));
    } else if (*type == "comparison") {
        const std::string& op = *s.kvGet("op");
        for (size_t i = 0; i < vl.length; ++i)
            fresh.append(compareCells(op, args[0]->at(i), args[1]->at(i)));
    } else if (*type == "equalityCheck") {
        for (size_t i = 0; i < vl.length; ++i)
            fresh.append(cell_equals(args[0]->at(i), args[1]->at(i)));
    } else if (*type == "bool_and") {
        for (size_t i = 0; i < vl.length; ++i)
            fresh.append(cell_truthy(args[0]->at(i)) && cell_truthy(args[1]->at(i)));
    } else if (*type == "bool_or") {
        for (size_t i = 0; i < vl.length; ++i)
            fresh.append(cell_truthy(args[0]->at(i)) || cell_truthy(args[1]->at(i)));
    } else if (*type == "bool_not") {
        for (size_t i = 0; i < vl.length; ++i) fresh.append(!cell_truthy(args[0]->at(i)));
    } else if (*type == "arith") {
        const std::string& op = *s.kvGet("op");
        for (size_t i = 0; i < vl.length; ++i)
            fresh.append(arithCells(op, args[0]->at(i), args[1]->at(i)));
    } else if (*type == "const_arith") {
        ScalarValue k = parseLiteral(*s.kvGet("value"));
        const std::string& op = *s.kvGet("op");
        const std::string* cs = s.kvGet("cside");
        bool constLeft = cs && *cs == "l";
        for (size_t i = 0; i < vl.length; ++i)
            fresh.append(constLeft ? arithCells(op, k, args[0]->at(i))
                                   : arithCells(op, args[0]->at(i), k));
    } else if (*type == "self") {
        fresh = *args[0];
    } else {
        throw StageTypeError("unknown APPLY type " + *type);
    }

    VectorList out = projectColumns(vl, s.inputs[1].columns, {});
    out.cols.emplace_back(s.outputColumns.back(), std::move(fresh));
    if (opaqueDrop) compact(out, keep);
    return out;
}

VectorList ExecCtx::evalStage(const Statement& s, VectorList vl) {
    switch (s.op) {
        case OpKind::Apply:
            return evalApply(s, vl);
        case OpKind::Filter: {
            const Column* pred = vl.find(s.inputs[0].columns[0]);
            if (!pred) throw StageTypeError("unknown predicate column");
            std::vector<size_t> keep;
            for (size_t i = 0; i < vl.length; ++i)
                if (cell_truthy(pred->at(i))) keep.push_back(i);
            VectorList out = projectColumns(vl, s.inputs[1].columns, {});
            compact(out, keep);
            return out;
        }
        case OpKind::Hash: {
            const Column* key = vl.find(s.inputs[0].columns[0]);
            if (!key) throw StageTypeError("unknown hash key column");
            Column fresh;
            for (size_t i = 0; i < vl.length; ++i) fresh.append(hash_cell(key->at(i)));
            VectorList out = projectColumns(vl, s.inputs[1].columns, {});
            out.cols.emplace_back(s.outputColumns.back(), std::move(fresh));
            return out;
        }
        case OpKind::Join: {
            int stmt = p.indexOf(s.outputName);
            const std::string* ph = s.kvGet("probe");
            int probe = (ph && *ph == "left") ? 0 : 1;
            int build = 1 - probe;
            auto& perStmt = joinTables[stmt];
            auto jtIt = perStmt.find(build);
            if (jtIt == perStmt.end()) {
                // build side fed by a materialized list (e.g. multi-consumer)
                const auto& bhash = s.inputs[size_t(build * 2)];
                auto sit = sets.find(bhash.list);
                if (sit == sets.end())
                    throw PcError("join build side " + bhash.list + " is not materialized");
                const MaterializedList& ml = sit->second;
                JoinTable t;
                t.copyCols = s.inputs[size_t(build * 2 + 1)].columns;
                auto colIdx = [&](const std::string& n) {
                    for (size_t c = 0; c < ml.columns.size(); ++c)
                        if (ml.columns[c] == n) return c;
                    throw StageTypeError("unknown build column " + n);
                };
                size_t hidx = colIdx(bhash.columns[0]);
                std::vector<size_t> cidx;
                for (const auto& n : t.copyCols) cidx.push_back(colIdx(n));
                for (const auto& r : ml.rows) {
                    std::vector<ScalarValue> row;
                    for (size_t c : cidx) row.push_back(r[c]);
                    t.byHash.emplace(std::get<uint64_t>(r[hidx]), t.rows.size());
                    t.rows.push_back(std::move(row));
                }
                jtIt = perStmt.emplace(build, std::move(t)).first;
            }
            const JoinTable& jt = jtIt->second;
            const Column* hashCol = vl.find(s.inputs[size_t(probe * 2)].columns[0]);
            if (!hashCol) throw StageTypeError("unknown probe hash column");
            const auto& probeCopy = s.inputs[size_t(probe * 2 + 1)].columns;
            std::vector<const Column*> probeCols;
            for (const auto& n : probeCopy) probeCols.push_back(vl.find(n));

            VectorList out;
            std::vector<std::vector<ScalarValue>> outRows;
            for (size_t i = 0; i < vl.length; ++i) {
                uint64_t h = std::get<uint64_t>(hashCol->at(i));
                auto [lo, hi] = jt.byHash.equal_range(h);
                for (auto it = lo; it != hi; ++it) {
                    const auto& brow = jt.rows[it->second];
                    std::vector<ScalarValue> row;
                    if (build == 0) {
                        row = brow;
                        for (const auto* c : probeCols) row.push_back(c->at(i));
                    } else {
                        for (const auto* c : probeCols) row.push_back(c->at(i));
                        row.insert(row.end(), brow.begin(), brow.end());
                    }
                    outRows.push_back(std::move(row));
                }
            }
            out.length = outRows.size();
            for (size_t c = 0; c < s.outputColumns.size(); ++c) {
                Column col;
                for (auto& r : outRows) col.append(std::move(r[c]));
                out.cols.emplace_back(s.outputColumns[c], std::move(col));
            }
            return out;
        }
        default:
            throw StageTypeError("statement kind not valid mid-pipeline");
    }
}

void ExecCtx::runPipeline(const Pipeline& pl, std::map<std::string, MaterializedList>& outputs) {
    auto srcIt = sets.find(pl.inputList);
    if (srcIt == sets.end()) throw PcError("no data bound for input list " + pl.inputList);
    const MaterializedList& src = srcIt->second;

    PipelineMetrics pm;
    const Statement& last = p.statements[size_t(pl.stmts.back())];

    PageSink pageSink{cfg.pageSize, nullptr, {}, {}, &pm};
    AggState agg;
    JoinTable jt;
    MaterializedList result;

    // sink target column set
    std::vector<std::string> outCols;
    if (pl.sink == SinkKind::Output) {
        outCols = last.inputs[0].columns;
    } else if (pl.sink == SinkKind::JoinBuild) {
        const Statement& j = p.statements[size_t(pl.sinkStmt)];
        jt.copyCols = j.inputs[size_t(pl.buildSide * 2 + 1)].columns;
        outCols = jt.copyCols;
        outCols.push_back(j.inputs[size_t(pl.buildSide * 2)].columns[0]);  // hash col
    } else if (pl.sink == SinkKind::Materialize) {
        outCols = last.outputColumns;
    }

    const Statement* aggStmt =
        pl.sink == SinkKind::Aggregation ? &p.statements[size_t(pl.sinkStmt)] : nullptr;
    if (aggStmt) {
        const std::string* fn = aggStmt->kvGet("fn");
        if (fn && *fn != "sum") throw StageTypeError("unknown aggregate fn " + *fn);
        size_t ps = cfg.pageSize;
        agg.ii.pageSize = agg.id.pageSize = agg.io.pageSize = ps;
        agg.si.pageSize = agg.sd.pageSize = agg.so.pageSize = ps;
    }

    size_t chunkIdx = 0;
    for (size_t start = 0; start < src.rows.size() || (start == 0 && src.rows.empty());
         start += cfg.chunkSize, ++chunkIdx) {
        size_t end = std::min(src.rows.size(), start + cfg.chunkSize);
        VectorList vl;
        vl.length = end - start;
        for (size_t c = 0; c < src.columns.size(); ++c) {
            Column col;
            for (size_t r = start; r < end; ++r) col.append(src.rows[r][c]);
            vl.cols.emplace_back(src.columns[c], std::move(col));
        }
        pm.rowsIn += vl.length;

        int stageNo = 0;
        for (int si : pl.stmts) {
            const Statement& s = p.statements[size_t(si)];
            if (pl.sink != SinkKind::Materialize && si == pl.sinkStmt &&
                (s.op == OpKind::Aggregate || s.op == OpKind::Output ||
                 (s.op == OpKind::Join && pl.sink == SinkKind::JoinBuild)))
                break;  // sink statements consume below
            try {
                vl = evalStage(s, std::move(vl));
            } catch (const PcError&) {
                throw;
            } catch (const std::exception& e) {
                throw PipelineAborted("stage " + s.outputName + " chunk " +
                                      std::to_string(chunkIdx) + ": " + e.what());
            }
            ++stageNo;
        }
        (void)stageNo;

        // sink consumption
        switch (pl.sink) {
            case SinkKind::Output:
            case SinkKind::Materialize: {
                std::vector<const Column*> cols;
                for (const auto& n : outCols) {
                    const Column* c = vl.find(n);
                    if (!c) throw StageTypeError("unknown sink column " + n);
                    cols.push_back(c);
                }
                for (size_t i = 0; i < vl.length; ++i) {
                    std::vector<ScalarValue> row;
                    row.reserve(cols.size());
                    for (const auto* c : cols) {
                        ScalarValue v = c->at(i);
                        if (v.index() == 6)
                            v = pageSink.writeObject(std::get<ObjRef>(v));
                        row.push_back(std::move(v));
                    }
                    result.rows.push_back(std::move(row));
                }
                pageSink.chunkEnd();
                pm.rowsOut += vl.length;
                break;
            }
            case SinkKind::JoinBuild: {
                std::vector<const Column*> cols;
                for (const auto& n : jt.copyCols) cols.push_back(vl.find(n));
                const Column* hc = vl.find(outCols.back());
                for (size_t i = 0; i < vl.length; ++i) {
                    std::vector<ScalarValue> row;
                    for (const auto* c : cols) row.push_back(c->at(i));
                    jt.byHash.emplace(std::get<uint64_t>(hc->at(i)), jt.rows.size());
                    jt.rows.push_back(std::move(row));
                }
                pm.rowsOut += vl.length;
                break;
            }
            case SinkKind::Aggregation: {
                const Column* kc = vl.find(aggStmt->inputs[0].columns[0]);
                const Column* vc = vl.find(aggStmt->inputs[1].columns[0]);
                if (!kc || !vc) throw StageTypeError("unknown aggregate column");
                for (size_t i = 0; i < vl.length; ++i) {
                    ScalarValue k = kc->at(i);
                    ScalarValue v = vc->at(i);
                    if (agg.keyKind == KeyKind::Unset)
                        agg.keyKind = isStringCell(k) ? KeyKind::Str : KeyKind::Int;
                    if (agg.valKind == ValKind::Unset)
                        agg.valKind = v.index() == 6   ? ValKind::Obj
                                      : v.index() == 2 ? ValKind::Dbl
                                                       : ValKind::Int;
                    if (agg.keyKind == KeyKind::Int) {
                        int64_t ik = detail::intKeyOf(k);
                        agg.keyRepr.emplace(ik, k);
                        if (agg.valKind == ValKind::Int)
                            agg.ii.add([&] { return ik; }, asInt(v),
                                       [](int64_t a, int64_t b) { return a + b; });
                        else if (agg.valKind == ValKind::Dbl)
                            agg.id.add([&] { return ik; }, asDouble(v),
                                       [](double a, double b) { return a + b; });
                        else
                            agg.io.add([&] { return ik; },
                                       detail::handleOf(objCell(v, "aggregate value")), detail::combineObj);
                    } else {
                        std::string sk(stringView(k));
                        if (agg.valKind == ValKind::Int)
                            agg.si.add([&] { return agg.si.internKey(sk); }, asInt(v),
                                       [](int64_t a, int64_t b) { return a + b; });
                        else if (agg.valKind == ValKind::Dbl)
                            agg.sd.add([&] { return agg.sd.internKey(sk); }, asDouble(v),
                                       [](double a, double b) { return a + b; });
                        else
                            agg.so.add([&] { return agg.so.internKey(sk); },
                                       detail::handleOf(objCell(v, "aggregate value")), detail::combineObj);
                    }
                }
                break;
            }
        }
        if (src.rows.empty()) break;
    }

    // finalize the sink
    std::string resultName;
    if (pl.sink == SinkKind::Output) {
        result.columns = outCols;
        result.pages = pageSink.finish();
        resultName = last.db + "." + last.set;
        outputs[resultName] = result;
        sets[last.outputName] = std::move(result);
    } else if (pl.sink == SinkKind::Materialize) {
        result.columns = outCols;
        result.pages = pageSink.finish();
        sets[last.outputName] = std::move(result);
    } else if (pl.sink == SinkKind::JoinBuild) {
        joinTables[pl.sinkStmt][pl.buildSide] = std::move(jt);
    } else if (pl.sink == SinkKind::Aggregation) {
        MaterializedList ml;
        ml.columns = p.statements[size_t(pl.sinkStmt)].outputColumns;
        auto emit = [&](const ScalarValue& k, ScalarValue v) {
            ml.rows.push_back({k, std::move(v)});
        };
        auto intKeyCell = [&](int64_t ik) -> ScalarValue {
            auto it = agg.keyRepr.find(ik);
            return it == agg.keyRepr.end() ? ScalarValue(ik) : it->second;
        };
        if (agg.keyKind == KeyKind::Int && agg.valKind == ValKind::Int) {
            BlockPtr page = agg.ii.finish([](int64_t a, int64_t b) { return a + b; });
            get_block_root<PMap<int64_t, int64_t>>(*page)->forEach(
                [&](const int64_t& k, const int64_t& v) { emit(intKeyCell(k), v); });
            ml.pages.push_back(page);
        } else if (agg.keyKind == KeyKind::Int && agg.valKind == ValKind::Dbl) {
            BlockPtr page = agg.id.finish([](double a, double b) { return a + b; });
            get_block_root<PMap<int64_t, double>>(*page)->forEach(
                [&](const int64_t& k, const double& v) { emit(intKeyCell(k), v); });
            ml.pages.push_back(page);
        } else if (agg.keyKind == KeyKind::Int && agg.valKind == ValKind::Obj) {
            BlockPtr page = agg.io.finish(detail::combineObj);
            get_block_root<PMap<int64_t, Handle<AnyObject>>>(*page)->forEach(
                [&](const int64_t& k, const Member<AnyObject>& v) {
                    std::byte* t = pc::detail::storedTarget(v.raw());
                    emit(intKeyCell(k),
                         t ? ScalarValue(ObjRef{payloadOf(reinterpret_cast<ObjectHeader*>(t)),
                                                v.raw().typeCode})
                           : ScalarValue(std::monostate{}));
                });
            ml.pages.push_back(page);
        } else if (agg.keyKind == KeyKind::Str && agg.valKind == ValKind::Int) {
            BlockPtr page = agg.si.finish([](int64_t a, int64_t b) { return a + b; });
            get_block_root<PMap<Handle<PString>, int64_t>>(*page)->forEach(
                [&](const Member<PString>& k, const int64_t& v) {
                    emit(std::string(k->view()), v);
                });
            ml.pages.push_back(page);
        } else if (agg.keyKind == KeyKind::Str && agg.valKind == ValKind::Dbl) {
            BlockPtr page = agg.sd.finish([](double a, double b) { return a + b; });
            get_block_root<PMap<Handle<PString>, double>>(*page)->forEach(
                [&](const Member<PString>& k, const double& v) {
                    emit(std::string(k->view()), v);
                });
            ml.pages.push_back(page);
        } else if (agg.keyKind == KeyKind::Str && agg.valKind == ValKind::Obj) {
            BlockPtr page = agg.so.finish(detail::combineObj);
            get_block_root<PMap<Handle<PString>, Handle<AnyObject>>>(*page)->forEach(
                [&](const Member<PString>& k, const Member<AnyObject>& v) {
                    std::byte* t = pc::detail::storedTarget(v.raw());
                    emit(std::string(k->view()),
                         t ? ScalarValue(ObjRef{payloadOf(reinterpret_cast<ObjectHeader*>(t)),
                                                v.raw().typeCode})
                           : ScalarValue(std::monostate{}));
                });
            ml.pages.push_back(page);
        }
        pm.rowsOut = ml.rows.size();
        sets[p.statements[size_t(pl.sinkStmt)].outputName] = std::move(ml);
    }
    metrics.pipelines.emplace_back(pl.inputList + "->" + last.outputName, pm);
}

}  // namespace

// ---------------------------------------------------------------------------

VectorList chunk_of(const MaterializedList& src, size_t begin, size_t end) {
    VectorList vl;
    vl.length = end - begin;
    for (size_t c = 0; c < src.columns.size(); ++c) {
        Column col;
        for (size_t r = begin; r < end; ++r) col.append(src.rows[r][c]);
        vl.cols.emplace_back(src.columns[c], std::move(col));
    }
    return vl;
}

VectorList eval_statements(const tcap::Program& p, const std::vector<int>& stmts,
                           VectorList chunk) {
    std::map<std::string, MaterializedList> none;
    RunMetrics rm;
    ExecCtx ctx{p, {}, none, {}, rm};
    for (int si : stmts) chunk = ctx.evalStage(p.statements[size_t(si)], std::move(chunk));
    return chunk;
}

void Executor::bindSource(const std::string& list, MaterializedList data) {
    sets_[list] = std::move(data);
}

std::map<std::string, MaterializedList> Executor::run(const tcap::Program& p) {
    auto diags = tcap::validate(p);
    if (!diags.empty()) throw PcError("invalid program: " + diags[0].str());
    metrics_ = RunMetrics{};
    uint64_t dc0 = counters().deepCopies.load();
    uint64_t af0 = counters().allocFaults.load();

    ExecCtx ctx{p, cfg_, sets_, {}, metrics_};
    std::map<std::string, MaterializedList> outputs;
    for (const auto& pl : decompose(p)) ctx.runPipeline(pl, outputs);

    metrics_.deepCopies = counters().deepCopies.load() - dc0;
    metrics_.allocFaults = counters().allocFaults.load() - af0;
    return outputs;
}

uint64_t RunMetrics::maxZombies() const {
    uint64_t m = 0;
    for (const auto& [n, pm] : pipelines) m = std::max(m, pm.zombieHighWater);
    return m;
}

std::string RunMetrics::report() const {
    std::ostringstream os;
    for (const auto& [n, pm] : pipelines) {
        os << "pipeline=" << n << " rows_in=" << pm.rowsIn << " rows_out=" << pm.rowsOut
           << " pages_out=" << pm.pagesOut << " zombie_high_water=" << pm.zombieHighWater
           << " alloc_retries=" << pm.allocRetries << "\n";
    }
    os << "deep_copies=" << deepCopies << "\n";
    os << "alloc_faults=" << allocFaults << "\n";
    return os.str();
}

std::map<std::string, MaterializedList> execute(
    const tcap::Program& p, const std::map<std::string, MaterializedList>& sources,
    EngineConfig cfg, RunMetrics* metricsOut) {
    Executor ex(cfg);
    for (const auto& [name, data] : sources) ex.bindSource(name, data);
    auto out = ex.run(p);
    if (metricsOut) *metricsOut = ex.metrics();
    return out;
}

}  // namespace pc::eng
