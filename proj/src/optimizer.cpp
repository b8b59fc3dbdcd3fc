#include "pc/optimizer.hpp"

#include <algorithm>
#include <deque>
#include <map>
#include <set>
#include <unordered_map>
#include <unordered_set>

namespace pc::opt {

using tcap::InputRef;
using tcap::OpKind;
using tcap::Program;
using tcap::Statement;

namespace {

bool contains(const std::vector<std::string>& v, const std::string& s) {
    return std::find(v.begin(), v.end(), s) != v.end();
}

const std::string* applyType(const Statement& s) {
    if (s.op != OpKind::Apply) return nullptr;
    return s.kvGet("type");
}

}  // namespace

LineageRoot trace_column(const Program& p, const std::string& list, const std::string& col) {
    std::string curList = list, curCol = col;
    for (;;) {
        const Statement* s = p.find(curList);
        if (!s) return {curList, curCol};  // source
        switch (s->op) {
            case OpKind::Apply:
            case OpKind::Hash:
            case OpKind::Filter:
                if (contains(s->inputs[1].columns, curCol)) {
                    curList = s->inputs[1].list;
                    continue;
                }
                return {s->outputName, curCol};
            case OpKind::Join:
                if (contains(s->inputs[1].columns, curCol)) {
                    curList = s->inputs[1].list;
                    continue;
                }
                if (contains(s->inputs[3].columns, curCol)) {
                    curList = s->inputs[3].list;
                    continue;
                }
                return {s->outputName, curCol};
            case OpKind::Aggregate:
            case OpKind::Output:
                return {s->outputName, curCol};
        }
    }
}

// ---------------------------------------------------------------------------
// Rule 1: eliminate a redundant APPLY.

namespace {

// Backward path of statement indices defining the lists from `from`
// (exclusive) down to `to` (inclusive); empty when to == from.  The path may
// only cross APPLY/FILTER statements: widening a column through a HASH or
// JOIN would change build payloads, so elimination stays within a pipeline.
bool findPath(const Program& p, const std::string& from, const std::string& to,
              std::vector<int>& out) {
    if (to == from) return true;
    // BFS backward over producers
    std::unordered_map<std::string, std::string> parent;  // list -> consumer list on path
    std::deque<std::string> q{to};
    std::unordered_set<std::string> seen{to};
    while (!q.empty()) {
        std::string cur = q.front();
        q.pop_front();
        const Statement* s = p.find(cur);
        if (!s) continue;
        if (s->op != OpKind::Apply && s->op != OpKind::Filter) continue;
        for (const auto& in : s->inputs) {
            if (seen.insert(in.list).second) {
                parent[in.list] = cur;
                if (in.list == from) {
                    // walk forward from `from` to `to`
                    std::vector<int> path;
                    std::string walk = parent[in.list];
                    for (std::string l = walk;; l = parent[l]) {
                        path.push_back(p.indexOf(l));
                        if (l == to) break;
                    }
                    out = path;
                    return true;
                }
                q.push_back(in.list);
            }
        }
    }
    return false;
}

bool sameKind(const Statement& a, const Statement& d) {
    const std::string* ta = applyType(a);
    const std::string* td = applyType(d);
    if (!ta || !td || *ta != *td) return false;
    if (*ta == "methodCall") {
        const std::string* ma = a.kvGet("methodName");
        const std::string* md = d.kvGet("methodName");
        return ma && md && *ma == *md;
    }
    if (*ta == "attAccess") {
        const std::string* ma = a.kvGet("attName");
        const std::string* md = d.kvGet("attName");
        return ma && md && *ma == *md;
    }
    return false;
}

}  // namespace

RewriteResult eliminate_redundant_apply(const Program& p) {
    for (size_t di = 0; di < p.statements.size(); ++di) {
        const Statement& d = p.statements[di];
        if (!applyType(d)) continue;
        for (size_t ai = 0; ai < di; ++ai) {
            const Statement& a = p.statements[ai];
            if (!sameKind(a, d)) continue;
            // same argument lineage
            if (a.inputs[0].columns.size() != d.inputs[0].columns.size()) continue;
            bool same = true;
            for (size_t k = 0; k < a.inputs[0].columns.size(); ++k) {
                same = same && trace_column(p, a.inputs[0].list, a.inputs[0].columns[k]) ==
                                   trace_column(p, d.inputs[0].list, d.inputs[0].columns[k]);
            }
            if (!same) continue;

            const std::string aNew = a.outputColumns.back();
            const std::string dNew = d.outputColumns.back();
            const std::string X = d.inputs[0].list;

            std::vector<int> path;
            if (!findPath(p, a.outputName, X, path)) continue;

            // refuse on name clashes: a path list already carrying a column
            // named aNew with different lineage
            bool clash = false;
            for (int idx : path) {
                const Statement& s = p.statements[size_t(idx)];
                if (contains(s.outputColumns, aNew) &&
                    !(trace_column(p, s.outputName, aNew) ==
                      LineageRoot{a.outputName, aNew}))
                    clash = true;
            }
            if (clash) continue;

            Program out = p;
            // widen copy lists along the path so aNew reaches X
            std::string prev = a.outputName;
            for (int idx : path) {
                Statement& s = out.statements[size_t(idx)];
                auto widen = [&](InputRef& in) {
                    if (in.list == prev && !contains(in.columns, aNew))
                        in.columns.push_back(aNew);
                };
                switch (s.op) {
                    case OpKind::Apply:
                    case OpKind::Hash: {
                        widen(s.inputs[1]);
                        std::string newest = s.outputColumns.back();
                        s.outputColumns = s.inputs[1].columns;
                        s.outputColumns.push_back(newest);
                        break;
                    }
                    case OpKind::Filter:
                        widen(s.inputs[1]);
                        s.outputColumns = s.inputs[1].columns;
                        break;
                    case OpKind::Join:
                        widen(s.inputs[1]);
                        widen(s.inputs[3]);
                        s.outputColumns = s.inputs[1].columns;
                        s.outputColumns.insert(s.outputColumns.end(), s.inputs[3].columns.begin(),
                                               s.inputs[3].columns.end());
                        break;
                    default:
                        break;
                }
                prev = s.outputName;
            }

            // drop d; repoint its readers at X and rename dNew -> aNew
            const std::string dOut = d.outputName;
            out.statements.erase(out.statements.begin() + static_cast<ptrdiff_t>(di));
            for (auto& s : out.statements) {
                for (auto& in : s.inputs) {
                    if (in.list == dOut) in.list = X;
                    for (auto& c : in.columns)
                        if (c == dNew) c = aNew;
                }
                for (auto& c : s.outputColumns)
                    if (c == dNew) c = aNew;
            }
            return {std::move(out), true};
        }
    }
    return {p, false};
}

// ---------------------------------------------------------------------------
// Rule 2: push a single-side conjunct below the join.

namespace {

struct NameGen {
    std::unordered_set<std::string> used;

    explicit NameGen(const Program& p) {
        for (const auto& s : p.statements) {
            used.insert(s.outputName);
            for (const auto& c : s.outputColumns) used.insert(c);
            for (const auto& in : s.inputs) {
                used.insert(in.list);
                for (const auto& c : in.columns) used.insert(c);
            }
        }
    }

    std::string fresh(const std::string& prefix) {
        for (int i = 1;; ++i) {
            std::string cand = prefix + std::to_string(i);
            if (used.insert(cand).second) return cand;
        }
    }
};

struct PushCandidate {
    int filterIdx = -1;
    int joinIdx = -1;
    std::vector<int> chain;          // post-join statements, join-side first
    std::vector<std::string> conjuncts;
    std::set<int> andStmts;          // bool_and producers feeding the filter
};

// The statement inside `chain` whose new column is `col`, or -1.
int chainProducer(const Program& p, const std::vector<int>& chain, const std::string& col) {
    for (int idx : chain) {
        const Statement& s = p.statements[size_t(idx)];
        if (s.op == OpKind::Apply && s.outputColumns.back() == col &&
            !contains(s.inputs[1].columns, col))
            return idx;
    }
    return -1;
}

std::vector<PushCandidate> findCandidates(const Program& p) {
    std::vector<PushCandidate> out;
    for (size_t fi = 0; fi < p.statements.size(); ++fi) {
        const Statement& f = p.statements[fi];
        if (f.op != OpKind::Filter) continue;
        // walk back to a JOIN through APPLY-only statements
        std::vector<int> chain;
        std::string cur = f.inputs[0].list;
        int joinIdx = -1;
        while (true) {
            int pi = p.indexOf(cur);
            if (pi < 0) break;
            const Statement& s = p.statements[size_t(pi)];
            if (s.op == OpKind::Join) {
                joinIdx = pi;
                break;
            }
            if (s.op != OpKind::Apply) break;
            chain.push_back(pi);
            cur = s.inputs[0].list;
        }
        if (joinIdx < 0) continue;
        std::reverse(chain.begin(), chain.end());

        // expand the predicate into conjuncts through bool_and producers
        PushCandidate c;
        c.filterIdx = static_cast<int>(fi);
        c.joinIdx = joinIdx;
        c.chain = chain;
        std::deque<std::string> work{f.inputs[0].columns[0]};
        while (!work.empty()) {
            std::string col = work.front();
            work.pop_front();
            int pi = chainProducer(p, chain, col);
            const std::string* t = pi >= 0 ? applyType(p.statements[size_t(pi)]) : nullptr;
            if (t && *t == "bool_and") {
                c.andStmts.insert(pi);
                for (const auto& sc : p.statements[size_t(pi)].inputs[0].columns)
                    work.push_back(sc);
            } else {
                c.conjuncts.push_back(col);
            }
        }
        if (c.conjuncts.empty()) continue;
        if (c.conjuncts.size() == 1 && c.andStmts.empty() && chain.empty())
            continue;  // a bare filter directly on the join with no chain: nothing to push past
        out.push_back(std::move(c));
    }
    return out;
}

// Dependency closure of `col` within the chain: statements computing it and
// the join-output columns it ultimately reads.
void subtreeOf(const Program& p, const std::vector<int>& chain, const std::string& col,
               std::set<int>& stmts, std::set<std::string>& leaves) {
    int pi = chainProducer(p, chain, col);
    if (pi < 0) {
        leaves.insert(col);
        return;
    }
    if (!stmts.insert(pi).second) return;
    for (const auto& sc : p.statements[size_t(pi)].inputs[0].columns)
        subtreeOf(p, chain, sc, stmts, leaves);
}

}  // namespace

RewriteResult push_filter_past_join(const Program& p) {
    for (const PushCandidate& cand : findCandidates(p)) {
    const Statement& J = p.statements[size_t(cand.joinIdx)];
    const auto& lcopy = J.inputs[1].columns;
    const auto& rcopy = J.inputs[3].columns;

    // find the first pushable conjunct
    for (size_t ci = 0; ci < cand.conjuncts.size(); ++ci) {
        const std::string& c = cand.conjuncts[ci];
        std::set<int> sub;
        std::set<std::string> leaves;
        subtreeOf(p, cand.chain, c, sub, leaves);
        bool left = true, right = true;
        for (const auto& l : leaves) {
            if (!contains(lcopy, l)) left = false;
            if (!contains(rcopy, l)) right = false;
        }
        if (left == right) continue;  // both sides or neither: not pushable
        if (leaves.empty()) continue;
        const int sideHashList = left ? 0 : 2;

        // ---- locate the side's pre-hash chain and its root -----------------
        int hashIdx = p.indexOf(J.inputs[size_t(sideHashList)].list);
        if (hashIdx < 0) continue;
        std::vector<int> sideStmts;
        std::string cur = p.statements[size_t(hashIdx)].inputs[0].list;
        while (true) {
            int pi = p.indexOf(cur);
            if (pi < 0) break;
            const Statement& s = p.statements[size_t(pi)];
            if (s.op != OpKind::Apply && s.op != OpKind::Filter) break;
            sideStmts.push_back(pi);
            cur = s.inputs[0].list;
        }
        std::reverse(sideStmts.begin(), sideStmts.end());
        const std::string R = sideStmts.empty()
                                  ? p.statements[size_t(hashIdx)].inputs[0].list
                                  : p.statements[size_t(sideStmts[0])].inputs[0].list;
        int firstSideIdx = sideStmts.empty() ? hashIdx : sideStmts[0];
        const Statement& firstSide = p.statements[size_t(firstSideIdx)];

        std::vector<std::string> copyCols = firstSide.inputs[1].columns;
        for (const auto& sc : firstSide.inputs[0].columns)
            if (!contains(copyCols, sc)) copyCols.push_back(sc);
        bool leavesOk = true;
        for (const auto& l : leaves) leavesOk = leavesOk && contains(copyCols, l);
        if (!leavesOk) continue;

        // ---- emit the pushed chain ----------------------------------------
        NameGen gen(p);
        std::vector<int> subOrder;
        for (int idx : cand.chain)
            if (sub.count(idx)) subOrder.push_back(idx);

        std::unordered_map<std::string, std::string> colMap;  // orig new-col -> fresh col
        std::vector<Statement> pushed;
        std::string prevList = R;
        std::vector<std::string> prevCols = copyCols;
        for (size_t k = 0; k < subOrder.size(); ++k) {
            const Statement& o = p.statements[size_t(subOrder[k])];
            Statement ns;
            ns.op = OpKind::Apply;
            ns.outputName = gen.fresh("PF_");
            ns.computation = o.computation;
            ns.stage = o.stage;
            ns.kv = o.kv;
            InputRef sel{prevList, {}};
            for (const auto& sc : o.inputs[0].columns) {
                auto it = colMap.find(sc);
                sel.columns.push_back(it == colMap.end() ? sc : it->second);
            }
            // carry the root columns plus fresh columns still needed later
            InputRef copy{prevList, copyCols};
            for (size_t j = 0; j < k; ++j) {
                const std::string& origCol =
                    p.statements[size_t(subOrder[j])].outputColumns.back();
                bool needed = false;
                for (size_t m = k + 1; m < subOrder.size(); ++m)
                    needed = needed ||
                             contains(p.statements[size_t(subOrder[m])].inputs[0].columns, origCol);
                if (needed && !contains(copy.columns, colMap[origCol]))
                    copy.columns.push_back(colMap[origCol]);
            }
            ns.inputs = {sel, copy};
            std::string freshCol = gen.fresh("pc_");
            colMap[o.outputColumns.back()] = freshCol;
            ns.outputColumns = copy.columns;
            ns.outputColumns.push_back(freshCol);
            prevList = ns.outputName;
            prevCols = ns.outputColumns;
            pushed.push_back(std::move(ns));
        }
        Statement nf;
        nf.op = OpKind::Filter;
        nf.outputName = gen.fresh("PF_");
        nf.computation = p.statements[size_t(cand.filterIdx)].computation;
        {
            auto it = colMap.find(c);
            std::string selCol = it == colMap.end() ? c : it->second;
            nf.inputs = {{prevList, {selCol}}, {prevList, copyCols}};
        }
        nf.outputColumns = copyCols;
        const std::string filterOut = nf.outputName;
        pushed.push_back(std::move(nf));

        // ---- rebuild the post-join region ---------------------------------
        const Statement& F = p.statements[size_t(cand.filterIdx)];
        std::vector<std::string> remaining = cand.conjuncts;
        remaining.erase(remaining.begin() + static_cast<ptrdiff_t>(ci));

        // liveness: keep chain statements whose column is still needed
        std::set<std::string> needs(remaining.begin(), remaining.end());
        needs.insert(F.inputs[1].columns.begin(), F.inputs[1].columns.end());
        std::vector<int> kept;
        for (auto it = cand.chain.rbegin(); it != cand.chain.rend(); ++it) {
            if (cand.andStmts.count(*it)) continue;
            const Statement& s = p.statements[size_t(*it)];
            if (needs.count(s.outputColumns.back())) {
                kept.push_back(*it);
                needs.insert(s.inputs[0].columns.begin(), s.inputs[0].columns.end());
            }
        }
        std::reverse(kept.begin(), kept.end());

        // per-position forward needs: filter copies + remaining conjuncts +
        // selections of later kept statements
        auto futureNeeds = [&](size_t pos) {
            std::set<std::string> n(remaining.begin(), remaining.end());
            n.insert(F.inputs[1].columns.begin(), F.inputs[1].columns.end());
            for (size_t j = pos; j < kept.size(); ++j) {
                const Statement& s = p.statements[size_t(kept[j])];
                n.insert(s.inputs[0].columns.begin(), s.inputs[0].columns.end());
            }
            return n;
        };

        std::vector<Statement> rebuilt;
        std::string chainPrev = J.outputName;
        std::vector<std::string> chainCols = J.outputColumns;
        for (size_t k = 0; k < kept.size(); ++k) {
            const Statement& o = p.statements[size_t(kept[k])];
            Statement ns = o;
            auto fn = futureNeeds(k + 1);
            std::vector<std::string> copy;
            for (const auto& col : chainCols)
                if (fn.count(col)) copy.push_back(col);
            ns.inputs[0].list = chainPrev;
            ns.inputs[1] = {chainPrev, copy};
            ns.outputColumns = copy;
            ns.outputColumns.push_back(o.outputColumns.back());
            chainPrev = ns.outputName;
            chainCols = ns.outputColumns;
            rebuilt.push_back(std::move(ns));
        }

        bool dropFilter = false;
        std::string filterReplacement;
        if (remaining.empty()) {
            dropFilter = true;
            filterReplacement = chainPrev;
        } else {
            std::string predCol = remaining[0];
            for (size_t k = 1; k < remaining.size(); ++k) {
                Statement as;
                as.op = OpKind::Apply;
                as.outputName = gen.fresh("PA_");
                as.computation = F.computation;
                as.stage = gen.fresh("and_");
                as.kv = {{"type", "bool_and"}};
                std::vector<std::string> copy = F.inputs[1].columns;
                for (size_t m = k + 1; m < remaining.size(); ++m)
                    if (!contains(copy, remaining[m])) copy.push_back(remaining[m]);
                as.inputs = {{chainPrev, {predCol, remaining[k]}}, {chainPrev, copy}};
                std::string freshCol = gen.fresh("pb_");
                as.outputColumns = copy;
                as.outputColumns.push_back(freshCol);
                chainPrev = as.outputName;
                chainCols = as.outputColumns;
                predCol = freshCol;
                rebuilt.push_back(std::move(as));
            }
            Statement ns = F;
            ns.inputs[0] = {chainPrev, {predCol}};
            ns.inputs[1].list = chainPrev;
            rebuilt.push_back(std::move(ns));
        }

        // ---- splice the new program together ------------------------------
        std::set<int> dropped(sub.begin(), sub.end());
        for (int idx : cand.andStmts) dropped.insert(idx);
        for (int idx : kept) dropped.insert(idx);  // re-emitted from `rebuilt`
        dropped.insert(cand.filterIdx);

        Program out;
        for (size_t i = 0; i < p.statements.size(); ++i) {
            if (static_cast<int>(i) == firstSideIdx) {
                for (auto& s : pushed) out.statements.push_back(s);
                Statement rerooted = p.statements[i];
                for (auto& in : rerooted.inputs)
                    if (in.list == R) in.list = filterOut;
                out.statements.push_back(std::move(rerooted));
                continue;
            }
            if (static_cast<int>(i) == cand.filterIdx) {
                for (auto& s : rebuilt) out.statements.push_back(s);
                continue;
            }
            if (dropped.count(static_cast<int>(i))) continue;
            out.statements.push_back(p.statements[i]);
        }
        if (dropFilter) {
            for (auto& s : out.statements)
                for (auto& in : s.inputs)
                    if (in.list == F.outputName) in.list = filterReplacement;
        }
        return {std::move(out), true};
    }
    }
    return {p, false};
}

// ---------------------------------------------------------------------------

tcap::Program optimize(const Program& p, const TraceFn& trace) {
    Program cur = p;
    int firings = 0;
    auto bump = [&]() {
        if (++firings > 10000) throw OptimizerDivergence();
    };
    for (;;) {
        bool any = false;
        for (;;) {
            auto r = eliminate_redundant_apply(cur);
            if (!r.changed) break;
            bump();
            cur = std::move(r.program);
            if (trace) trace("eliminate_redundant_apply", cur);
            any = true;
        }
        for (;;) {
            auto r = push_filter_past_join(cur);
            if (!r.changed) break;
            bump();
            cur = std::move(r.program);
            if (trace) trace("push_filter_past_join", cur);
            any = true;
        }
        if (!any) break;
    }
    return canonicalize(cur);
}

tcap::Program canonicalize(const Program& p) {
    std::unordered_map<std::string, std::string> lists, cols, comps, stages;
    for (const auto& s : p.statements) lists.emplace(s.outputName, "");
    // Source lists and their column names are external interface: keep both
    // verbatim so a canonicalized program still binds the same input sets.
    for (const auto& s : p.statements)
        for (const auto& in : s.inputs)
            if (!lists.count(in.list))
                for (const auto& c : in.columns) cols.emplace(c, c);
    int nl = 0, nc = 0, np = 0, ns = 0;
    auto listName = [&](const std::string& n) -> std::string {
        auto it = lists.find(n);
        if (it == lists.end()) return n;  // source: keep
        if (it->second.empty()) it->second = "L" + std::to_string(++nl);
        return it->second;
    };
    auto colName = [&](const std::string& n) -> std::string {
        auto [it, fresh] = cols.emplace(n, "");
        if (fresh) {
            std::string cand;
            do {
                cand = "c" + std::to_string(++nc);
            } while (cols.count(cand) && cols.at(cand) == cand);  // reserved source column
            it->second = cand;
        }
        return it->second;
    };
    Program out = p;
    for (auto& s : out.statements) {
        // visit inputs first so copied columns canonicalize by first use
        for (auto& in : s.inputs) {
            in.list = listName(in.list);
            for (auto& c : in.columns) c = colName(c);
        }
        s.outputName = listName(s.outputName);
        for (auto& c : s.outputColumns) c = colName(c);
        auto [itc, freshc] = comps.emplace(s.computation, "");
        if (freshc) itc->second = "comp" + std::to_string(++np);
        s.computation = itc->second;
        if (!s.stage.empty()) {
            auto [its, freshs] = stages.emplace(s.stage, "");
            if (freshs) its->second = "s" + std::to_string(++ns);
            s.stage = its->second;
        }
        s.line = 0;
    }
    return out;
}

}  // namespace pc::opt
