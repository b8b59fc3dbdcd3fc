#include <doctest.h>

#include <fstream>
#include <random>
#include <sstream>

#include "pc/optimizer.hpp"

using namespace pc;
using namespace pc::tcap;
using namespace pc::opt;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(in.good());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

const std::string kCorpus = CORPUS_DIR;

Program corpus(const char* name) { return parse(slurp(kCorpus + "/" + name)); }

}  // namespace

TEST_CASE("column lineage traces through copy lists") {
    auto p = corpus("sel52.tcap");
    // dep is copied untouched through every statement
    CHECK(trace_column(p, "Flt_1", "dep") == LineageRoot{"In", "dep"});
    CHECK(trace_column(p, "WBl_1", "sup") == LineageRoot{"In", "sup"});
    // nm1 is created by the first APPLY and dropped after the comparison
    CHECK(trace_column(p, "WDNm_2", "nm1") == LineageRoot{"WDNm_1", "nm1"});
    CHECK(trace_column(p, "WBl_1", "nm1") == LineageRoot{"WBl_1", "nm1"});
    // unknown lists are their own root (sources)
    CHECK(trace_column(p, "In", "dep") == LineageRoot{"In", "dep"});

    auto j = corpus("join42_before.tcap");
    // across the JOIN: sup comes from the left copy, emp from the right
    CHECK(trace_column(j, "JK2_12", "sup") == LineageRoot{"InSup", "sup"});
    CHECK(trace_column(j, "JK2_12", "emp") == LineageRoot{"InEmp", "emp"});
    CHECK(trace_column(j, "JK2_7", "bool1") == LineageRoot{"JK2_7", "bool1"});
}

TEST_CASE("redundant getSalary is eliminated with mt1 carried through") {
    auto before = corpus("sel43_before.tcap");
    auto after = corpus("sel43_after.tcap");

    auto r = eliminate_redundant_apply(before);
    REQUIRE(r.changed);
    CHECK(r.program.statements.size() == 5);
    // names survive rule 1, so the result is the after listing verbatim
    CHECK(r.program.structurallyEquals(after));
    CHECK(validate(r.program).empty());

    // the widened copy list carries mt1 into JK2_2
    const Statement* s = r.program.find("JK2_2");
    REQUIRE(s);
    CHECK(s->outputColumns == std::vector<std::string>{"emp", "mt1", "bl1"});

    // a second application finds nothing
    CHECK(!eliminate_redundant_apply(r.program).changed);

    // full optimize reaches the same program modulo renaming
    CHECK(optimize(before).structurallyEquals(canonicalize(after)));
}

TEST_CASE("single-side salary conjunct is pushed past the join") {
    auto before = corpus("join42_before.tcap");
    auto after = corpus("join42_after.tcap");

    auto r = push_filter_past_join(before);
    REQUIRE(r.changed);
    CHECK(validate(r.program).empty());
    CHECK(canonicalize(r.program).structurallyEquals(canonicalize(after)));

    // the remaining conjunct depends on both sides: nothing more to push
    CHECK(!push_filter_past_join(r.program).changed);

    CHECK(optimize(before).structurallyEquals(canonicalize(after)));
}

TEST_CASE("optimize is idempotent and canonically named") {
    for (const char* name : {"sel52.tcap", "sel43_before.tcap", "join42_before.tcap"}) {
        CAPTURE(name);
        auto p = corpus(name);
        auto o1 = optimize(p);
        CHECK(validate(o1).empty());
        CHECK(optimize(o1).structurallyEquals(o1));
        // canonical names
        CHECK(o1.statements[0].outputName == "L1");
        CHECK(canonicalize(o1).structurallyEquals(o1));
    }
}

TEST_CASE("rule firings are reported in order") {
    std::vector<std::string> fired;
    optimize(corpus("sel43_before.tcap"),
             [&](const std::string& rule, const Program&) { fired.push_back(rule); });
    CHECK(fired == std::vector<std::string>{"eliminate_redundant_apply"});

    fired.clear();
    optimize(corpus("join42_before.tcap"),
             [&](const std::string& rule, const Program&) { fired.push_back(rule); });
    CHECK(fired == std::vector<std::string>{"push_filter_past_join"});
}

TEST_CASE("calls to different methods are not merged") {
    std::string text =
        "L1(a,m1) <= APPLY(In(a), In(a), 'C', 's1',"
        " [('type', 'methodCall'), ('methodName', 'getX')]);\n"
        "L2(a,m1,m2) <= APPLY(L1(a), L1(a,m1), 'C', 's2',"
        " [('type', 'methodCall'), ('methodName', 'getY')]);\n";
    auto p = parse(text);
    CHECK(!eliminate_redundant_apply(p).changed);
}

TEST_CASE("same method on different source columns is not merged") {
    std::string text =
        "L1(a,b,m1) <= APPLY(In(a), In(a,b), 'C', 's1',"
        " [('type', 'methodCall'), ('methodName', 'getX')]);\n"
        "L2(a,b,m1,m2) <= APPLY(L1(b), L1(a,b,m1), 'C', 's2',"
        " [('type', 'methodCall'), ('methodName', 'getX')]);\n";
    auto p = parse(text);
    CHECK(!eliminate_redundant_apply(p).changed);

    // flipping the second call onto column a makes the lineages equal
    std::string merged =
        "L1(a,b,m1) <= APPLY(In(a), In(a,b), 'C', 's1',"
        " [('type', 'methodCall'), ('methodName', 'getX')]);\n"
        "L2(a,b,m1,m2) <= APPLY(L1(a), L1(a,b,m1), 'C', 's2',"
        " [('type', 'methodCall'), ('methodName', 'getX')]);\n"
        "L3(m2) <= FILTER(L2(m2), L2(m2), 'C', []);\n";
    auto p2 = parse(merged);
    auto r = eliminate_redundant_apply(p2);
    REQUIRE(r.changed);
    CHECK(r.program.statements.size() == 2);
    // the filter now reads m1 straight from L1
    const Statement* f = r.program.find("L3");
    REQUIRE(f);
    CHECK(f->inputs[1].list == "L1");
    CHECK(f->inputs[1].columns == std::vector<std::string>{"m1"});
    CHECK(validate(r.program).empty());
}

TEST_CASE("elimination does not cross a join") {
    // the post-join getSupervisor survives even though it matches the
    // pre-hash one on the same lineage
    auto before = corpus("join42_before.tcap");
    CHECK(!eliminate_redundant_apply(before).changed);
}

TEST_CASE("opaque predicates are left untouched") {
    std::string text =
        "L1(a,p1) <= APPLY(In(a), In(a), 'C', 's1', [('functionId', 'udf7')]);\n"
        "L2(a,p1,p2) <= APPLY(L1(a), L1(a,p1), 'C', 's2', [('functionId', 'udf7')]);\n"
        "L3(a) <= FILTER(L2(p2), L2(a), 'C', []);\n";
    auto p = parse(text);
    CHECK(!eliminate_redundant_apply(p).changed);
    CHECK(!push_filter_past_join(p).changed);
    CHECK(optimize(p).structurallyEquals(canonicalize(p)));
}

TEST_CASE("opposite-side conjuncts are both pushed and the filter disappears") {
    std::string text =
        "HL(a,h1) <= HASH(InL(ka), InL(a), 'C', []);\n"
        "HR(b,h2) <= HASH(InR(kb), InR(b), 'C', []);\n"
        "J1(a,b) <= JOIN(HL(h1), HL(a), HR(h2), HR(b), 'C', []);\n"
        "A1(a,b,p1) <= APPLY(J1(a), J1(a,b), 'C', 's1',"
        " [('type', 'const_comparison'), ('op', '>'), ('value', '1')]);\n"
        "A2(a,b,p1,p2) <= APPLY(A1(b), A1(a,b,p1), 'C', 's2',"
        " [('type', 'const_comparison'), ('op', '<'), ('value', '9')]);\n"
        "A3(a,b,p3) <= APPLY(A2(p1,p2), A2(a,b), 'C', 's3', [('type', 'bool_and')]);\n"
        "F1(a,b) <= FILTER(A3(p3), A3(a,b), 'C', []);\n";
    auto p = parse(text);
    REQUIRE(validate(p).empty());

    std::vector<std::string> fired;
    auto o = optimize(p, [&](const std::string& rule, const Program&) { fired.push_back(rule); });
    CHECK(fired ==
          std::vector<std::string>{"push_filter_past_join", "push_filter_past_join"});
    CHECK(validate(o).empty());

    // each side keeps its predicate as a pre-hash APPLY + FILTER; no
    // post-join filter remains and the join is the final statement
    int filters = 0;
    for (const auto& s : o.statements) filters += s.op == OpKind::Filter ? 1 : 0;
    CHECK(filters == 2);
    CHECK(o.statements.size() == 7);
    CHECK(o.statements.back().op == OpKind::Join);
}

TEST_CASE("conjunct reading both sides stays above the join") {
    std::string text =
        "HL(a,h1) <= HASH(InL(ka), InL(a), 'C', []);\n"
        "HR(b,h2) <= HASH(InR(kb), InR(b), 'C', []);\n"
        "J1(a,b) <= JOIN(HL(h1), HL(a), HR(h2), HR(b), 'C', []);\n"
        "A1(a,b,p1) <= APPLY(J1(a,b), J1(a,b), 'C', 's1', [('type', 'equalityCheck')]);\n"
        "F1(a,b) <= FILTER(A1(p1), A1(a,b), 'C', []);\n";
    auto p = parse(text);
    REQUIRE(validate(p).empty());
    CHECK(!push_filter_past_join(p).changed);
    CHECK(optimize(p).structurallyEquals(canonicalize(p)));
}

TEST_CASE("canonicalize renames by first appearance and keeps sources") {
    auto p = corpus("sel52.tcap");
    auto c = canonicalize(p);
    CHECK(c.statements.size() == p.statements.size());
    CHECK(c.sources() == std::vector<std::string>{"In"});
    CHECK(c.statements[0].outputName == "L1");
    // source column names are kept verbatim; derived columns are renamed
    CHECK(c.statements[0].inputs[0].columns == std::vector<std::string>{"dep"});
    CHECK(c.statements[0].outputColumns ==
          std::vector<std::string>({"dep", "emp", "sup", "c1"}));
    CHECK(c.statements[0].computation == "comp1");
    // idempotent
    CHECK(canonicalize(c).structurallyEquals(c));
    // stable across a print/parse cycle
    CHECK(canonicalize(parse(print(p))).structurallyEquals(c));
}

TEST_CASE("randomized programs stay valid through optimize") {
    std::mt19937 rng(23);
    for (int round = 0; round < 60; ++round) {
        Program p;
        int n = 2 + int(rng() % 10);
        std::vector<std::string> lists = {"In"};
        std::vector<std::vector<std::string>> cols = {{"a", "b"}};
        for (int i = 0; i < n; ++i) {
            Statement s;
            s.outputName = "L" + std::to_string(i);
            size_t src = rng() % lists.size();
            std::vector<std::string> copy = cols[src];
            std::string sel = cols[src][rng() % cols[src].size()];
            if (rng() % 4 == 0) {
                s.op = OpKind::Filter;
                s.inputs = {{lists[src], {sel}}, {lists[src], copy}};
                s.outputColumns = copy;
            } else {
                s.op = OpKind::Apply;
                s.inputs = {{lists[src], {sel}}, {lists[src], copy}};
                s.outputColumns = copy;
                s.outputColumns.push_back("n" + std::to_string(i));
                s.stage = "st" + std::to_string(i);
                s.kv = {{"type", "methodCall"},
                        {"methodName", "m" + std::to_string(int(rng() % 2))}};
            }
            s.computation = "C";
            lists.push_back(s.outputName);
            cols.push_back(s.outputColumns);
            p.statements.push_back(std::move(s));
        }
        REQUIRE(validate(p).empty());
        auto o = optimize(p);
        CAPTURE(print(p));
        CHECK(validate(o).empty());
        CHECK(optimize(o).structurallyEquals(o));
        CHECK(o.statements.size() <= p.statements.size());
    }
}
