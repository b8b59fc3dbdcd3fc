#include <doctest.h>

#include <fstream>
#include <random>
#include <sstream>

#include "pc/tcap.hpp"

using namespace pc;
using namespace pc::tcap;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(in.good());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

const std::string kCorpus = CORPUS_DIR;

}  // namespace

TEST_CASE("the three-way selection listing parses into 4 statements") {
    auto p = parse(slurp(kCorpus + "/sel52.tcap"));
    REQUIRE(p.statements.size() == 4);
    const auto& s1 = p.statements[0];
    CHECK(s1.outputName == "WDNm_1");
    CHECK(s1.op == OpKind::Apply);
    CHECK(s1.outputColumns == std::vector<std::string>{"dep", "emp", "sup", "nm1"});
    CHECK(s1.inputs[0].list == "In");
    CHECK(s1.inputs[0].columns == std::vector<std::string>{"dep"});
    CHECK(s1.inputs[1].columns == std::vector<std::string>{"dep", "emp", "sup"});
    CHECK(s1.computation == "Join_2212");
    CHECK(s1.stage == "att_acc_1");
    REQUIRE(s1.kv.size() == 2);
    CHECK(s1.kv[0].key == "type");
    CHECK(s1.kv[0].value == "attAccess");
    CHECK(s1.kv[1].key == "attName");
    CHECK(s1.kv[1].value == "deptName");
    CHECK(p.statements[3].op == OpKind::Filter);
    CHECK(p.sources() == std::vector<std::string>{"In"});
}

TEST_CASE("empty text parses to an empty program") {
    auto p = parse("");
    CHECK(p.statements.empty());
    CHECK(print(p).empty());
    auto p2 = parse("  /* just a comment */  ");
    CHECK(p2.statements.empty());
}

TEST_CASE("undefined input is an error naming the list") {
    try {
        parse("X(a) <= FILTER(Foo(x), Foo(a), 'C', []);");
        FAIL("expected TcapError");
    } catch (const TcapError& e) {
        CHECK(std::string(e.what()).find("UndefinedInput") != std::string::npos);
        CHECK(std::string(e.what()).find("Foo") != std::string::npos);
    }
}

TEST_CASE("duplicate output names are rejected") {
    std::string text =
        "A(x) <= FILTER(In(p), In(x), 'C', []);\n"
        "A(y) <= FILTER(In(p), In(y), 'C', []);\n";
    CHECK_THROWS_AS(parse(text), TcapError);
}

TEST_CASE("syntax errors carry line and column") {
    try {
        parse("A(x) <= APPLY(In(a), In(a), 'C' 'st', []);", "bad.tcap");
        FAIL("expected TcapError");
    } catch (const TcapError& e) {
        std::string msg = e.what();
        CHECK(msg.find("bad.tcap:1:") != std::string::npos);
        CHECK(msg.find("SyntaxError") != std::string::npos);
    }
}

TEST_CASE("print/parse round trip on every corpus file") {
    for (const char* name :
         {"sel52.tcap", "sel43_before.tcap", "sel43_after.tcap", "join42_before.tcap",
          "join42_after.tcap"}) {
        CAPTURE(name);
        auto p = parse(slurp(kCorpus + "/" + name));
        std::string text = print(p);
        auto p2 = parse(text);
        CHECK(p.structurallyEquals(p2));
        // idempotent canonicalization
        CHECK(print(p2) == text);
        CHECK(validate(p).empty());
    }
}

TEST_CASE("aggregate and output extension forms") {
    std::string text =
        "K1(c,k) <= APPLY(In(c), In(c), 'Agg_1', 'key_1', [('type', 'self')]);\n"
        "K2(c,k,v) <= APPLY(K1(c), K1(c,k), 'Agg_1', 'val_1', "
        "[('type', 'attAccess'), ('attName', 'x')]);\n"
        "A1(key,val) <= AGGREGATE(K2(k), K2(v), 'Agg_1', []);\n"
        "O1() <= OUTPUT(A1(key,val), 'db', 'set', 'Agg_1', []);\n";
    auto p = parse(text);
    REQUIRE(p.statements.size() == 4);
    CHECK(p.statements[2].op == OpKind::Aggregate);
    CHECK(p.statements[3].op == OpKind::Output);
    CHECK(p.statements[3].db == "db");
    CHECK(p.statements[3].set == "set");
    CHECK(validate(p).empty());
    auto p2 = parse(print(p));
    CHECK(p.structurallyEquals(p2));
}

TEST_CASE("validator catches arity and column violations") {
    SUBCASE("APPLY emitting two new columns") {
        auto p = parse("A(x,y,z) <= APPLY(In(a), In(x), 'C', 's', []);");
        auto d = validate(p);
        REQUIRE(!d.empty());
        CHECK(d[0].code == "ArityViolation");
        // diagnostics format
        CHECK(d[0].str().find(":1:1: ArityViolation:") != std::string::npos);
    }
    SUBCASE("FILTER copy list inventing a column") {
        auto p = parse(
            "A(x,y) <= APPLY(In(x), In(x), 'C', 's', []);\n"
            "B(x,q) <= FILTER(A(y), A(x,q), 'C', []);");
        auto d = validate(p);
        REQUIRE(!d.empty());
        CHECK(d[0].code == "UnknownColumn");
    }
    SUBCASE("clean corpus programs produce no diagnostics") {
        CHECK(validate(parse(slurp(kCorpus + "/sel43_before.tcap"))).empty());
        CHECK(validate(parse(slurp(kCorpus + "/join42_before.tcap"))).empty());
    }
}

TEST_CASE("def-use dag") {
    SUBCASE("the selection program forms a chain") {
        auto p = parse(slurp(kCorpus + "/sel52.tcap"));
        auto d = build_dag(p);
        CHECK(d.nodes.size() == 5);  // In + 4 statements
        CHECK(d.at("In").isSource);
        CHECK(d.consumerCount("In") == 1);
        CHECK(d.consumerCount("WDNm_1") == 1);
        CHECK(d.consumerCount("WDNm_2") == 1);
        CHECK(d.consumerCount("WBl_1") == 1);
        CHECK(d.consumerCount("Flt_1") == 0);
    }
    SUBCASE("one output feeding two filters has consumer count 2") {
        auto p = parse(
            "A(x,b) <= APPLY(In(x), In(x), 'C', 's', [('type', 'self')]);\n"
            "F1(x) <= FILTER(A(b), A(x), 'C', []);\n"
            "F2(x) <= FILTER(A(b), A(x), 'C', []);");
        auto d = build_dag(p);
        CHECK(d.consumerCount("A") == 2);
    }
    SUBCASE("join program shape") {
        auto p = parse(slurp(kCorpus + "/join42_before.tcap"));
        auto d = build_dag(p);
        CHECK(d.at("InSup").isSource);
        CHECK(d.at("InEmp").isSource);
        CHECK(d.consumerCount("JK2_2") == 1);   // joined
        CHECK(d.consumerCount("JK2_12") == 0);  // sink
    }
    SUBCASE("self-reference is cyclic") {
        Program p;
        Statement s;
        s.outputName = "A";
        s.outputColumns = {"x"};
        s.op = OpKind::Filter;
        s.inputs = {{"A", {"b"}}, {"A", {"x"}}};
        p.statements.push_back(s);
        CHECK_THROWS_AS(build_dag(p), PcError);
    }
}

TEST_CASE("randomized programs round-trip through print/parse") {
    std::mt19937 rng(17);
    for (int round = 0; round < 50; ++round) {
        Program p;
        int n = 1 + int(rng() % 8);
        std::vector<std::string> lists = {"In"};
        std::vector<std::vector<std::string>> cols = {{"a", "b", "c"}};
        for (int i = 0; i < n; ++i) {
            Statement s;
            s.line = i + 1;
            s.outputName = "L" + std::to_string(i);
            size_t src = rng() % lists.size();
            std::vector<std::string> copy = cols[src];
            if (copy.size() > 1 && rng() % 2) copy.pop_back();
            std::string sel = cols[src][rng() % cols[src].size()];
            if (rng() % 3 == 0) {
                s.op = OpKind::Filter;
                s.inputs = {{lists[src], {sel}}, {lists[src], copy}};
                s.outputColumns = copy;
                s.computation = "C";
            } else {
                s.op = OpKind::Apply;
                s.inputs = {{lists[src], {sel}}, {lists[src], copy}};
                s.outputColumns = copy;
                s.outputColumns.push_back("n" + std::to_string(i));
                s.computation = "C";
                s.stage = "st" + std::to_string(i);
                s.kv = {{"type", "methodCall"}, {"methodName", "m" + std::to_string(int(rng() % 3))}};
            }
            lists.push_back(s.outputName);
            cols.push_back(s.outputColumns);
            p.statements.push_back(std::move(s));
        }
        REQUIRE(validate(p).empty());
        auto p2 = parse(print(p));
        CHECK(p.structurallyEquals(p2));
        CHECK(print(p2) == print(p));
    }
}
