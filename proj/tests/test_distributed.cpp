#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <random>
#include <set>

#include "pc/distributed.hpp"
#include "pc/lambda.hpp"
#include "support/engine_fixtures.hpp"

using namespace pc;
using namespace pc::lam;
using namespace pc::dist;
using fixtures::Emp;
using fixtures::HostEmp;
using fixtures::Vec2;

namespace {

std::string cellStr(const ScalarValue& v) {
    switch (v.index()) {
        case 0: return "null";
        case 1: return "i:" + std::to_string(std::get<int64_t>(v));
        case 2: {
            char buf[40];
            std::snprintf(buf, sizeof buf, "d:%.17g", std::get<double>(v));
            return buf;
        }
        case 3: return std::get<bool>(v) ? "b:1" : "b:0";
        case 4: return "u:" + std::to_string(std::get<uint64_t>(v));
        case 5: return "s:" + std::get<std::string>(v);
        case 6: {
            const ObjRef& r = std::get<ObjRef>(v);
            if (r.typeCode == typeCodeOf<PString>())
                return "s:" + std::string(reinterpret_cast<const PString*>(r.payload)->view());
            if (r.typeCode == typeCodeOf<Emp>()) {
                auto e = fixtures::readEmp(v);
                return "Emp:" + std::to_string(e.id);
            }
            if (r.typeCode == typeCodeOf<Vec2>()) {
                const auto* p = reinterpret_cast<const Vec2*>(r.payload);
                char buf[96];
                std::snprintf(buf, sizeof buf, "Vec2(%.17g,%.17g,%lld)", p->x, p->y,
                              static_cast<long long>(p->n));
                return buf;
            }
            return "obj";
        }
    }
    return "?";
}

std::vector<std::string> rowMultiset(const eng::MaterializedList& ml) {
    std::vector<std::string> out;
    for (const auto& row : ml.rows) {
        std::string s;
        for (const auto& c : row) s += cellStr(c) + "|";
        out.push_back(s);
    }
    std::sort(out.begin(), out.end());
    return out;
}

tcap::Program deptIdAgg() {
    auto agg = make_aggregate(make_reader("db", "emp", "A"),
                              make_lambda_from_member(0, "dept", TypeTag::Int),
                              make_lambda_from_member(0, "id", TypeTag::Int), "A");
    return compile_to_tcap(make_writer(agg, "db", "sums", "W"));
}

tcap::Program deptSalaryAgg() {
    auto agg = make_aggregate(make_reader("db", "emp", "A"),
                              make_lambda_from_member(0, "dept", TypeTag::Int),
                              make_lambda_from_method(0, "getSalary", TypeTag::Double), "A");
    return compile_to_tcap(make_writer(agg, "db", "sums", "W"));
}

tcap::Program nameIdAgg() {
    auto agg = make_aggregate(make_reader("db", "emp", "A"),
                              make_lambda_from_method(0, "getName", TypeTag::String),
                              make_lambda_from_member(0, "id", TypeTag::Int), "A");
    return compile_to_tcap(make_writer(agg, "db", "sums", "W"));
}

tcap::Program deptJoin2() {
    auto ra = make_reader("db", "a", "J");
    auto rb = make_reader("db", "b", "J");
    auto eq = make_binary("==", make_lambda_from_member(0, "dept"),
                          make_lambda_from_member(1, "dept"));
    return compile_to_tcap(make_writer(make_join({ra, rb}, eq, "J"), "db", "out", "W"));
}

tcap::Program deptJoin3() {
    auto ra = make_reader("db", "a", "J3");
    auto rb = make_reader("db", "b", "J3");
    auto rc = make_reader("db", "c", "J3");
    auto e1 = make_binary("==", make_lambda_from_member(0, "dept"),
                          make_lambda_from_member(1, "dept"));
    auto e2 = make_binary("==", make_lambda_from_member(1, "dept"),
                          make_lambda_from_member(2, "dept"));
    return compile_to_tcap(
        make_writer(make_join({ra, rb, rc}, make_binary("&&", e1, e2), "J3"), "db", "out", "W"));
}

ClusterConfig cfgOf(size_t nodes, size_t N, size_t K, size_t M,
                    size_t pageSize = 1 << 20) {
    ClusterConfig c;
    c.nodes = nodes;
    c.producerThreads = N;
    c.combinerThreads = K;
    c.partitionsPerNode = M;
    c.pageSize = pageSize;
    return c;
}

}  // namespace

TEST_CASE("cluster config parsing") {
    auto c = parse_cluster_config(
        "# a comment\n"
        "nodes=4\n"
        "N = 3\n"
        "K=2\n"
        "M=5\n"
        "pageSizeBytes=65536\n"
        "broadcastThresholdBytes=1000\n"
        "compression=on  # trailing comment\n");
    CHECK(c.nodes == 4);
    CHECK(c.producerThreads == 3);
    CHECK(c.combinerThreads == 2);
    CHECK(c.partitionsPerNode == 5);
    CHECK(c.pageSize == 65536);
    CHECK(c.broadcastThresholdBytes == 1000);
    CHECK(c.compression);
    CHECK(c.partitions() == 20);

    CHECK_THROWS_AS(parse_cluster_config("bogus=1\n"), ConfigError);
    CHECK_THROWS_AS(parse_cluster_config("nodes=abc\n"), ConfigError);
    CHECK_THROWS_AS(parse_cluster_config("compression=maybe\n"), ConfigError);
    CHECK_THROWS_AS(parse_cluster_config("just a line\n"), ConfigError);
    CHECK_THROWS_AS(parse_cluster_config("nodes=0\n"), ConfigError);
    CHECK_THROWS_AS(load_cluster_config("/nonexistent/cluster.conf"), ConfigError);

    // defaults survive an empty config
    auto d = parse_cluster_config("");
    CHECK(d.nodes == 1);
    CHECK(d.combinerThreads == 2);
    CHECK(d.partitionsPerNode == 2);
    CHECK(d.broadcastThresholdBytes == 2ULL << 30);
    CHECK(!d.compression);
}

TEST_CASE("rle codec round trips") {
    std::mt19937_64 rng(5);
    std::vector<std::byte> a;
    for (int i = 0; i < 10000; ++i) a.push_back(std::byte(rng() % 7 == 0 ? rng() % 256 : 0));
    CHECK(rle_decompress(rle_compress(a)) == a);
    CHECK(rle_compress(a).size() < a.size());  // zero-heavy data shrinks

    std::vector<std::byte> b;
    for (int i = 0; i < 3000; ++i) b.push_back(std::byte(rng() % 256));
    CHECK(rle_decompress(rle_compress(b)) == b);

    CHECK(rle_decompress(rle_compress({})).empty());
    CHECK_THROWS_AS(rle_decompress(b), CorruptBlock);
}

TEST_CASE("job-stage planning counts") {
    // a straight selection chain is a single pipeline stage
    auto sel = compile_to_tcap(make_writer(
        make_selection(make_reader("db", "emp", "S"),
                       make_binary(">", make_lambda_from_member(0, "salary", TypeTag::Double),
                                   make_constant(1.0)),
                       "S"),
        "db", "out", "W"));
    auto st1 = plan_stages(sel);
    REQUIRE(st1.size() == 1);
    CHECK(st1[0].kind == StageKind::Pipeline);

    // an aggregation is two stages; the trailing OUTPUT folds into the second
    auto st2 = plan_stages(deptIdAgg());
    REQUIRE(st2.size() == 2);
    CHECK(st2[0].kind == StageKind::Pipeline);
    CHECK(st2[1].kind == StageKind::Aggregation);
    CHECK(st2[1].stmts.size() == 2);  // AGGREGATE + folded OUTPUT

    // a binary join is 2n = 4 stages, a three-way join 2n = 6
    auto st3 = plan_stages(deptJoin2());
    CHECK(st3.size() == 4);
    auto st4 = plan_stages(deptJoin3());
    REQUIRE(st4.size() == 6);
    int builds = 0, pipes = 0;
    for (const auto& s : st4) {
        builds += s.kind == StageKind::BuildHashTable ? 1 : 0;
        pipes += s.kind == StageKind::Pipeline ? 1 : 0;
    }
    CHECK(builds == 2);
    CHECK(pipes == 4);  // 2 build repartitions + probe repartition + probe
}

TEST_CASE("shuffled combiner pages read back identically with zero fixups") {
    for (bool compress : {false, true}) {
        CAPTURE(compress);
        auto cfg = cfgOf(2, 1, 1, 3, 1 << 16);
        cfg.compression = compress;
        SimCluster cl(cfg);

        using MapT = PMap<int64_t, int64_t>;
        using RootT = PVector<Handle<MapT>>;
        BlockPtr pg = make_block(1 << 16);
        auto root = make_object<RootT>();
        set_block_root(*pg, root);
        for (int m = 0; m < 3; ++m) root->push_back(make_object<MapT>());
        std::map<std::pair<int, int64_t>, int64_t> oracle;
        for (int m = 0; m < 3; ++m) {
            for (int64_t k = 0; k < 40; ++k) {
                int64_t v = k * 7 + m;
                root->elemPayload(uint64_t(m))->upsert(
                    k, v, [](int64_t a, int64_t b) { return a + b; });
                oracle[{m, k}] = v;
            }
        }
        freeze_block(pg);

        uint64_t fix0 = counters().importFixups.load();
        cl.send(0, 1, "t", pg);
        auto got = cl.drain(1, "t");
        REQUIRE(got.size() == 1);
        std::map<std::pair<int, int64_t>, int64_t> seen;
        auto r2 = get_block_root<RootT>(*got[0]);
        REQUIRE(r2.get());
        for (int m = 0; m < 3; ++m) {
            r2->elemPayload(uint64_t(m))->forEach(
                [&](const int64_t& k, const int64_t& v) { seen[{m, k}] = v; });
        }
        CHECK(seen == oracle);
        CHECK(counters().importFixups.load() - fix0 == 0);

        // an empty vector-of-maps page survives the trip too
        BlockPtr ep = make_block(1 << 14);
        auto eroot = make_object<RootT>();
        set_block_root(*ep, eroot);
        for (int m = 0; m < 3; ++m) eroot->push_back(make_object<MapT>());
        freeze_block(ep);
        cl.send(1, 0, "e", ep);
        auto egot = cl.drain(0, "e");
        REQUIRE(egot.size() == 1);
        auto er = get_block_root<RootT>(*egot[0]);
        for (int m = 0; m < 3; ++m) CHECK(er->elemPayload(uint64_t(m))->entryCount() == 0);
    }
}

TEST_CASE("four-node all-to-all shuffle accounts for every page exactly once") {
    SimCluster cl(cfgOf(4, 1, 1, 1, 1 << 14));
    for (int i = 0; i < 64; ++i) {
        BlockPtr pg = make_block(1 << 12);
        auto root = make_object<PVector<int64_t>>();
        root->push_back(i);
        set_block_root(*pg, root);
        freeze_block(pg);
        cl.send(size_t(i) % 4, size_t(i * 7 + 1) % 4, "audit", pg);
    }
    CHECK(cl.pagesSent() == 64);
    std::multiset<int64_t> seen;
    for (size_t n = 0; n < 4; ++n) {
        for (const auto& pg : cl.drain(n, "audit")) {
            auto r = get_block_root<PVector<int64_t>>(*pg);
            seen.insert((*r)[0]);
        }
    }
    CHECK(cl.pagesDelivered() == 64);
    CHECK(seen.size() == 64);
    for (int i = 0; i < 64; ++i) CHECK(seen.count(i) == 1);  // exactly once
    CHECK(cl.ledger().size() == 64);
    for (size_t n = 0; n < 4; ++n) CHECK(cl.drain(n, "audit").empty());
}

TEST_CASE("scatter spreads rows round-robin and deep-copies them onto node pages") {
    auto host = fixtures::hostEmps(103, 9);
    auto ml = fixtures::empSet(host, 1 << 16, "emp");
    SimCluster cl(cfgOf(4, 1, 1, 1, 1 << 14));
    cl.scatter("Inemp", ml);

    std::multiset<int64_t> ids;
    for (size_t n = 0; n < 4; ++n) {
        const auto& part = cl.storage(n).at("Inemp");
        CHECK(part.columns == std::vector<std::string>{"emp"});
        CHECK(part.rows.size() == (n < 3 ? 26 : 25));
        for (const auto& row : part.rows) {
            ids.insert(fixtures::readEmp(row[0]).id);
            // rows live on the node's own pages, not the original set's
            const auto& r = std::get<ObjRef>(row[0]);
            bool onNodePage = false;
            for (const auto& pg : part.pages) onNodePage = onNodePage || pg->contains(r.payload);
            CHECK(onNodePage);
        }
    }
    CHECK(ids.size() == 103);
    for (const auto& e : host) CHECK(ids.count(e.id) == 1);
}

TEST_CASE("distributed integer aggregation is exact across node counts") {
    auto host = fixtures::hostEmps(5000, 1234);
    auto ml = fixtures::empSet(host, 1 << 18, "emp");
    auto prog = deptIdAgg();
    std::map<int64_t, int64_t> oracle;
    for (const auto& e : host) oracle[e.dept] += e.id;

    for (size_t nodes : {size_t(1), size_t(2), size_t(4)}) {
        CAPTURE(nodes);
        SimCluster cl(cfgOf(nodes, 2, 2, 2, 1 << 16));
        cl.scatter("Inemp", ml);
        DistMetrics dm;
        auto res = distributed_aggregate(cl, prog, &dm);
        REQUIRE(res.rows.size() == oracle.size());
        for (const auto& row : res.rows) {
            int64_t k = std::get<int64_t>(row[0]);
            REQUIRE(oracle.count(k) == 1);
            CHECK(std::get<int64_t>(row[1]) == oracle[k]);
        }
        CHECK(dm.importFixups == 0);  // the zero-copy shuffle proof
        CHECK(dm.producerPages >= nodes * 2);
        CHECK(dm.shuffledPages == dm.combinerPages);
        CHECK(dm.resultRows == oracle.size());
    }
}

TEST_CASE("word-style string aggregation over two nodes matches the oracle") {
    auto host = fixtures::hostEmps(10000, 777);
    auto ml = fixtures::empSet(host, 1 << 18, "emp");
    std::map<std::string, int64_t> oracle;
    for (const auto& e : host) oracle[e.name] += e.id;

    SimCluster cl(cfgOf(2, 2, 2, 2, 1 << 16));
    cl.scatter("Inemp", ml);
    DistMetrics dm;
    auto res = distributed_aggregate(cl, nameIdAgg(), &dm);
    REQUIRE(res.rows.size() == oracle.size());
    for (const auto& row : res.rows) {
        const auto& k = std::get<std::string>(row[0]);
        REQUIRE(oracle.count(k) == 1);
        CHECK(std::get<int64_t>(row[1]) == oracle[k]);
    }
    CHECK(dm.importFixups == 0);
}

TEST_CASE("double sums agree with the oracle within 1e-9 relative error") {
    auto host = fixtures::hostEmps(4000, 55);
    auto ml = fixtures::empSet(host, 1 << 18, "emp");
    std::map<int64_t, double> oracle;
    for (const auto& e : host) oracle[e.dept] += e.salary;

    SimCluster cl(cfgOf(4, 3, 2, 2, 1 << 16));
    cl.scatter("Inemp", ml);
    auto res = distributed_aggregate(cl, deptSalaryAgg());
    REQUIRE(res.rows.size() == oracle.size());
    for (const auto& row : res.rows) {
        int64_t k = std::get<int64_t>(row[0]);
        double v = std::get<double>(row[1]);
        CHECK(std::abs(v - oracle.at(k)) <= 1e-9 * std::abs(oracle.at(k)));
    }
}

TEST_CASE("a degenerate single-node cluster reproduces the engine result exactly") {
    auto host = fixtures::hostEmps(2000, 31);
    auto ml = fixtures::empSet(host, 1 << 18, "emp");
    auto prog = deptSalaryAgg();

    auto engineRows = rowMultiset(eng::execute(prog, {{"Inemp", ml}}).at("db.sums"));

    SimCluster cl(cfgOf(1, 1, 1, 1));
    cl.scatter("Inemp", ml);
    auto res = distributed_aggregate(cl, prog);
    CHECK(rowMultiset(res) == engineRows);  // bitwise, including doubles
}

TEST_CASE("integer aggregation is invariant to N, K, M and node count") {
    auto host = fixtures::hostEmps(3000, 808);
    auto ml = fixtures::empSet(host, 1 << 18, "emp");
    auto prog = deptIdAgg();
    std::vector<std::string> base;
    for (auto cfg : {cfgOf(1, 1, 1, 1, 1 << 15), cfgOf(2, 2, 2, 2, 1 << 15),
                     cfgOf(4, 3, 2, 3, 1 << 15), cfgOf(2, 4, 1, 1, 1 << 14)}) {
        SimCluster cl(cfg);
        cl.scatter("Inemp", ml);
        auto rows = rowMultiset(distributed_aggregate(cl, prog));
        if (base.empty()) base = rows;
        else CHECK(rows == base);
    }
    CHECK(!base.empty());
}

TEST_CASE("object-valued aggregation combines across nodes via the descriptor") {
    auto ml = fixtures::vec2Set(1000, 1 << 16, "v");
    auto agg = make_aggregate(make_reader("db", "v", "A"),
                              make_lambda_from_member(0, "n", TypeTag::Int),
                              make_lambda_from_self(0), "A");
    auto prog = compile_to_tcap(make_writer(agg, "db", "sums", "W"));

    std::map<int64_t, Vec2> oracle;
    for (size_t i = 0; i < 1000; ++i) {
        auto& v = oracle[int64_t(i % 5)];
        v.x += double(i % 10);
        v.y += 1.0;
        v.n += int64_t(i % 5);
    }

    SimCluster cl(cfgOf(2, 2, 2, 2, 1 << 16));
    cl.scatter("Inv", ml);
    DistMetrics dm;
    auto res = distributed_aggregate(cl, prog, &dm);
    REQUIRE(res.rows.size() == 5);
    for (const auto& row : res.rows) {
        int64_t k = std::get<int64_t>(row[0]);
        const auto& r = std::get<ObjRef>(row[1]);
        REQUIRE(r.typeCode == typeCodeOf<Vec2>());
        const auto* got = reinterpret_cast<const Vec2*>(r.payload);
        CHECK(got->x == oracle[k].x);  // small integral doubles: exact
        CHECK(got->y == oracle[k].y);
        CHECK(got->n == oracle[k].n);
    }
    CHECK(dm.importFixups == 0);
}

TEST_CASE("empty input aggregates to an empty result") {
    auto empty = fixtures::empSet({}, 1 << 12, "emp");
    SimCluster cl(cfgOf(2, 2, 2, 2));
    cl.scatter("Inemp", empty);
    auto res = distributed_aggregate(cl, deptIdAgg());
    CHECK(res.rows.empty());
    CHECK(res.columns.size() == 2);
}

TEST_CASE("compressed shuffles change bytes, not results") {
    auto host = fixtures::hostEmps(2000, 99);
    auto ml = fixtures::empSet(host, 1 << 18, "emp");
    auto prog = deptIdAgg();
    SimCluster plain(cfgOf(2, 2, 2, 2, 1 << 16));
    plain.scatter("Inemp", ml);
    auto base = rowMultiset(distributed_aggregate(plain, prog));

    auto cc = cfgOf(2, 2, 2, 2, 1 << 16);
    cc.compression = true;
    SimCluster zc(cc);
    zc.scatter("Inemp", ml);
    DistMetrics dm;
    CHECK(rowMultiset(distributed_aggregate(zc, prog, &dm)) == base);
    CHECK(dm.shuffledBytes > 0);
}

TEST_CASE("hash-partition join matches nested loops; 2x3 duplicate keys make 6 rows") {
    std::vector<HostEmp> hostA = {{1, 10, 5, "a"}, {2, 20, 5, "b"}, {3, 30, 7, "c"}};
    std::vector<HostEmp> hostB = {{11, 1, 5, "x"}, {12, 2, 5, "y"}, {13, 3, 5, "z"},
                                  {14, 4, 8, "w"}};
    auto a = fixtures::empSet(hostA, 1 << 14, "a");
    auto b = fixtures::empSet(hostB, 1 << 14, "b");
    auto prog = deptJoin2();

    // dept 5: 2 left x 3 right = 6 candidates; dept 7 and 8 find no partner
    std::vector<std::pair<int64_t, int64_t>> want;
    for (const auto& x : hostA)
        for (const auto& y : hostB)
            if (x.dept == y.dept) want.emplace_back(x.id, y.id);
    std::sort(want.begin(), want.end());
    REQUIRE(want.size() == 6);

    for (bool forceRepartition : {true, false}) {
        CAPTURE(forceRepartition);
        auto cfg = cfgOf(2, 1, 1, 2, 1 << 14);
        if (forceRepartition) cfg.broadcastThresholdBytes = 1;
        SimCluster cl(cfg);
        cl.scatter("Ina", a);
        cl.scatter("Inb", b);
        auto jp = plan_join(cl, prog);
        CHECK(jp.broadcast == !forceRepartition);
        CHECK(jp.jobStages == (forceRepartition ? 4 : 2));
        DistMetrics dm;
        auto res = hash_partition_join(cl, prog, &dm);
        std::vector<std::pair<int64_t, int64_t>> got;
        for (const auto& row : res.rows)
            got.emplace_back(fixtures::readEmp(row[0]).id, fixtures::readEmp(row[1]).id);
        std::sort(got.begin(), got.end());
        CHECK(got == want);
        CHECK(dm.broadcast == !forceRepartition);
        CHECK(dm.importFixups == 0);
    }
}

TEST_CASE("three-way distributed join equals the triple nested loop on both plans") {
    auto hostA = fixtures::hostEmps(30, 11);
    auto hostB = fixtures::hostEmps(24, 22);
    auto hostC = fixtures::hostEmps(20, 33);
    auto a = fixtures::empSet(hostA, 1 << 15, "a");
    auto b = fixtures::empSet(hostB, 1 << 15, "b");
    auto c = fixtures::empSet(hostC, 1 << 15, "c");
    auto prog = deptJoin3();

    std::vector<std::string> want;
    for (const auto& x : hostA)
        for (const auto& y : hostB)
            for (const auto& z : hostC)
                if (x.dept == y.dept && y.dept == z.dept)
                    want.push_back(std::to_string(x.id) + "," + std::to_string(y.id) + "," +
                                   std::to_string(z.id));
    std::sort(want.begin(), want.end());
    REQUIRE(!want.empty());

    for (bool forceRepartition : {true, false}) {
        CAPTURE(forceRepartition);
        auto cfg = cfgOf(2, 1, 1, 2, 1 << 15);
        if (forceRepartition) cfg.broadcastThresholdBytes = 1;
        SimCluster cl(cfg);
        cl.scatter("Ina", a);
        cl.scatter("Inb", b);
        cl.scatter("Inc", c);
        auto jp = plan_join(cl, prog);
        CHECK(jp.jobStages == (forceRepartition ? 6 : 3));
        auto res = hash_partition_join(cl, prog);
        std::vector<std::string> got;
        for (const auto& row : res.rows)
            got.push_back(std::to_string(fixtures::readEmp(row[0]).id) + "," +
                          std::to_string(fixtures::readEmp(row[1]).id) + "," +
                          std::to_string(fixtures::readEmp(row[2]).id));
        std::sort(got.begin(), got.end());
        CHECK(got == want);
    }
}

TEST_CASE("a join with an empty input yields an empty result") {
    auto hostA = fixtures::hostEmps(20, 3);
    auto a = fixtures::empSet(hostA, 1 << 14, "a");
    auto b = fixtures::empSet({}, 1 << 12, "b");
    auto prog = deptJoin2();
    for (bool forceRepartition : {true, false}) {
        auto cfg = cfgOf(2, 1, 1, 2, 1 << 14);
        if (forceRepartition) cfg.broadcastThresholdBytes = 1;
        SimCluster cl(cfg);
        cl.scatter("Ina", a);
        cl.scatter("Inb", b);
        CHECK(hash_partition_join(cl, prog).rows.empty());
    }
}
