#ifndef PC_TOOLS_DEMO_SUPPORT_HPP
#define PC_TOOLS_DEMO_SUPPORT_HPP

// In-block record types and runners shared by the demo/bench binaries:
// k-means over a simulated cluster, block matrix multiply as join+aggregate,
// a three-way join demo, and the vectorized-vs-virtual filter kernels.

#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "pc/containers.hpp"
#include "pc/distributed.hpp"
#include "pc/engine.hpp"
#include "pc/lambda.hpp"

namespace demo {

// -- k-means ----------------------------------------------------------------

// A 2-d point that doubles as its own aggregation accumulator: the registered
// combine adds coordinates and counts, so summing points per cluster yields
// (sum_x, sum_y, n) ready for the centroid division.
struct KmPoint {
    double x = 0;
    double y = 0;
    int64_t cnt = 0;
};

}  // namespace demo

namespace pc {

template <>
struct PcType<demo::KmPoint> {
    static BehaviorDescriptor describe() {
        using demo::KmPoint;
        BehaviorDescriptor d;
        d.name = "demo.KmPoint";
        d.payloadSize = sizeof(KmPoint);
        d.getMember = [](const std::byte* p, std::string_view a) -> FieldRef {
            const auto* v = reinterpret_cast<const KmPoint*>(p);
            if (a == "x") return {reinterpret_cast<const std::byte*>(&v->x), FieldTag::Double};
            if (a == "y") return {reinterpret_cast<const std::byte*>(&v->y), FieldTag::Double};
            if (a == "cnt")
                return {reinterpret_cast<const std::byte*>(&v->cnt), FieldTag::Int64};
            return {};
        };
        d.combine = [](std::byte* dst, const std::byte* src) {
            auto* a = reinterpret_cast<KmPoint*>(dst);
            const auto* b = reinterpret_cast<const KmPoint*>(src);
            a->x += b->x;
            a->y += b->y;
            a->cnt += b->cnt;
        };
        return d;
    }
};

}  // namespace pc

namespace demo {

using Point2 = std::array<double, 2>;

// Two well-separated unit-variance blobs, interleaved so the first k points
// already touch every blob.
inline std::vector<Point2> blobPoints(size_t n, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<Point2> out;
    out.reserve(n);
    for (size_t i = 0; i < n; ++i) {
        double off = (i % 2) ? 10.0 : 0.0;
        out.push_back({off + g(rng), off + g(rng)});
    }
    return out;
}

inline size_t nearestCentroid(double x, double y, const std::vector<Point2>& c) {
    size_t best = 0;
    double bestD = 0;
    for (size_t j = 0; j < c.size(); ++j) {
        double dx = x - c[j][0], dy = y - c[j][1];
        double d = dx * dx + dy * dy;
        if (j == 0 || d < bestD) {
            bestD = d;
            best = j;
        }
    }
    return best;
}

struct KmResult {
    std::vector<Point2> centroids;
    size_t iterations = 0;
    bool converged = false;
};

// Lloyd iterations around a pluggable assignment/summation step.  step()
// returns per-cluster (sum_x, sum_y, count); empty clusters keep their
// centroid.  Stops when the largest centroid move drops below eps.
template <class StepFn>
KmResult kmeansLoop(std::vector<Point2> centroids, size_t maxIters, double eps,
                    const StepFn& step,
                    const std::function<void(size_t, double)>& onIter = {}) {
    KmResult r;
    r.centroids = std::move(centroids);
    for (size_t it = 0; it < maxIters; ++it) {
        std::vector<std::array<double, 3>> sums = step(r.centroids);
        double movement = 0;
        for (size_t j = 0; j < r.centroids.size(); ++j) {
            if (sums[j][2] <= 0) continue;
            Point2 nc{sums[j][0] / sums[j][2], sums[j][1] / sums[j][2]};
            double dx = nc[0] - r.centroids[j][0], dy = nc[1] - r.centroids[j][1];
            movement = std::max(movement, std::sqrt(dx * dx + dy * dy));
            r.centroids[j] = nc;
        }
        ++r.iterations;
        if (onIter) onIter(r.iterations, movement);
        if (movement < eps) {
            r.converged = true;
            break;
        }
    }
    return r;
}

inline std::vector<Point2> seedCentroids(const std::vector<Point2>& pts, size_t k) {
    if (pts.size() < k) throw std::runtime_error("fewer points than clusters");
    return {pts.begin(), pts.begin() + long(k)};
}

// Plain sequential reference: same assignment, same left-to-right summation
// order as the cluster run on a single-threaded configuration.
inline KmResult kmeansReference(const std::vector<Point2>& pts, size_t k, size_t maxIters,
                                double eps) {
    return kmeansLoop(seedCentroids(pts, k), maxIters, eps,
                      [&](const std::vector<Point2>& c) {
                          std::vector<std::array<double, 3>> sums(k, {0, 0, 0});
                          for (const auto& p : pts) {
                              auto& s = sums[nearestCentroid(p[0], p[1], c)];
                              s[0] += p[0];
                              s[1] += p[1];
                              s[2] += 1;
                          }
                          return sums;
                      });
}

inline pc::eng::MaterializedList pointSet(const std::vector<Point2>& pts, size_t pageSize,
                                          const std::string& column) {
    return pc::eng::build_object_set(
        pts.size(), pageSize,
        [&](size_t i) {
            auto h = pc::make_object<KmPoint>();
            h->x = pts[i][0];
            h->y = pts[i][1];
            h->cnt = 1;
            return pc::eng::as_any(h);
        },
        column);
}

// Every iteration re-registers the nearest-centroid key function (closing
// over the current centroids) and runs the per-cluster sum as a distributed
// aggregation over the scattered point set.
inline KmResult kmeansDistributed(const pc::dist::ClusterConfig& cfg,
                                  const std::vector<Point2>& pts, size_t k, size_t maxIters,
                                  double eps, pc::dist::DistMetrics* lastIter = nullptr,
                                  const std::function<void(size_t, double)>& onIter = {}) {
    using namespace pc;
    using namespace pc::lam;

    // placeholder registration so the graph compiles; each step re-registers
    // the real function over the current centroids
    register_native({"km_nearest", TypeTag::Int,
                     [](const std::vector<ScalarValue>&) -> ScalarValue { return int64_t(0); }});
    auto agg = make_aggregate(make_reader("db", "pts", "KMeans"),
                              make_lambda(0, "km_nearest"), make_lambda_from_self(0),
                              "KMeans");
    auto prog = compile_to_tcap(make_writer(agg, "db", "centroids", "W"));

    dist::SimCluster cl(cfg);
    cl.scatter("Inpts", pointSet(pts, cfg.pageSize, "pts"));

    auto step = [&](const std::vector<Point2>& c) {
        register_native({"km_nearest", TypeTag::Int,
                         [c](const std::vector<ScalarValue>& args) -> ScalarValue {
                             const auto& r = std::get<ObjRef>(args.at(0));
                             const auto* p = reinterpret_cast<const KmPoint*>(r.payload);
                             return int64_t(nearestCentroid(p->x, p->y, c));
                         }});
        dist::DistMetrics dm;
        auto res = dist::distributed_aggregate(cl, prog, &dm);
        if (lastIter) *lastIter = dm;
        std::vector<std::array<double, 3>> sums(k, {0, 0, 0});
        for (const auto& row : res.rows) {
            auto j = size_t(std::get<int64_t>(row[0]));
            const auto* p =
                reinterpret_cast<const KmPoint*>(std::get<ObjRef>(row[1]).payload);
            sums.at(j) = {p->x, p->y, double(p->cnt)};
        }
        return sums;
    };
    return kmeansLoop(seedCentroids(pts, k), maxIters, eps, step, onIter);
}

// -- block matrix multiply ---------------------------------------------------

// A square tile of a block-partitioned matrix; combine adds tiles, so the
// product aggregation keyed by (blockRow, blockCol) sums partial products.
struct MatrixBlock {
    int64_t blockRow = 0;
    int64_t blockCol = 0;
    int64_t dim = 0;
    pc::Member<pc::PVector<double>> values;  // dim*dim, row-major
};

}  // namespace demo

namespace pc {

template <>
struct PcType<demo::MatrixBlock> {
    static BehaviorDescriptor describe() {
        using demo::MatrixBlock;
        BehaviorDescriptor d;
        d.name = "demo.MatrixBlock";
        d.payloadSize = sizeof(MatrixBlock);
        d.forEachChild = [](std::byte* p, uint32_t, const ChildVisitor& v) {
            v(reinterpret_cast<MatrixBlock*>(p)->values.raw());
        };
        d.getMember = [](const std::byte* p, std::string_view a) -> FieldRef {
            const auto* b = reinterpret_cast<const MatrixBlock*>(p);
            if (a == "blockRow")
                return {reinterpret_cast<const std::byte*>(&b->blockRow), FieldTag::Int64};
            if (a == "blockCol")
                return {reinterpret_cast<const std::byte*>(&b->blockCol), FieldTag::Int64};
            if (a == "dim")
                return {reinterpret_cast<const std::byte*>(&b->dim), FieldTag::Int64};
            return {};
        };
        d.combine = [](std::byte* dst, const std::byte* src) {
            auto* a = reinterpret_cast<MatrixBlock*>(dst);
            const auto* b = reinterpret_cast<const MatrixBlock*>(src);
            auto* av = a->values.get();
            const auto* bv = b->values.get();
            for (uint64_t i = 0; i < av->size(); ++i) (*av)[i] += (*bv)[i];
        };
        return d;
    }
};

}  // namespace pc

namespace demo {

struct Dense {
    size_t n = 0;
    std::vector<double> a;  // row-major n*n

    double& at(size_t r, size_t c) { return a[r * n + c]; }
    double at(size_t r, size_t c) const { return a[r * n + c]; }
};

inline Dense denseZero(size_t n) { return {n, std::vector<double>(n * n, 0.0)}; }

inline Dense denseIdentity(size_t n) {
    Dense m = denseZero(n);
    for (size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
}

inline Dense denseRandom(size_t n, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Dense m = denseZero(n);
    for (auto& v : m.a) v = u(rng);
    return m;
}

inline Dense denseMul(const Dense& A, const Dense& B) {
    Dense C = denseZero(A.n);
    for (size_t i = 0; i < A.n; ++i)
        for (size_t k = 0; k < A.n; ++k) {
            double aik = A.at(i, k);
            for (size_t j = 0; j < A.n; ++j) C.at(i, j) += aik * B.at(k, j);
        }
    return C;
}

inline double maxAbsDiff(const Dense& A, const Dense& B) {
    double m = 0;
    for (size_t i = 0; i < A.a.size(); ++i) m = std::max(m, std::abs(A.a[i] - B.a[i]));
    return m;
}

// Tiles an n x n matrix into (n/blockDim)^2 MatrixBlock objects.
inline pc::eng::MaterializedList blockSet(const Dense& m, size_t blockDim, size_t pageSize,
                                          const std::string& column) {
    if (m.n % blockDim != 0) throw std::runtime_error("matrix size not divisible by block");
    size_t nb = m.n / blockDim;
    return pc::eng::build_object_set(
        nb * nb, pageSize,
        [&](size_t i) {
            size_t br = i / nb, bc = i % nb;
            auto h = pc::make_object<MatrixBlock>();
            h->blockRow = int64_t(br);
            h->blockCol = int64_t(bc);
            h->dim = int64_t(blockDim);
            auto vals = pc::make_object<pc::PVector<double>>();
            for (size_t r = 0; r < blockDim; ++r)
                for (size_t c = 0; c < blockDim; ++c)
                    vals->push_back(m.at(br * blockDim + r, bc * blockDim + c));
            h->values = vals;
            return pc::eng::as_any(h);
        },
        column);
}

// A*B as two cluster jobs: a hash-partition join on A.blockCol == B.blockRow,
// a local tile multiply of each matched pair, then a distributed aggregation
// keyed by the output tile position whose combine sums partial products.
inline Dense matmulDistributed(const pc::dist::ClusterConfig& cfg, const Dense& A,
                               const Dense& B, size_t blockDim,
                               pc::dist::DistMetrics* joinM = nullptr,
                               pc::dist::DistMetrics* aggM = nullptr) {
    using namespace pc;
    using namespace pc::lam;
    if (A.n != B.n) throw std::runtime_error("matrix sizes differ");

    auto ra = make_reader("db", "a", "MMJoin");
    auto rb = make_reader("db", "b", "MMJoin");
    auto eq = make_binary("==", make_lambda_from_member(0, "blockCol", TypeTag::Int),
                          make_lambda_from_member(1, "blockRow", TypeTag::Int));
    auto joinProg =
        compile_to_tcap(make_writer(make_join({ra, rb}, eq, "MMJoin"), "db", "pairs", "W"));

    dist::SimCluster cl(cfg);
    cl.scatter("Ina", blockSet(A, blockDim, cfg.pageSize, "a"));
    cl.scatter("Inb", blockSet(B, blockDim, cfg.pageSize, "b"));
    auto pairs = dist::hash_partition_join(cl, joinProg, joinM);

    auto products = eng::build_object_set(
        pairs.rows.size(), cfg.pageSize,
        [&](size_t i) {
            const auto* l = reinterpret_cast<const MatrixBlock*>(
                std::get<ObjRef>(pairs.rows[i][0]).payload);
            const auto* r = reinterpret_cast<const MatrixBlock*>(
                std::get<ObjRef>(pairs.rows[i][1]).payload);
            auto d = size_t(l->dim);
            auto h = make_object<MatrixBlock>();
            h->blockRow = l->blockRow;
            h->blockCol = r->blockCol;
            h->dim = int64_t(d);
            auto vals = make_object<PVector<double>>();
            const auto* lv = l->values.get();
            const auto* rv = r->values.get();
            std::vector<double> out(d * d, 0.0);
            for (size_t x = 0; x < d; ++x)
                for (size_t k = 0; k < d; ++k) {
                    double v = (*lv)[x * d + k];
                    for (size_t y = 0; y < d; ++y) out[x * d + y] += v * (*rv)[k * d + y];
                }
            for (double v : out) vals->push_back(v);
            h->values = vals;
            return eng::as_any(h);
        },
        "p");

    register_native({"mm_key", TypeTag::Int,
                     [](const std::vector<ScalarValue>& args) -> ScalarValue {
                         const auto* b = reinterpret_cast<const MatrixBlock*>(
                             std::get<ObjRef>(args.at(0)).payload);
                         return b->blockRow * 4096 + b->blockCol;
                     }});
    auto agg = make_aggregate(make_reader("db", "p", "MMAgg"), make_lambda(0, "mm_key"),
                              make_lambda_from_self(0), "MMAgg");
    auto aggProg = compile_to_tcap(make_writer(agg, "db", "c", "W"));
    cl.scatter("Inp", products);
    auto res = dist::distributed_aggregate(cl, aggProg, aggM);

    Dense C = denseZero(A.n);
    for (const auto& row : res.rows) {
        const auto* b =
            reinterpret_cast<const MatrixBlock*>(std::get<ObjRef>(row[1]).payload);
        auto d = size_t(b->dim);
        const auto* v = b->values.get();
        for (size_t r = 0; r < d; ++r)
            for (size_t c = 0; c < d; ++c)
                C.at(size_t(b->blockRow) * d + r, size_t(b->blockCol) * d + c) =
                    (*v)[r * d + c];
    }
    return C;
}

// -- three-way join demo records ---------------------------------------------

struct Rec {
    int64_t id = 0;
    int64_t key = 0;
    double val = 0;
};

}  // namespace demo

namespace pc {

template <>
struct PcType<demo::Rec> {
    static BehaviorDescriptor describe() {
        using demo::Rec;
        BehaviorDescriptor d;
        d.name = "demo.Rec";
        d.payloadSize = sizeof(Rec);
        d.getMember = [](const std::byte* p, std::string_view a) -> FieldRef {
            const auto* r = reinterpret_cast<const Rec*>(p);
            if (a == "id") return {reinterpret_cast<const std::byte*>(&r->id), FieldTag::Int64};
            if (a == "key")
                return {reinterpret_cast<const std::byte*>(&r->key), FieldTag::Int64};
            if (a == "val")
                return {reinterpret_cast<const std::byte*>(&r->val), FieldTag::Double};
            return {};
        };
        return d;
    }
};

}  // namespace pc

namespace demo {

struct HostRec {
    int64_t id;
    int64_t key;
    double val;
};

inline std::vector<HostRec> hostRecs(size_t n, size_t keyRange, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 100.0);
    std::vector<HostRec> out;
    out.reserve(n);
    for (size_t i = 0; i < n; ++i)
        out.push_back({int64_t(i), int64_t(rng() % keyRange), u(rng)});
    return out;
}

inline pc::eng::MaterializedList recSet(const std::vector<HostRec>& host, size_t pageSize,
                                        const std::string& column) {
    return pc::eng::build_object_set(
        host.size(), pageSize,
        [&](size_t i) {
            auto h = pc::make_object<Rec>();
            h->id = host[i].id;
            h->key = host[i].key;
            h->val = host[i].val;
            return pc::eng::as_any(h);
        },
        column);
}

inline pc::tcap::Program threeWayJoinProgram() {
    using namespace pc::lam;
    auto rr = make_reader("db", "r", "J3");
    auto rs = make_reader("db", "s", "J3");
    auto rt = make_reader("db", "t", "J3");
    auto e1 = make_binary("==", make_lambda_from_member(0, "key", TypeTag::Int),
                          make_lambda_from_member(1, "key", TypeTag::Int));
    auto e2 = make_binary("==", make_lambda_from_member(1, "key", TypeTag::Int),
                          make_lambda_from_member(2, "key", TypeTag::Int));
    return compile_to_tcap(make_writer(
        make_join({rr, rs, rt}, make_binary("&&", e1, e2), "J3"), "db", "out", "W"));
}

// -- filter bench kernels ----------------------------------------------------

struct BenchOutcome {
    uint64_t matches = 0;
    int64_t checksum = 0;
    double seconds = 0;
};

inline std::vector<int64_t> benchValues(size_t n, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<int64_t> v(n);
    for (auto& x : v) x = int64_t(rng() % 1000000);
    return v;
}

// Tight chunked loop over the column: the branch-free form the stage
// evaluator reduces to for a range filter.
inline BenchOutcome benchVectorizedFilter(const std::vector<int64_t>& v, int64_t lo,
                                          int64_t hi) {
    auto t0 = std::chrono::steady_clock::now();
    BenchOutcome out;
    constexpr size_t kChunk = 1024;
    for (size_t base = 0; base < v.size(); base += kChunk) {
        size_t end = std::min(v.size(), base + kChunk);
        uint64_t m = 0;
        int64_t s = 0;
        for (size_t i = base; i < end; ++i) {
            int64_t keep = (v[i] > lo) & (v[i] < hi);
            m += uint64_t(keep);
            s += keep * v[i];
        }
        out.matches += m;
        out.checksum += s;
    }
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

// The deliberately slow baseline: an expression tree interpreted row by row
// with a virtual call per node.
namespace bench {

struct Expr {
    virtual ~Expr() = default;
    virtual int64_t eval(const int64_t& row) const = 0;
};

struct Var : Expr {
    int64_t eval(const int64_t& row) const override { return row; }
};

struct Const : Expr {
    int64_t v;
    explicit Const(int64_t x) : v(x) {}
    int64_t eval(const int64_t&) const override { return v; }
};

struct Binary : Expr {
    char op;
    std::unique_ptr<Expr> l, r;
    Binary(char o, std::unique_ptr<Expr> a, std::unique_ptr<Expr> b)
        : op(o), l(std::move(a)), r(std::move(b)) {}
    int64_t eval(const int64_t& row) const override {
        int64_t a = l->eval(row), b = r->eval(row);
        switch (op) {
            case '>': return a > b;
            case '<': return a < b;
            case '&': return (a != 0) && (b != 0);
            default: return 0;
        }
    }
};

}  // namespace bench

inline BenchOutcome benchVirtualFilter(const std::vector<int64_t>& v, int64_t lo, int64_t hi) {
    using namespace bench;
    std::unique_ptr<Expr> pred = std::make_unique<Binary>(
        '&',
        std::make_unique<Binary>('>', std::make_unique<Var>(), std::make_unique<Const>(lo)),
        std::make_unique<Binary>('<', std::make_unique<Var>(), std::make_unique<Const>(hi)));
    auto t0 = std::chrono::steady_clock::now();
    BenchOutcome out;
    for (const auto& row : v) {
        if (pred->eval(row)) {
            ++out.matches;
            out.checksum += row;
        }
    }
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

}  // namespace demo

#endif
