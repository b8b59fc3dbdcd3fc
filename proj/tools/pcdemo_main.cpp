// pcdemo: end-to-end demos on the simulated cluster.
//   kmeans  - Lloyd iterations as repeated distributed aggregations
//   join3   - three-way hash-partition join checked against nested loops
//   matmul  - block matrix multiply as join + aggregation
// Exit 1 when a demo fails its own check (k-means non-convergence, result
// mismatch); exit 2 on I/O trouble.

#include <cstdio>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "demo_support.hpp"

namespace {

// Deterministic default: one node, one producer, one combiner, one partition.
pc::dist::ClusterConfig demoConfig(const std::string& configPath) {
    pc::dist::ClusterConfig cfg;
    cfg.producerThreads = 1;
    cfg.combinerThreads = 1;
    cfg.partitionsPerNode = 1;
    if (!configPath.empty()) cfg = pc::dist::load_cluster_config(configPath);
    return cfg;
}

void printMetrics(const std::string& prefix, const pc::dist::DistMetrics& dm) {
    std::istringstream in(dm.report());
    std::string line;
    while (std::getline(in, line)) std::cout << prefix << line << "\n";
}

int runKmeans(const pc::dist::ClusterConfig& cfg, uint64_t seed, size_t maxIters, double eps,
              bool trace) {
    const size_t n = 10000, k = 2;
    auto pts = demo::blobPoints(n, seed);
    pc::dist::DistMetrics dm;
    auto onIter = [&](size_t it, double movement) {
        if (trace) std::cerr << "iter " << it << " movement " << movement << "\n";
    };
    auto r = demo::kmeansDistributed(cfg, pts, k, maxIters, eps, &dm, onIter);
    std::cout << "points=" << n << "\nclusters=" << k << "\niterations=" << r.iterations
              << "\nconverged=" << (r.converged ? 1 : 0) << "\n";
    for (size_t j = 0; j < r.centroids.size(); ++j)
        std::printf("centroid_%zu=%.6f,%.6f\n", j, r.centroids[j][0], r.centroids[j][1]);
    printMetrics("last_iter_", dm);
    return r.converged ? 0 : 1;
}

int runJoin3(const pc::dist::ClusterConfig& cfg, uint64_t seed) {
    auto hr = demo::hostRecs(120, 12, seed);
    auto hs = demo::hostRecs(100, 12, seed + 1);
    auto ht = demo::hostRecs(80, 12, seed + 2);
    auto prog = demo::threeWayJoinProgram();

    pc::dist::SimCluster cl(cfg);
    cl.scatter("Inr", demo::recSet(hr, cfg.pageSize, "r"));
    cl.scatter("Ins", demo::recSet(hs, cfg.pageSize, "s"));
    cl.scatter("Int", demo::recSet(ht, cfg.pageSize, "t"));

    auto jp = pc::dist::plan_join(cl, prog);
    pc::dist::DistMetrics dm;
    auto res = pc::dist::hash_partition_join(cl, prog, &dm);

    size_t want = 0;
    for (const auto& x : hr)
        for (const auto& y : hs)
            for (const auto& z : ht)
                if (x.key == y.key && y.key == z.key) ++want;

    std::cout << "plan=" << (jp.broadcast ? "broadcast" : "repartition")
              << "\njob_stages=" << jp.jobStages << "\nrows=" << res.rows.size()
              << "\nexpected_rows=" << want
              << "\nmatch=" << (res.rows.size() == want ? 1 : 0) << "\n";
    printMetrics("", dm);
    return res.rows.size() == want ? 0 : 1;
}

int runMatmul(const pc::dist::ClusterConfig& cfg, uint64_t seed) {
    const size_t n = 8, blockDim = 4;
    auto A = demo::denseRandom(n, seed);

    pc::dist::DistMetrics jm, am;
    auto CI = demo::matmulDistributed(cfg, A, demo::denseIdentity(n), blockDim);
    double diffIdentity = demo::maxAbsDiff(CI, A);

    auto B = demo::denseRandom(n, seed + 1);
    auto C = demo::matmulDistributed(cfg, A, B, blockDim, &jm, &am);
    double diffRandom = demo::maxAbsDiff(C, demo::denseMul(A, B));

    std::cout << "size=" << n << "\nblock=" << blockDim << "\n";
    std::printf("max_abs_diff_identity=%.3e\nmax_abs_diff_random=%.3e\n", diffIdentity,
                diffRandom);
    printMetrics("join_", jm);
    printMetrics("agg_", am);
    bool ok = diffIdentity == 0.0 && diffRandom < 1e-12;
    std::cout << "match=" << (ok ? 1 : 0) << "\n";
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"simulated-cluster demos"};
    app.require_subcommand(1);

    std::string configPath;
    uint64_t seed = 1234;
    size_t chunkSize = 1024;
    size_t pageSize = 1 << 20;
    size_t maxIters = 50;
    double eps = 1e-6;
    bool trace = false;

    app.add_option("--config", configPath, "cluster config file");
    app.add_option("--seed", seed, "data generation seed");
    app.add_option("--chunk-size", chunkSize, "rows per evaluation chunk");
    auto* pageOpt = app.add_option("--page-size", pageSize, "block page size in bytes");
    app.add_flag("--trace", trace, "per-iteration progress on stderr");

    auto* km = app.add_subcommand("kmeans", "cluster two Gaussian blobs");
    km->add_option("--max-iters", maxIters, "iteration cap");
    km->add_option("--epsilon", eps, "convergence threshold on centroid movement");
    auto* j3 = app.add_subcommand("join3", "three-way equi-join");
    auto* mm = app.add_subcommand("matmul", "block matrix multiply");

    CLI11_PARSE(app, argc, argv);

    try {
        auto cfg = demoConfig(configPath);
        if (pageOpt->count() > 0) cfg.pageSize = pageSize;
        if (km->parsed()) return runKmeans(cfg, seed, maxIters, eps, trace);
        if (j3->parsed()) return runJoin3(cfg, seed);
        if (mm->parsed()) return runMatmul(cfg, seed);
    } catch (const std::ios_base::failure& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return 1;
    }
    return 0;
}
