#ifndef PC_DISTRIBUTED_HPP
#define PC_DISTRIBUTED_HPP

// Simulated multi-node execution: job-stage planning over the pipeline
// decomposition, a pipelined/partitioned aggregation with combining threads,
// and hash-partition / broadcast joins.  Nodes exchange frozen pages through
// the block wire format, so shuffles move bytes, never live pointers.

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "pc/engine.hpp"

namespace pc::dist {

class ConfigError : public PcError {
public:
    explicit ConfigError(const std::string& msg) : PcError(msg) {}
};

struct ClusterConfig {
    size_t nodes = 1;
    size_t producerThreads = 0;      // pipelining threads per node (N); 0 = cores
    size_t combinerThreads = 2;      // combining threads per node (K)
    size_t partitionsPerNode = 2;    // aggregation partitions per node (M)
    size_t pageSize = 1 << 20;
    uint64_t broadcastThresholdBytes = 2ULL << 30;
    bool compression = false;

    size_t partitions() const { return partitionsPerNode * nodes; }
};

// key=value lines: nodes, N, K, M, pageSizeBytes, broadcastThresholdBytes,
// compression (on|off).  '#' starts a comment.  Unknown keys are errors.
ClusterConfig parse_cluster_config(const std::string& text);
ClusterConfig load_cluster_config(const std::string& path);

// -- page compression --------------------------------------------------------

// Byte-level run-length coding ("RLE1" header + original length).
std::vector<std::byte> rle_compress(const std::vector<std::byte>& in);
std::vector<std::byte> rle_decompress(const std::vector<std::byte>& in);

// -- the simulated cluster ---------------------------------------------------

struct ShuffleRecord {
    size_t from = 0;
    size_t to = 0;
    std::string tag;
    size_t bytes = 0;  // wire bytes (after compression, if enabled)
};

class SimCluster {
public:
    explicit SimCluster(ClusterConfig cfg);

    const ClusterConfig& config() const { return cfg_; }
    size_t nodeCount() const { return cfg_.nodes; }
    size_t partitions() const { return cfg_.partitions(); }
    size_t homeNode(size_t partition) const { return partition / cfg_.partitionsPerNode; }

    // Deep-copies rows of a single-object-column list round-robin onto fresh
    // per-node pages (row i lands on node i % nodes).
    void scatter(const std::string& list, const eng::MaterializedList& data);

    std::map<std::string, eng::MaterializedList>& storage(size_t node);
    uint64_t storedBytes(const std::string& list) const;  // page high-water sum

    // Exports the block and places the bytes in `to`'s inbox (thread-safe).
    void send(size_t from, size_t to, const std::string& tag, const BlockPtr& block);
    // Imports and removes every inbox entry with this tag (thread-safe).
    std::vector<BlockPtr> drain(size_t node, const std::string& tag);

    uint64_t pagesSent() const { return pagesSent_; }
    uint64_t pagesDelivered() const { return pagesDelivered_; }
    std::vector<ShuffleRecord> ledger() const;

private:
    struct Node {
        std::map<std::string, eng::MaterializedList> storage;
        std::mutex mu;
        std::vector<std::pair<std::string, std::vector<std::byte>>> inbox;
    };

    ClusterConfig cfg_;
    std::vector<std::unique_ptr<Node>> nodes_;
    mutable std::mutex mu_;
    std::vector<ShuffleRecord> ledger_;
    uint64_t pagesSent_ = 0;
    uint64_t pagesDelivered_ = 0;
};

// -- job-stage planning ------------------------------------------------------

enum class StageKind { Pipeline, Aggregation, BuildHashTable };

struct JobStage {
    StageKind kind = StageKind::Pipeline;
    std::string name;
    std::vector<int> stmts;  // statement indices run inside this stage
    std::string inputList;
    std::string outputList;
};

// Splits the pipeline decomposition into shippable job stages: a selection is
// one pipeline stage; an aggregation adds an aggregation stage (a trailing
// OUTPUT-only pipeline folds into it); each join side becomes a repartition
// pipeline plus a build or probe stage.
std::vector<JobStage> plan_stages(const tcap::Program& p);

// -- distributed operators ---------------------------------------------------

struct DistMetrics {
    uint64_t producerPages = 0;  // multi-partition pages flushed by producers
    uint64_t combinerPages = 0;  // per-partition pages shipped by combiners
    uint64_t shuffledPages = 0;
    uint64_t shuffledBytes = 0;
    uint64_t importFixups = 0;   // pointer fixups during the run (0 expected)
    uint64_t resultRows = 0;
    bool broadcast = false;

    std::string report() const;  // "key=value" lines
};

// Runs an aggregation program over the cluster: per node, N producer threads
// fill vector-of-partition-map pages and pass full pages zero-copy to K
// combining threads; combiner pages shuffle to each partition's home node,
// where M aggregation threads fold them into final maps.
eng::MaterializedList distributed_aggregate(SimCluster& cl, const tcap::Program& p,
                                            DistMetrics* metricsOut = nullptr);

struct JoinPlan {
    bool broadcast = false;
    size_t jobStages = 0;
    std::vector<std::string> buildLists;
    std::string probeList;
};

// Repartition unless every build side together fits under the broadcast
// threshold, in which case build pages replicate and probes stay local.
JoinPlan plan_join(const SimCluster& cl, const tcap::Program& p);

// Executes a join program (shared-key equi-join chains ending in OUTPUT)
// using the plan above; returns the union of per-node results.
eng::MaterializedList hash_partition_join(SimCluster& cl, const tcap::Program& p,
                                          DistMetrics* metricsOut = nullptr);

}  // namespace pc::dist

#endif
