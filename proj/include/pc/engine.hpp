#ifndef PC_ENGINE_HPP
#define PC_ENGINE_HPP

// Vectorized single-node executor: pipeline decomposition of a TCAP DAG,
// vector-list stage evaluation, in-place sink allocation on live output
// pages, and zombie-page accounting.

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "pc/containers.hpp"
#include "pc/object_model.hpp"
#include "pc/tcap.hpp"

namespace pc::eng {

class StageTypeError : public PcError {
public:
    explicit StageTypeError(const std::string& msg) : PcError(msg) {}
};

class PipelineAborted : public PcError {
public:
    explicit PipelineAborted(const std::string& msg) : PcError(msg) {}
};

// -- columns and vector lists -----------------------------------------------

// A column is either materialized cells or raw references into pinned pages
// (member reads allocate nothing; consumers dereference lazily).
struct Column {
    std::variant<std::vector<ScalarValue>, std::vector<FieldRef>> data =
        std::vector<ScalarValue>{};

    bool raw() const { return data.index() == 1; }
    size_t size() const;
    ScalarValue at(size_t i) const;  // dereferences FieldRefs on demand
    void append(ScalarValue v);
    void appendRaw(FieldRef f);
};

ScalarValue deref_field(const FieldRef& f);
uint64_t hash_cell(const ScalarValue& v);
bool cell_equals(const ScalarValue& a, const ScalarValue& b);
bool cell_truthy(const ScalarValue& v);

struct VectorList {
    std::vector<std::pair<std::string, Column>> cols;
    size_t length = 0;

    const Column* find(const std::string& name) const;
    Column* find(const std::string& name);
};

// -- materialized lists ------------------------------------------------------

// A named, fully materialized vector list: host-side rows for oracle-friendly
// access plus the backing pages that keep ObjRef cells alive.
struct MaterializedList {
    std::vector<std::string> columns;
    std::vector<std::vector<ScalarValue>> rows;
    std::vector<BlockPtr> pages;
};

// Erase a handle's static type (addref semantics of a normal handle copy).
template <class T>
Handle<AnyObject> as_any(const Handle<T>& h) {
    Handle<AnyObject> out;
    detail::copyConstructStored(const_cast<StoredHandle&>(out.stored()), h.stored());
    return out;
}

// Builds a frozen single-column object set: makeRow(i) constructs row i on
// the current active block and returns its handle; pages rotate on
// OutOfBlockMemory (row-level retry).
MaterializedList build_object_set(size_t rowCount, size_t pageSize,
                                  const std::function<Handle<AnyObject>(size_t)>& makeRow,
                                  const std::string& column = "obj");

// Re-derives the host view of a set of pages each rooted at a
// PVector<Handle<AnyObject>> (used after import on the receiving side).
MaterializedList scan_object_pages(std::vector<BlockPtr> pages,
                                   const std::string& column = "obj");

// -- pipelines ---------------------------------------------------------------

enum class SinkKind { Output, Aggregation, JoinBuild, Materialize };

struct Pipeline {
    std::string inputList;    // source or materialized upstream list
    std::vector<int> stmts;   // statement indices, in program order
    SinkKind sink = SinkKind::Materialize;
    int sinkStmt = -1;        // OUTPUT/AGGREGATE/JOIN statement index
    int buildSide = -1;       // JoinBuild: 0 = left pair, 1 = right pair
};

// Boundaries at AGGREGATE, OUTPUT, join build sides, and multi-consumer
// statements; result ordered so producers precede consumers.
std::vector<Pipeline> decompose(const tcap::Program& p);

// -- execution ---------------------------------------------------------------

struct EngineConfig {
    size_t chunkSize = 1024;
    size_t pageSize = 1 << 20;
};

struct PipelineMetrics {
    uint64_t rowsIn = 0;
    uint64_t rowsOut = 0;
    uint64_t pagesOut = 0;
    uint64_t zombieHighWater = 0;
    uint64_t allocRetries = 0;
};

struct RunMetrics {
    std::vector<std::pair<std::string, PipelineMetrics>> pipelines;
    uint64_t deepCopies = 0;
    uint64_t allocFaults = 0;

    uint64_t maxZombies() const;
    std::string report() const;  // "key=value" lines
};

// Build a VectorList over rows [begin, end) of a materialized list.
VectorList chunk_of(const MaterializedList& src, size_t begin, size_t end);

// Evaluate mid-pipeline statements (APPLY/FILTER/HASH) over one chunk;
// used by the simulated cluster to run pipeline prefixes on worker threads.
VectorList eval_statements(const tcap::Program& p, const std::vector<int>& stmts,
                           VectorList chunk);

class Executor {
public:
    explicit Executor(EngineConfig cfg = {}) : cfg_(cfg) {}

    // Bind an input set to a TCAP source list name.
    void bindSource(const std::string& list, MaterializedList data);

    // Runs the whole program; returns one materialized list per OUTPUT
    // statement, keyed "db.set".
    std::map<std::string, MaterializedList> run(const tcap::Program& p);

    const RunMetrics& metrics() const { return metrics_; }

private:
    EngineConfig cfg_;
    std::map<std::string, MaterializedList> sets_;  // sources + materialized
    RunMetrics metrics_;
};

// Convenience: bind sources, run, return outputs.
std::map<std::string, MaterializedList> execute(
    const tcap::Program& p, const std::map<std::string, MaterializedList>& sources,
    EngineConfig cfg = {}, RunMetrics* metricsOut = nullptr);

}  // namespace pc::eng

#endif
