#include "pc/distributed.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>
#include <unordered_map>

#include "pc/detail/map_sink.hpp"

namespace pc::dist {

using eng::Column;
using eng::MaterializedList;
using eng::Pipeline;
using eng::SinkKind;
using eng::VectorList;
using tcap::OpKind;

// ---------------------------------------------------------------------------
// config

ClusterConfig parse_cluster_config(const std::string& text) {
    ClusterConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineNo = 0;
    auto fail = [&](const std::string& why) {
        throw ConfigError("config line " + std::to_string(lineNo) + ": " + why);
    };
    while (std::getline(in, line)) {
        ++lineNo;
        if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
        size_t a = line.find_first_not_of(" \t\r");
        if (a == std::string::npos) continue;
        size_t b = line.find_last_not_of(" \t\r");
        line = line.substr(a, b - a + 1);
        size_t eq = line.find('=');
        if (eq == std::string::npos) fail("expected key=value");
        auto trim = [](std::string s) {
            size_t x = s.find_first_not_of(" \t");
            if (x == std::string::npos) return std::string();
            size_t y = s.find_last_not_of(" \t");
            return s.substr(x, y - x + 1);
        };
        std::string key = trim(line.substr(0, eq));
        std::string val = trim(line.substr(eq + 1));
        auto num = [&]() -> uint64_t {
            try {
                size_t used = 0;
                uint64_t v = std::stoull(val, &used);
                if (used != val.size()) throw std::invalid_argument(val);
                return v;
            } catch (const std::exception&) {
                fail("bad number '" + val + "'");
                return 0;  // unreachable
            }
        };
        if (key == "nodes") cfg.nodes = size_t(num());
        else if (key == "N") cfg.producerThreads = size_t(num());
        else if (key == "K") cfg.combinerThreads = size_t(num());
        else if (key == "M") cfg.partitionsPerNode = size_t(num());
        else if (key == "pageSizeBytes") cfg.pageSize = size_t(num());
        else if (key == "broadcastThresholdBytes") cfg.broadcastThresholdBytes = num();
        else if (key == "compression") {
            if (val == "on") cfg.compression = true;
            else if (val == "off") cfg.compression = false;
            else fail("compression must be on|off");
        } else {
            fail("unknown key '" + key + "'");
        }
    }
    if (cfg.nodes == 0 || cfg.combinerThreads == 0 || cfg.partitionsPerNode == 0)
        throw ConfigError("nodes, K and M must be positive");
    return cfg;
}

ClusterConfig load_cluster_config(const std::string& path) {
    std::ifstream in(path);
    if (!in.good()) throw ConfigError("cannot read config file " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return parse_cluster_config(os.str());
}

// ---------------------------------------------------------------------------
// RLE page codec: "RLE1" | u64 original length | (u8 runLen, byte)*

std::vector<std::byte> rle_compress(const std::vector<std::byte>& in) {
    std::vector<std::byte> out;
    out.reserve(16 + in.size() / 4);
    const char magic[4] = {'R', 'L', 'E', '1'};
    for (char c : magic) out.push_back(std::byte(c));
    uint64_t n = in.size();
    for (int i = 0; i < 8; ++i) out.push_back(std::byte((n >> (8 * i)) & 0xff));
    size_t i = 0;
    while (i < in.size()) {
        size_t run = 1;
        while (run < 255 && i + run < in.size() && in[i + run] == in[i]) ++run;
        out.push_back(std::byte(run));
        out.push_back(in[i]);
        i += run;
    }
    return out;
}

std::vector<std::byte> rle_decompress(const std::vector<std::byte>& in) {
    if (in.size() < 12 || char(in[0]) != 'R' || char(in[1]) != 'L' || char(in[2]) != 'E' ||
        char(in[3]) != '1')
        throw CorruptBlock("bad RLE header");
    uint64_t n = 0;
    for (int i = 0; i < 8; ++i) n |= uint64_t(in[size_t(4 + i)]) << (8 * i);
    std::vector<std::byte> out;
    out.reserve(n);
    for (size_t i = 12; i < in.size(); i += 2) {
        if (i + 1 >= in.size()) throw CorruptBlock("truncated RLE run");
        size_t run = size_t(in[i]);
        out.insert(out.end(), run, in[i + 1]);
    }
    if (out.size() != n) throw CorruptBlock("RLE length mismatch");
    return out;
}

// ---------------------------------------------------------------------------
// SimCluster

SimCluster::SimCluster(ClusterConfig cfg) : cfg_(cfg) {
    if (cfg_.nodes == 0) throw ConfigError("cluster needs at least one node");
    if (cfg_.producerThreads == 0) {
        unsigned hw = std::thread::hardware_concurrency();
        cfg_.producerThreads = std::clamp<size_t>(hw ? hw : 1, 1, 8);
    }
    for (size_t i = 0; i < cfg_.nodes; ++i) nodes_.push_back(std::make_unique<Node>());
}

std::map<std::string, eng::MaterializedList>& SimCluster::storage(size_t node) {
    return nodes_.at(node)->storage;
}

void SimCluster::scatter(const std::string& list, const MaterializedList& data) {
    if (data.columns.size() != 1)
        throw PcError("scatter expects a single-object-column list");
    for (size_t n = 0; n < cfg_.nodes; ++n) {
        std::vector<ObjRef> mine;
        for (size_t i = n; i < data.rows.size(); i += cfg_.nodes) {
            const ScalarValue& c = data.rows[i][0];
            if (c.index() != 6) throw PcError("scatter expects object cells");
            mine.push_back(std::get<ObjRef>(c));
        }
        auto ml = eng::build_object_set(
            mine.size(), cfg_.pageSize,
            [&](size_t i) { return eng::detail::handleOf(mine[i]); }, data.columns[0]);
        nodes_[n]->storage[list] = std::move(ml);
    }
}

uint64_t SimCluster::storedBytes(const std::string& list) const {
    uint64_t total = 0;
    for (const auto& node : nodes_) {
        auto it = node->storage.find(list);
        if (it == node->storage.end()) continue;
        for (const auto& pg : it->second.pages) total += pg->highWater();
    }
    return total;
}

void SimCluster::send(size_t from, size_t to, const std::string& tag, const BlockPtr& block) {
    std::vector<std::byte> bytes = export_block(*block);
    if (cfg_.compression) bytes = rle_compress(bytes);
    {
        std::lock_guard<std::mutex> lk(mu_);
        ledger_.push_back({from, to, tag, bytes.size()});
        ++pagesSent_;
    }
    Node& n = *nodes_.at(to);
    std::lock_guard<std::mutex> lk(n.mu);
    n.inbox.emplace_back(tag, std::move(bytes));
}

std::vector<BlockPtr> SimCluster::drain(size_t node, const std::string& tag) {
    Node& n = *nodes_.at(node);
    std::vector<std::vector<std::byte>> taken;
    {
        std::lock_guard<std::mutex> lk(n.mu);
        auto it = n.inbox.begin();
        while (it != n.inbox.end()) {
            if (it->first == tag) {
                taken.push_back(std::move(it->second));
                it = n.inbox.erase(it);
            } else {
                ++it;
            }
        }
    }
    std::vector<BlockPtr> out;
    for (auto& bytes : taken) {
        if (cfg_.compression) bytes = rle_decompress(bytes);
        out.push_back(import_block(bytes));
    }
    {
        std::lock_guard<std::mutex> lk(mu_);
        pagesDelivered_ += out.size();
    }
    return out;
}

std::vector<ShuffleRecord> SimCluster::ledger() const {
    std::lock_guard<std::mutex> lk(mu_);
    return ledger_;
}

// ---------------------------------------------------------------------------
// job-stage planning

std::vector<JobStage> plan_stages(const tcap::Program& p) {
    auto pipes = eng::decompose(p);
    std::vector<JobStage> out;
    std::map<std::string, size_t> aggStage;  // aggregate output -> stage index

    for (const auto& pl : pipes) {
        const tcap::Statement& last = p.statements[size_t(pl.stmts.back())];
        if (pl.sink == SinkKind::Aggregation) {
            std::string aggName = last.outputName;
            std::vector<int> prefix(pl.stmts.begin(), pl.stmts.end() - 1);
            out.push_back({StageKind::Pipeline, "pipeline:" + pl.inputList + "->" + aggName,
                           prefix, pl.inputList, aggName});
            aggStage[aggName] = out.size();
            out.push_back({StageKind::Aggregation, "aggregation:" + aggName, {pl.sinkStmt},
                           aggName, aggName});
            continue;
        }
        if (pl.sink == SinkKind::JoinBuild) {
            std::string hashList = last.outputName;
            out.push_back({StageKind::Pipeline, "repartition:" + pl.inputList + "->" + hashList,
                           pl.stmts, pl.inputList, hashList});
            out.push_back({StageKind::BuildHashTable, "build:" + hashList, {}, hashList,
                           hashList});
            continue;
        }
        // Output / Materialize pipelines
        size_t firstJoin = pl.stmts.size();
        for (size_t i = 0; i < pl.stmts.size(); ++i) {
            if (p.statements[size_t(pl.stmts[i])].op == OpKind::Join) {
                firstJoin = i;
                break;
            }
        }
        if (firstJoin < pl.stmts.size()) {
            std::vector<int> pre(pl.stmts.begin(), pl.stmts.begin() + long(firstJoin));
            std::vector<int> rest(pl.stmts.begin() + long(firstJoin), pl.stmts.end());
            std::string mid =
                pre.empty() ? pl.inputList : p.statements[size_t(pre.back())].outputName;
            out.push_back({StageKind::Pipeline, "repartition:" + pl.inputList + "->" + mid, pre,
                           pl.inputList, mid});
            out.push_back({StageKind::Pipeline, "probe:" + mid + "->" + last.outputName, rest,
                           mid, last.outputName});
            continue;
        }
        // a lone OUTPUT reading an aggregate folds into the aggregation stage
        if (pl.stmts.size() == 1 && last.op == OpKind::Output && aggStage.count(pl.inputList)) {
            JobStage& st = out[aggStage[pl.inputList]];
            st.stmts.push_back(pl.stmts[0]);
            st.outputList = last.db + "." + last.set;
            continue;
        }
        out.push_back({StageKind::Pipeline, "pipeline:" + pl.inputList + "->" + last.outputName,
                       pl.stmts, pl.inputList, last.outputName});
    }
    return out;
}

// ---------------------------------------------------------------------------
// shared cell helpers

namespace {

int64_t cellInt(const ScalarValue& v) {
    switch (v.index()) {
        case 1: return std::get<int64_t>(v);
        case 3: return std::get<bool>(v) ? 1 : 0;
        case 4: return int64_t(std::get<uint64_t>(v));
        default: throw eng::StageTypeError("expected an integer cell");
    }
}

double cellDouble(const ScalarValue& v) {
    if (v.index() == 2) return std::get<double>(v);
    return double(cellInt(v));
}

bool isStringCell(const ScalarValue& v) {
    if (v.index() == 5) return true;
    return v.index() == 6 && std::get<ObjRef>(v).typeCode == typeCodeOf<PString>();
}

std::string cellString(const ScalarValue& v) {
    if (v.index() == 5) return std::get<std::string>(v);
    const ObjRef& r = std::get<ObjRef>(v);
    return std::string(reinterpret_cast<const PString*>(r.payload)->view());
}

template <class V>
auto plusCombine() {
    if constexpr (std::is_same_v<V, Handle<AnyObject>>) {
        return [](Member<AnyObject>& slot, const Handle<AnyObject>& v) {
            eng::detail::combineObj(slot, v);
        };
    } else {
        return [](V a, V b) { return a + b; };
    }
}

// Zero-copy pointer queue between producing and combining threads.
struct PtrQueue {
    std::mutex mu;
    std::condition_variable cv;
    std::deque<BlockPtr> q;
    bool closed = false;

    void push(BlockPtr b) {
        {
            std::lock_guard<std::mutex> lk(mu);
            q.push_back(std::move(b));
        }
        cv.notify_one();
    }
    void close() {
        {
            std::lock_guard<std::mutex> lk(mu);
            closed = true;
        }
        cv.notify_all();
    }
    bool pop(BlockPtr& out) {
        std::unique_lock<std::mutex> lk(mu);
        cv.wait(lk, [&] { return closed || !q.empty(); });
        if (q.empty()) return false;
        out = std::move(q.front());
        q.pop_front();
        return true;
    }
};

// A page holding a vector of partition maps; full pages are flushed through
// the callback and a fresh page starts.  upsert failures rotate and retry
// once, so a single oversized entry still surfaces OutOfBlockMemory.
template <class K, class V>
struct VecMapSink {
    using MapT = PMap<K, V>;
    using RootT = PVector<Handle<MapT>>;

    size_t pageSize;
    size_t mapCount;
    std::function<void(BlockPtr)> flush;
    BlockPtr live;
    Handle<RootT> root;
    std::unordered_map<std::string, Handle<PString>> strKeys;  // per-page scratch

    void ensureLive() {
        if (live) return;
        live = make_block(pageSize);
        root = make_object<RootT>();
        set_block_root(*live, root);
        for (size_t i = 0; i < mapCount; ++i) root->push_back(make_object<MapT>());
    }

    MapT* mapAt(size_t i) { return root->elemPayload(uint64_t(i)); }

    void rotate() {
        freeze_block(live);
        flush(live);
        live = nullptr;
        root = Handle<RootT>{};
        strKeys.clear();
    }

    Handle<PString> internKey(const std::string& s) {
        auto it = strKeys.find(s);
        if (it != strKeys.end()) return it->second;
        auto h = make_string(s);
        strKeys.emplace(s, h);
        return h;
    }

    template <class KeyFn, class Combine>
    void add(size_t slot, const KeyFn& keyFn, const V& v, const Combine& combine) {
        for (int attempt = 0;; ++attempt) {
            try {
                ensureLive();
                mapAt(slot)->upsert(keyFn(), v, combine);
                return;
            } catch (const OutOfBlockMemory&) {
                if (attempt > 0) throw;
                rotate();
            }
        }
    }

    void finish() {
        if (live) rotate();
    }
};

// Adapts the per-partition MapSinkT to the slot-taking fold interface.
template <class K, class V>
struct SlotlessSink {
    eng::detail::MapSinkT<K, V>& s;
    Handle<PString> internKey(const std::string& k) { return s.internKey(k); }
    template <class KeyFn, class Combine>
    void add(size_t, const KeyFn& kf, const V& v, const Combine& c) {
        s.add(kf, v, c);
    }
};

// Folds every entry of a stored map into a sink slot, re-interning string
// keys and re-wrapping handle values for the sink's block.
template <class K, class V, class Sink>
void foldMap(const PMap<K, V>& src, Sink& sink, size_t slot) {
    src.forEach([&](const auto& sk, const auto& sv) {
        auto keyFn = [&]() -> K {
            if constexpr (std::is_same_v<K, Handle<PString>>) {
                return sink.internKey(std::string(sk->view()));
            } else {
                return sk;
            }
        };
        if constexpr (std::is_same_v<V, Handle<AnyObject>>) {
            sink.add(slot, keyFn, Handle<AnyObject>(sv.raw()), plusCombine<V>());
        } else {
            sink.add(slot, keyFn, sv, plusCombine<V>());
        }
    });
}

template <class K, class V>
void extractRows(const BlockPtr& page, std::vector<std::vector<ScalarValue>>& rows,
                 const std::unordered_map<int64_t, ScalarValue>& keyRepr) {
    auto root = get_block_root<PMap<K, V>>(*page);
    if (!root.get()) return;
    root->forEach([&](const auto& sk, const auto& sv) {
        ScalarValue kc;
        if constexpr (std::is_same_v<K, Handle<PString>>) {
            kc = std::string(sk->view());
        } else {
            auto it = keyRepr.find(sk);
            kc = it == keyRepr.end() ? ScalarValue(sk) : it->second;
        }
        ScalarValue vc;
        if constexpr (std::is_same_v<V, Handle<AnyObject>>) {
            std::byte* t = pc::detail::storedTarget(sv.raw());
            vc = t ? ScalarValue(ObjRef{payloadOf(reinterpret_cast<ObjectHeader*>(t)),
                                        sv.raw().typeCode})
                   : ScalarValue{};
        } else {
            vc = sv;
        }
        rows.push_back({std::move(kc), std::move(vc)});
    });
}

// ---------------------------------------------------------------------------
// distributed aggregation

struct AggShape {
    Pipeline pipeline;
    std::vector<int> prefix;   // statements before the AGGREGATE
    const tcap::Statement* agg = nullptr;
    std::string keyCol, valCol;
};

AggShape aggShape(const tcap::Program& p) {
    auto diags = tcap::validate(p);
    if (!diags.empty()) throw PcError("invalid program: " + diags[0].str());
    for (const auto& pl : eng::decompose(p)) {
        if (pl.sink != SinkKind::Aggregation) continue;
        AggShape sh;
        sh.pipeline = pl;
        sh.prefix.assign(pl.stmts.begin(), pl.stmts.end() - 1);
        for (int si : sh.prefix) {
            if (p.statements[size_t(si)].op == OpKind::Join)
                throw PcError("distributed_aggregate does not take join pipelines");
        }
        sh.agg = &p.statements[size_t(pl.sinkStmt)];
        sh.keyCol = sh.agg->inputs[0].columns[0];
        sh.valCol = sh.agg->inputs[1].columns[0];
        return sh;
    }
    throw PcError("program has no AGGREGATE statement");
}

template <class K, class V>
MaterializedList runDistAgg(SimCluster& cl, const tcap::Program& p, const AggShape& sh,
                            DistMetrics& dm) {
    const ClusterConfig& cfg = cl.config();
    const size_t P = cl.partitions();
    const size_t M = cfg.partitionsPerNode;
    const size_t N = cfg.producerThreads;
    const size_t Kc = cfg.combinerThreads;

    std::mutex reprMu;
    std::unordered_map<int64_t, ScalarValue> keyRepr;  // doubles used as keys
    std::atomic<uint64_t> producerPages{0}, combinerPages{0};

    // -- producing stage, node by node --------------------------------------
    for (size_t n = 0; n < cl.nodeCount(); ++n) {
        auto it = cl.storage(n).find(sh.pipeline.inputList);
        if (it == cl.storage(n).end())
            throw PcError("node " + std::to_string(n) + " has no set " + sh.pipeline.inputList);
        const MaterializedList& src = it->second;

        std::vector<PtrQueue> queues(Kc);
        std::atomic<size_t> rr{0};
        std::vector<std::exception_ptr> errs(N + Kc);
        // combiner output: (destination node, page)
        std::vector<std::vector<std::pair<size_t, BlockPtr>>> shipped(Kc);

        auto producer = [&](size_t t) {
            try {
                VecMapSink<K, V> sink{cfg.pageSize, P,
                                      [&](BlockPtr b) {
                                          ++producerPages;
                                          queues[rr.fetch_add(1) % Kc].push(std::move(b));
                                      },
                                      {}, {}, {}};
                size_t len = src.rows.size();
                size_t lo = t * len / N, hi = (t + 1) * len / N;
                for (size_t start = lo; start < hi; start += 1024) {
                    size_t end = std::min(hi, start + 1024);
                    VectorList out =
                        eng::eval_statements(p, sh.prefix, eng::chunk_of(src, start, end));
                    const Column* kc = out.find(sh.keyCol);
                    const Column* vc = out.find(sh.valCol);
                    if (!kc || !vc) throw eng::StageTypeError("unknown aggregate column");
                    for (size_t i = 0; i < out.length; ++i) {
                        ScalarValue k = kc->at(i);
                        ScalarValue v = vc->at(i);
                        size_t part = size_t(eng::hash_cell(k) % P);
                        if constexpr (std::is_same_v<K, int64_t>) {
                            int64_t ik = eng::detail::intKeyOf(k);
                            if (k.index() == 2) {
                                std::lock_guard<std::mutex> lk(reprMu);
                                keyRepr.emplace(ik, k);
                            }
                            if constexpr (std::is_same_v<V, Handle<AnyObject>>) {
                                sink.add(part, [&] { return ik; },
                                         eng::detail::handleOf(std::get<ObjRef>(v)),
                                         plusCombine<V>());
                            } else if constexpr (std::is_same_v<V, double>) {
                                sink.add(part, [&] { return ik; }, cellDouble(v),
                                         plusCombine<V>());
                            } else {
                                sink.add(part, [&] { return ik; }, cellInt(v), plusCombine<V>());
                            }
                        } else {
                            std::string s = cellString(k);
                            auto keyFn = [&] { return sink.internKey(s); };
                            if constexpr (std::is_same_v<V, Handle<AnyObject>>) {
                                sink.add(part, keyFn, eng::detail::handleOf(std::get<ObjRef>(v)),
                                         plusCombine<V>());
                            } else if constexpr (std::is_same_v<V, double>) {
                                sink.add(part, keyFn, cellDouble(v), plusCombine<V>());
                            } else {
                                sink.add(part, keyFn, cellInt(v), plusCombine<V>());
                            }
                        }
                    }
                }
                sink.finish();
            } catch (...) {
                errs[t] = std::current_exception();
            }
        };

        auto combiner = [&](size_t c) {
            try {
                std::vector<BlockPtr> buffer;
                BlockPtr b;
                while (queues[c].pop(b)) buffer.push_back(std::move(b));
                // merge partition by partition, one live page at a time
                for (size_t d = 0; d < cl.nodeCount(); ++d) {
                    VecMapSink<K, V> out{cfg.pageSize, M,
                                         [&](BlockPtr pg) {
                                             ++combinerPages;
                                             shipped[c].emplace_back(d, std::move(pg));
                                         },
                                         {}, {}, {}};
                    for (size_t j = 0; j < M; ++j) {
                        for (const auto& pp : buffer) {
                            auto root =
                                get_block_root<PVector<Handle<PMap<K, V>>>>(*pp);
                            foldMap(*root->elemPayload(uint64_t(d * M + j)), out, j);
                        }
                    }
                    out.finish();
                }
            } catch (...) {
                errs[N + c] = std::current_exception();
            }
        };

        std::vector<std::thread> ts;
        for (size_t t = 0; t < N; ++t) ts.emplace_back(producer, t);
        for (size_t c = 0; c < Kc; ++c) ts.emplace_back(combiner, c);
        for (size_t t = 0; t < N; ++t) ts[t].join();
        for (auto& q : queues) q.close();
        for (size_t c = 0; c < Kc; ++c) ts[N + c].join();
        for (auto& e : errs)
            if (e) std::rethrow_exception(e);

        // the shuffle: full combiner pages travel to each partition's home node
        for (const auto& byCombiner : shipped) {
            for (const auto& [dest, pg] : byCombiner) cl.send(n, dest, "agg", pg);
        }
    }

    // -- consuming stage ------------------------------------------------------
    MaterializedList result;
    result.columns = sh.agg->outputColumns;
    std::mutex resMu;

    for (size_t d = 0; d < cl.nodeCount(); ++d) {
        std::vector<BlockPtr> pages = cl.drain(d, "agg");
        std::vector<std::exception_ptr> errs(M);
        auto consume = [&](size_t j) {
            try {
                eng::detail::MapSinkT<K, V> fin;
                fin.pageSize = cfg.pageSize;
                SlotlessSink<K, V> shim{fin};
                for (const auto& pg : pages) {
                    auto root = get_block_root<PVector<Handle<PMap<K, V>>>>(*pg);
                    if (!root.get()) continue;
                    foldMap(*root->elemPayload(uint64_t(j)), shim, j);
                }
                BlockPtr fp = fin.finish(plusCombine<V>());
                std::vector<std::vector<ScalarValue>> rows;
                {
                    std::lock_guard<std::mutex> lk(reprMu);
                    extractRows<K, V>(fp, rows, keyRepr);
                }
                std::lock_guard<std::mutex> lk(resMu);
                result.pages.push_back(std::move(fp));
                for (auto& r : rows) result.rows.push_back(std::move(r));
            } catch (...) {
                errs[j] = std::current_exception();
            }
        };
        std::vector<std::thread> ts;
        for (size_t j = 0; j < M; ++j) ts.emplace_back(consume, j);
        for (auto& t : ts) t.join();
        for (auto& e : errs)
            if (e) std::rethrow_exception(e);
    }

    dm.producerPages = producerPages;
    dm.combinerPages = combinerPages;
    dm.resultRows = result.rows.size();
    return result;
}

}  // namespace

eng::MaterializedList distributed_aggregate(SimCluster& cl, const tcap::Program& p,
                                            DistMetrics* metricsOut) {
    AggShape sh = aggShape(p);
    DistMetrics dm;
    uint64_t fix0 = counters().importFixups.load();
    uint64_t sent0 = cl.pagesSent();
    size_t led0 = cl.ledger().size();

    // sniff key/value kinds from the first non-empty evaluated chunk
    ScalarValue kCell, vCell;
    bool found = false;
    for (size_t n = 0; n < cl.nodeCount() && !found; ++n) {
        auto it = cl.storage(n).find(sh.pipeline.inputList);
        if (it == cl.storage(n).end()) continue;
        const MaterializedList& src = it->second;
        for (size_t lo = 0; lo < src.rows.size() && !found; lo += 256) {
            size_t hi = std::min(src.rows.size(), lo + 256);
            VectorList out = eng::eval_statements(p, sh.prefix, eng::chunk_of(src, lo, hi));
            if (out.length == 0) continue;
            const Column* kc = out.find(sh.keyCol);
            const Column* vc = out.find(sh.valCol);
            if (!kc || !vc) throw eng::StageTypeError("unknown aggregate column");
            kCell = kc->at(0);
            vCell = vc->at(0);
            found = true;
        }
    }

    eng::MaterializedList result;
    if (!found) {
        result.columns = sh.agg->outputColumns;
    } else {
        bool strKey = isStringCell(kCell);
        int vk = vCell.index() == 6 ? 2 : (vCell.index() == 2 ? 1 : 0);
        if (!strKey && vk == 0) result = runDistAgg<int64_t, int64_t>(cl, p, sh, dm);
        else if (!strKey && vk == 1) result = runDistAgg<int64_t, double>(cl, p, sh, dm);
        else if (!strKey && vk == 2) result = runDistAgg<int64_t, Handle<AnyObject>>(cl, p, sh, dm);
        else if (strKey && vk == 0) result = runDistAgg<Handle<PString>, int64_t>(cl, p, sh, dm);
        else if (strKey && vk == 1) result = runDistAgg<Handle<PString>, double>(cl, p, sh, dm);
        else result = runDistAgg<Handle<PString>, Handle<AnyObject>>(cl, p, sh, dm);
    }

    dm.importFixups = counters().importFixups.load() - fix0;
    dm.shuffledPages = cl.pagesSent() - sent0;
    auto led = cl.ledger();
    for (size_t i = led0; i < led.size(); ++i) dm.shuffledBytes += led[i].bytes;
    dm.resultRows = result.rows.size();
    if (metricsOut) *metricsOut = dm;
    return result;
}

// ---------------------------------------------------------------------------
// joins

namespace {

struct JoinShape {
    std::vector<Pipeline> builds;  // JoinBuild pipelines
    Pipeline probe;                // the final pipeline containing a JOIN
    std::vector<int> probeChain;   // probe statements before its first JOIN
};

// Statements up to (excluding) the first JOIN.  All joins share one key, so
// a source's own pre-join hash decides its partition even when the pipeline
// continues through intermediate joins.
std::vector<int> preJoinChain(const tcap::Program& p, const std::vector<int>& stmts) {
    std::vector<int> out;
    for (int si : stmts) {
        if (p.statements[size_t(si)].op == OpKind::Join) break;
        out.push_back(si);
    }
    return out;
}

JoinShape joinShape(const tcap::Program& p) {
    auto diags = tcap::validate(p);
    if (!diags.empty()) throw PcError("invalid program: " + diags[0].str());
    JoinShape sh;
    bool haveProbe = false;
    for (const auto& pl : eng::decompose(p)) {
        if (pl.sink == SinkKind::JoinBuild) {
            sh.builds.push_back(pl);
            continue;
        }
        for (int si : pl.stmts) {
            if (p.statements[size_t(si)].op == OpKind::Join) {
                if (haveProbe) throw PcError("more than one probe pipeline");
                sh.probe = pl;
                sh.probeChain = preJoinChain(p, pl.stmts);
                haveProbe = true;
                break;
            }
        }
    }
    if (sh.builds.empty() || !haveProbe) throw PcError("not a join program");
    if (sh.probeChain.empty()) throw PcError("probe side has no hash chain");
    for (const auto& b : sh.builds) {
        if (preJoinChain(p, b.stmts).empty())
            throw PcError("build side " + b.inputList + " has no hash chain");
    }
    return sh;
}

// Repartition one source: evaluate its pre-join chain, bucket surviving
// source objects by join-key hash, and ship per-partition
// Map<hash, Vector<Object>> pages to each partition's home node.
void repartitionSource(SimCluster& cl, const tcap::Program& p, const std::string& list,
                       const std::vector<int>& chain, size_t node) {
    using HashMap = PMap<uint64_t, Handle<PVector<Handle<AnyObject>>>>;
    const size_t P = cl.partitions();
    auto it = cl.storage(node).find(list);
    if (it == cl.storage(node).end())
        throw PcError("node " + std::to_string(node) + " has no set " + list);
    const MaterializedList& src = it->second;
    const std::string& objCol = src.columns.at(0);
    const std::string& hashCol = p.statements[size_t(chain.back())].outputColumns.back();

    std::vector<std::vector<std::pair<uint64_t, ObjRef>>> buckets(P);
    for (size_t lo = 0; lo < src.rows.size(); lo += 1024) {
        size_t hi = std::min(src.rows.size(), lo + 1024);
        VectorList out = eng::eval_statements(p, chain, eng::chunk_of(src, lo, hi));
        const Column* hc = out.find(hashCol);
        const Column* oc = out.find(objCol);
        if (!hc || !oc) throw eng::StageTypeError("repartition columns missing");
        for (size_t i = 0; i < out.length; ++i) {
            uint64_t h = std::get<uint64_t>(hc->at(i));
            buckets[size_t(h % P)].emplace_back(h, std::get<ObjRef>(oc->at(i)));
        }
    }

    for (size_t part = 0; part < P; ++part) {
        if (buckets[part].empty()) continue;
        std::string tag = "jrep:" + list + ":" + std::to_string(part);
        BlockPtr pg = make_block(cl.config().pageSize);
        auto root = make_object<HashMap>();
        set_block_root(*pg, root);
        auto rotate = [&] {
            freeze_block(pg);
            cl.send(node, cl.homeNode(part), tag, pg);
            pg = make_block(cl.config().pageSize);
            root = make_object<HashMap>();
            set_block_root(*pg, root);
        };
        for (const auto& [h, obj] : buckets[part]) {
            for (int attempt = 0;; ++attempt) {
                try {
                    Handle<AnyObject> oh = eng::detail::handleOf(obj);
                    if (auto* slot = root->find(h)) {
                        auto* vec = reinterpret_cast<PVector<Handle<AnyObject>>*>(payloadOf(
                            reinterpret_cast<ObjectHeader*>(pc::detail::storedTarget(slot->raw()))));
                        vec->push_back(oh);
                    } else {
                        auto vh = make_object<PVector<Handle<AnyObject>>>();
                        vh->push_back(oh);
                        root->put(h, vh);
                    }
                    break;
                } catch (const OutOfBlockMemory&) {
                    if (attempt > 0) throw;
                    rotate();
                }
            }
        }
        freeze_block(pg);
        cl.send(node, cl.homeNode(part), tag, pg);
    }
}

// Rebuild a source list from drained repartition pages.
MaterializedList scanRepartitionPages(std::vector<BlockPtr> pages, const std::string& column) {
    using HashMap = PMap<uint64_t, Handle<PVector<Handle<AnyObject>>>>;
    MaterializedList out;
    out.columns = {column};
    for (const auto& pg : pages) {
        auto root = get_block_root<HashMap>(*pg);
        if (!root.get()) continue;
        root->forEach([&](const uint64_t&, const auto& sv) {
            auto* vec = reinterpret_cast<PVector<Handle<AnyObject>>*>(payloadOf(
                reinterpret_cast<ObjectHeader*>(pc::detail::storedTarget(sv.raw()))));
            for (uint64_t i = 0; i < vec->size(); ++i) {
                std::byte* p = vec->elemPayload(i);
                out.rows.push_back({ObjRef{p, vec->slots()[i].typeCode}});
            }
        });
    }
    out.pages = std::move(pages);
    return out;
}

void appendResult(MaterializedList& dst, std::map<std::string, MaterializedList>& outs) {
    if (outs.empty()) return;
    MaterializedList& part = outs.begin()->second;
    if (dst.columns.empty()) dst.columns = part.columns;
    for (auto& r : part.rows) dst.rows.push_back(std::move(r));
    for (auto& pg : part.pages) dst.pages.push_back(std::move(pg));
}

}  // namespace

JoinPlan plan_join(const SimCluster& cl, const tcap::Program& p) {
    JoinShape sh = joinShape(p);
    JoinPlan jp;
    for (const auto& b : sh.builds) jp.buildLists.push_back(b.inputList);
    jp.probeList = sh.probe.inputList;
    uint64_t buildBytes = 0;
    for (const auto& l : jp.buildLists) buildBytes += cl.storedBytes(l);
    jp.broadcast = buildBytes < cl.config().broadcastThresholdBytes;
    jp.jobStages = jp.broadcast ? jp.buildLists.size() + 1 : plan_stages(p).size();
    return jp;
}

eng::MaterializedList hash_partition_join(SimCluster& cl, const tcap::Program& p,
                                          DistMetrics* metricsOut) {
    JoinShape sh = joinShape(p);
    JoinPlan jp = plan_join(cl, p);
    DistMetrics dm;
    dm.broadcast = jp.broadcast;
    uint64_t fix0 = counters().importFixups.load();
    uint64_t sent0 = cl.pagesSent();
    size_t led0 = cl.ledger().size();

    eng::EngineConfig ecfg;
    ecfg.pageSize = cl.config().pageSize;
    MaterializedList result;

    if (jp.broadcast) {
        // replicate every build-side page; probes stay local
        for (const auto& list : jp.buildLists) {
            for (size_t owner = 0; owner < cl.nodeCount(); ++owner) {
                auto it = cl.storage(owner).find(list);
                if (it == cl.storage(owner).end()) continue;
                for (const auto& pg : it->second.pages) {
                    for (size_t d = 0; d < cl.nodeCount(); ++d) {
                        if (d != owner) cl.send(owner, d, "bcast:" + list, pg);
                    }
                }
            }
        }
        for (size_t d = 0; d < cl.nodeCount(); ++d) {
            std::map<std::string, MaterializedList> sources;
            for (const auto& list : jp.buildLists) {
                auto& local = cl.storage(d).at(list);
                std::vector<BlockPtr> pages = local.pages;
                for (auto& pg : cl.drain(d, "bcast:" + list)) pages.push_back(std::move(pg));
                sources[list] = eng::scan_object_pages(std::move(pages), local.columns.at(0));
            }
            sources[jp.probeList] = cl.storage(d).at(jp.probeList);
            auto outs = eng::execute(p, sources, ecfg);
            appendResult(result, outs);
        }
    } else {
        for (size_t n = 0; n < cl.nodeCount(); ++n) {
            for (const auto& b : sh.builds)
                repartitionSource(cl, p, b.inputList, preJoinChain(p, b.stmts), n);
            repartitionSource(cl, p, jp.probeList, sh.probeChain, n);
        }
        const size_t M = cl.config().partitionsPerNode;
        for (size_t d = 0; d < cl.nodeCount(); ++d) {
            for (size_t j = 0; j < M; ++j) {
                size_t part = d * M + j;
                std::map<std::string, MaterializedList> sources;
                size_t total = 0;
                auto fetch = [&](const std::string& list) {
                    auto pages = cl.drain(d, "jrep:" + list + ":" + std::to_string(part));
                    auto ml = scanRepartitionPages(std::move(pages),
                                                   cl.storage(d).at(list).columns.at(0));
                    total += ml.rows.size();
                    sources[list] = std::move(ml);
                };
                for (const auto& list : jp.buildLists) fetch(list);
                fetch(jp.probeList);
                if (total == 0) continue;
                auto outs = eng::execute(p, sources, ecfg);
                appendResult(result, outs);
            }
        }
    }

    dm.importFixups = counters().importFixups.load() - fix0;
    dm.shuffledPages = cl.pagesSent() - sent0;
    auto led = cl.ledger();
    for (size_t i = led0; i < led.size(); ++i) dm.shuffledBytes += led[i].bytes;
    dm.resultRows = result.rows.size();
    if (metricsOut) *metricsOut = dm;
    return result;
}

std::string DistMetrics::report() const {
    std::ostringstream os;
    os << "producer_pages=" << producerPages << "\n"
       << "combiner_pages=" << combinerPages << "\n"
       << "shuffled_pages=" << shuffledPages << "\n"
       << "shuffled_bytes=" << shuffledBytes << "\n"
       << "import_fixups=" << importFixups << "\n"
       << "result_rows=" << resultRows << "\n"
       << "broadcast=" << (broadcast ? 1 : 0) << "\n";
    return os.str();
}

}  // namespace pc::dist
