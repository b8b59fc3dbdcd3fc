#ifndef PC_DETAIL_MAP_SINK_HPP
#define PC_DETAIL_MAP_SINK_HPP

// Shared aggregation-sink plumbing: a typed PMap page writer with
// OutOfBlockMemory rotate-and-retry, plus cell <-> key/value converters.
// Used by the single-node engine's aggregation sink and by the simulated
// cluster's combining/aggregation threads.

#include <cstring>
#include <string>
#include <unordered_map>

#include "pc/containers.hpp"
#include "pc/engine.hpp"

namespace pc::eng::detail {

inline const BehaviorDescriptor& descriptorOf(TypeCode tc) {
    return TypeRegistry::instance().resolve(tc);
}

// Doubles used as aggregation keys are bit-cast so they stay trivially
// copyable inline keys; callers keep a host reverse map for reconstruction.
inline int64_t intKeyOf(const ScalarValue& v) {
    if (v.index() == 2) {
        double d = std::get<double>(v);
        int64_t bits;
        std::memcpy(&bits, &d, sizeof bits);
        return bits;
    }
    if (v.index() == 1) return std::get<int64_t>(v);
    if (v.index() == 3) return std::get<bool>(v) ? 1 : 0;
    if (v.index() == 4) return int64_t(std::get<uint64_t>(v));
    throw StageTypeError("unsupported aggregate key cell");
}

inline Handle<AnyObject> handleOf(const ObjRef& r) {
    Handle<AnyObject> h;
    pc::detail::bindStored(const_cast<StoredHandle&>(h.stored()),
                           const_cast<std::byte*>(r.payload) - sizeof(ObjectHeader), r.typeCode);
    return h;
}

// The shared object-value combine: accumulate via the type descriptor.
inline void combineObj(Member<AnyObject>& slot, const Handle<AnyObject>& v) {
    std::byte* dst = pc::detail::storedTarget(slot.raw());
    std::byte* src = pc::detail::storedTarget(v.stored());
    if (!dst || !src) throw StageTypeError("null aggregate value");
    const auto& d = descriptorOf(slot.raw().typeCode);
    if (!d.combine) throw StageTypeError("type " + d.name + " has no combine function");
    d.combine(payloadOf(reinterpret_cast<ObjectHeader*>(dst)),
              payloadOf(reinterpret_cast<ObjectHeader*>(src)));
}

// One-PMap-per-page sink.  upsert failures rotate to a fresh page and retry
// once (PMap mutations are atomic under OutOfBlockMemory).
template <class K, class V>
struct MapSinkT {
    size_t pageSize = 1 << 20;
    BlockPtr live;
    std::vector<BlockPtr> partials;
    std::unordered_map<std::string, Handle<PString>> strKeys;  // per-page scratch

    using MapT = PMap<K, V>;

    void ensureLive() {
        if (!live) {
            live = make_block(pageSize);
            auto root = make_object<MapT>();
            set_block_root(*live, root);
        }
    }

    void rotate() {
        freeze_block(live);
        partials.push_back(live);
        live = nullptr;
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
    void add(const KeyFn& keyFn, const V& v, const Combine& combine) {
        for (int attempt = 0;; ++attempt) {
            try {
                ensureLive();
                auto root = get_block_root<MapT>(*live);
                root->upsert(keyFn(), v, combine);
                return;
            } catch (const OutOfBlockMemory&) {
                if (attempt > 0) throw;
                rotate();
            }
        }
    }

    // Merge every partial map onto one frozen result page, growing on demand.
    template <class Combine>
    BlockPtr finish(const Combine& combine) {
        if (live) rotate();
        size_t cap = pageSize;
        for (;;) {
            try {
                BlockPtr res = make_block(cap);
                auto root = make_object<MapT>();
                set_block_root(*res, root);
                for (const auto& part : partials) {
                    auto src = get_block_root<MapT>(*part);
                    map_merge(*root, *src, combine);
                }
                freeze_block(res);
                return res;
            } catch (const OutOfBlockMemory&) {
                cap *= 2;
                if (cap > (size_t(1) << 34)) throw;
            }
        }
    }
};

}  // namespace pc::eng::detail

#endif
