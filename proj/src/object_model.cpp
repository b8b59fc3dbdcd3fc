#include "pc/object_model.hpp"

#include <algorithm>
#include <map>
#include <mutex>
#include <shared_mutex>
#include <unordered_set>

namespace pc {

Counters& counters() {
    static Counters c;
    return c;
}

// ---------------------------------------------------------------------------
// TypeRegistry

TypeRegistry& TypeRegistry::instance() {
    static TypeRegistry r;
    return r;
}

TypeCode TypeRegistry::registerType(const BehaviorDescriptor& d) {
    if (d.name.empty()) throw RegistrationConflict("type descriptor needs a name");
    if (!d.variableSize && d.payloadSize == 0)
        throw RegistrationConflict("fixed-size type with zero payload: " + d.name);
    std::lock_guard lock(mu_);
    auto it = byName_.find(d.name);
    if (it != byName_.end()) {
        const BehaviorDescriptor& existing = entries_[it->second - 1];
        if (existing.payloadSize != d.payloadSize || existing.variableSize != d.variableSize)
            throw RegistrationConflict("conflicting re-registration of type " + d.name);
        return it->second;
    }
    entries_.push_back(d);
    TypeCode tc = static_cast<TypeCode>(entries_.size());
    byName_.emplace(d.name, tc);
    return tc;
}

const BehaviorDescriptor& TypeRegistry::resolve(TypeCode tc) const {
    std::lock_guard lock(mu_);
    if (isSimpleType(tc) || tc == 0 || tc > entries_.size())
        throw PcError("unresolvable type code " + std::to_string(tc));
    return entries_[tc - 1];
}

bool TypeRegistry::knows(TypeCode tc) const {
    std::lock_guard lock(mu_);
    return !isSimpleType(tc) && tc >= 1 && tc <= entries_.size();
}

size_t TypeRegistry::entryCount() const {
    std::lock_guard lock(mu_);
    return entries_.size();
}

std::string TypeRegistry::manifest() const {
    std::lock_guard lock(mu_);
    std::string out;
    for (size_t i = 0; i < entries_.size(); ++i) {
        out += std::to_string(i + 1);
        out += '\t';
        out += entries_[i].name;
        out += '\n';
    }
    return out;
}

// ---------------------------------------------------------------------------
// Block manager: address -> block resolution plus per-thread active block.

namespace {

class BlockManager {
public:
    static BlockManager& instance() {
        static BlockManager m;
        return m;
    }

    void add(const BlockPtr& b) {
        std::unique_lock lock(mu_);
        byBase_[reinterpret_cast<uintptr_t>(b->base())] = b;
    }

    void remove(const AllocationBlock* b) {
        std::unique_lock lock(mu_);
        byBase_.erase(reinterpret_cast<uintptr_t>(b->base()));
    }

    BlockPtr resolve(const void* addr) const {
        std::shared_lock lock(mu_);
        auto a = reinterpret_cast<uintptr_t>(addr);
        auto it = byBase_.upper_bound(a);
        if (it == byBase_.begin()) return nullptr;
        --it;
        const BlockPtr& b = it->second;
        if (b->contains(addr)) return b;
        return nullptr;
    }

private:
    mutable std::shared_mutex mu_;
    std::map<uintptr_t, BlockPtr> byBase_;
};

thread_local BlockPtr t_active;

constexpr uint64_t align8(uint64_t n) { return (n + 7) & ~uint64_t{7}; }
constexpr uint64_t kMinChunk = 32;  // smaller slack is absorbed via chunkExtra
constexpr size_t kWireHeader = 28;

}  // namespace

// ---------------------------------------------------------------------------
// AllocationBlock

AllocationBlock::~AllocationBlock() {
    if (ownsMemory_) delete[] base_;
}

uint64_t AllocationBlock::allocChunk(uint64_t totalBytes, uint16_t& chunkExtraOut) {
    totalBytes = align8(totalBytes);
    chunkExtraOut = 0;
    if (policy_ != AllocPolicy::NoReuse) {
        for (unsigned b = bucketOf(totalBytes); b < freeBuckets_.size(); ++b) {
            auto& bucket = freeBuckets_[b];
            for (size_t i = 0; i < bucket.size(); ++i) {
                if (bucket[i].size >= totalBytes) {
                    FreeChunk c = bucket[i];
                    bucket.erase(bucket.begin() + static_cast<ptrdiff_t>(i));
                    uint64_t slack = c.size - totalBytes;
                    if (slack >= kMinChunk) {
                        freeChunkAt(c.offset + totalBytes, slack);
                    } else {
                        chunkExtraOut = static_cast<uint16_t>(slack);
                    }
                    return c.offset;
                }
            }
        }
    }
    if (highWater_ + totalBytes > capacity_) {
        counters().allocFaults++;
        throw OutOfBlockMemory("block full: need " + std::to_string(totalBytes) + " bytes, " +
                               std::to_string(capacity_ - highWater_) + " free");
    }
    uint64_t off = highWater_;
    highWater_ += totalBytes;
    return off;
}

void AllocationBlock::freeChunkAt(uint64_t offset, uint64_t totalBytes) {
    freeBuckets_[bucketOf(totalBytes)].push_back({offset, totalBytes});
}

bool AllocationBlock::popRecycled(TypeCode tc, uint64_t& offsetOut) {
    auto it = recycleLists_.find(tc);
    if (it == recycleLists_.end() || it->second.empty()) return false;
    offsetOut = it->second.back();
    it->second.pop_back();
    return true;
}

void AllocationBlock::pushRecycled(TypeCode tc, uint64_t offset) {
    recycleLists_[tc].push_back(offset);
}

// ---------------------------------------------------------------------------
// Block lifecycle

struct detail_access {
    static BlockPtr create(std::byte* mem, bool owns, size_t capacity, AllocPolicy policy,
                           BlockState state, bool initHeader = true) {
        // A fresh block needs room to allocate; an imported one may be all header.
        if (initHeader ? capacity <= sizeof(BlockHeader) : capacity < sizeof(BlockHeader))
            throw InvalidCapacity("block capacity must exceed the header size");
        BlockPtr b(new AllocationBlock());
        b->base_ = mem;
        b->ownsMemory_ = owns;
        b->capacity_ = capacity;
        b->highWater_ = sizeof(BlockHeader);
        b->state_ = state;
        b->policy_ = policy;
        b->homeThread_ = std::this_thread::get_id();
        if (initHeader) new (mem) BlockHeader{};
        return b;
    }

    static void setState(AllocationBlock& b, BlockState s) { b.state_ = s; }
    static void setHighWater(AllocationBlock& b, uint64_t hw) { b.highWater_ = hw; }
    static void setActiveCount(AllocationBlock& b, uint64_t c) { b.activeObjectCount_ = c; }
    static void bumpActiveCount(AllocationBlock& b, int64_t d) {
        b.activeObjectCount_ = static_cast<uint64_t>(static_cast<int64_t>(b.activeObjectCount_) + d);
    }
    static void bumpAllocCount(AllocationBlock& b) { ++b.allocCount_; }
    static uint64_t allocChunk(AllocationBlock& b, uint64_t total, uint16_t& extra) {
        return b.allocChunk(total, extra);
    }
    static void freeChunkAt(AllocationBlock& b, uint64_t off, uint64_t total) {
        b.freeChunkAt(off, total);
    }
    static bool popRecycled(AllocationBlock& b, TypeCode tc, uint64_t& off) {
        return b.popRecycled(tc, off);
    }
    static void pushRecycled(AllocationBlock& b, TypeCode tc, uint64_t off) {
        b.pushRecycled(tc, off);
    }
};

static void retireActive(const BlockPtr& old) {
    if (!old) return;
    if (old->activeObjectCount() > 0) {
        detail_access::setState(*old, BlockState::InactiveManaged);
    } else {
        BlockManager::instance().remove(old.get());
    }
}

BlockPtr make_block(size_t capacity, AllocPolicy policy) {
    auto* mem = new std::byte[capacity];
    BlockPtr b;
    try {
        b = detail_access::create(mem, true, capacity, policy, BlockState::Active);
    } catch (...) {
        delete[] mem;
        throw;
    }
    retireActive(t_active);
    t_active = b;
    BlockManager::instance().add(b);
    return b;
}

BlockPtr make_block_on(void* mem, size_t capacity, AllocPolicy policy) {
    if (reinterpret_cast<uintptr_t>(mem) % 8 != 0)
        throw InvalidCapacity("block memory must be 8-byte aligned");
    BlockPtr b = detail_access::create(static_cast<std::byte*>(mem), false, capacity, policy,
                                       BlockState::Active);
    retireActive(t_active);
    t_active = b;
    BlockManager::instance().add(b);
    return b;
}

void freeze_block(const BlockPtr& b) {
    if (!b) return;
    detail_access::setState(*b, BlockState::InactiveUnmanaged);
    if (t_active == b) t_active = nullptr;
}

BlockPtr active_block() { return t_active; }

void detach_active_block() {
    retireActive(t_active);
    t_active = nullptr;
}

void discard_block(const BlockPtr& b) {
    if (b) BlockManager::instance().remove(b.get());
}

// ---------------------------------------------------------------------------
// Handle machinery

namespace detail {

std::byte* storedTarget(const StoredHandle& sh) {
    if (sh.offset == 0) return nullptr;
    return const_cast<std::byte*>(reinterpret_cast<const std::byte*>(&sh)) + sh.offset;
}

void bindStored(StoredHandle& dst, std::byte* targetHeader, TypeCode tc) {
    dst.typeCode = tc;
    dst.offset = targetHeader ? targetHeader - reinterpret_cast<std::byte*>(&dst) : 0;
}

BlockPtr blockOf(const void* addr) { return BlockManager::instance().resolve(addr); }

static ObjectHeader* headerAt(std::byte* p) { return reinterpret_cast<ObjectHeader*>(p); }

static bool countsHere(const BlockPtr& blk) {
    return blk && blk->managed() && blk->homeThread() == std::this_thread::get_id();
}

static void destroyObject(const BlockPtr& blk, ObjectHeader* hdr);

void retainTarget(ObjectHeader* t) {
    if (!t) return;
    BlockPtr blk = blockOf(t);
    if (!countsHere(blk)) return;
    switch (t->policy) {
        case ObjectPolicy::FullRefCount:
            ++t->refCount;
            break;
        case ObjectPolicy::UniqueOwnership:
            if (t->refCount >= 1)
                throw PcError("unique-ownership object may have only one referencing handle");
            ++t->refCount;
            break;
        case ObjectPolicy::NoRefCount:
            break;
    }
}

void releaseTarget(ObjectHeader* t) {
    if (!t) return;
    BlockPtr blk = blockOf(t);
    if (!countsHere(blk)) return;
    switch (t->policy) {
        case ObjectPolicy::FullRefCount:
            if (t->refCount > 0 && --t->refCount == 0) destroyObject(blk, t);
            break;
        case ObjectPolicy::UniqueOwnership:
            t->refCount = 0;
            destroyObject(blk, t);
            break;
        case ObjectPolicy::NoRefCount:
            break;
    }
}

void maybeReclaim(AllocationBlock& blk) {
    if (blk.state() == BlockState::InactiveManaged && blk.activeObjectCount() == 0)
        BlockManager::instance().remove(&blk);
}

static void destroyObject(const BlockPtr& blk, ObjectHeader* hdr) {
    if (!isSimpleType(hdr->typeCode)) {
        const BehaviorDescriptor& d = TypeRegistry::instance().resolve(hdr->typeCode);
        if (d.forEachChild) {
            d.forEachChild(payloadOf(hdr), hdr->payloadSize,
                           [](StoredHandle& c) { releaseStored(c); });
        }
    }
    const uint64_t offset =
        static_cast<uint64_t>(reinterpret_cast<std::byte*>(hdr) - blk->base());
    const uint64_t total = sizeof(ObjectHeader) + align8(hdr->payloadSize) + hdr->chunkExtra;
    const TypeCode tc = hdr->typeCode;
    const bool fixedSize =
        isSimpleType(tc) || !TypeRegistry::instance().resolve(tc).variableSize;
    switch (blk->policy()) {
        case AllocPolicy::NoReuse:
            break;
        case AllocPolicy::LightweightReuse:
            detail_access::freeChunkAt(*blk, offset, total);
            break;
        case AllocPolicy::Recycling:
            if (fixedSize) {
                detail_access::pushRecycled(*blk, tc, offset);
            } else {
                detail_access::freeChunkAt(*blk, offset, total);
            }
            break;
    }
    detail_access::bumpActiveCount(*blk, -1);
    maybeReclaim(*blk);
}

void addRefStored(const StoredHandle& h) { retainTarget(headerAt(storedTarget(h))); }

void releaseStored(StoredHandle& h) {
    ObjectHeader* t = headerAt(storedTarget(h));
    h.offset = 0;
    releaseTarget(t);
}

void copyConstructStored(StoredHandle& dst, const StoredHandle& src) {
    ObjectHeader* t = headerAt(storedTarget(src));
    dst.typeCode = src.typeCode;
    if (!t) {
        dst.offset = 0;
        return;
    }
    retainTarget(t);
    bindStored(dst, reinterpret_cast<std::byte*>(t), src.typeCode);
}

ObjectHeader* allocObject(TypeCode tc, uint32_t payloadSize, ObjectPolicy pol, bool tryRecycle) {
    BlockPtr blk = t_active;
    if (!blk) throw PcError("no active allocation block on this thread");
    if (!blk->mutableHere()) throw FrozenBlockMutation();

    uint64_t off = 0;
    uint16_t extra = 0;
    bool recycled = false;
    if (blk->policy() == AllocPolicy::Recycling && tryRecycle &&
        (isSimpleType(tc) || !TypeRegistry::instance().resolve(tc).variableSize)) {
        recycled = detail_access::popRecycled(*blk, tc, off);
    }
    if (!recycled) off = detail_access::allocChunk(*blk, sizeof(ObjectHeader) + payloadSize, extra);

    ObjectHeader* hdr = blk->objectAt(off);
    hdr->refCount = 1;
    hdr->typeCode = tc;
    hdr->payloadSize = payloadSize;
    if (!recycled) hdr->chunkExtra = extra;
    hdr->policy = pol;
    if (pol != ObjectPolicy::NoRefCount) detail_access::bumpActiveCount(*blk, 1);
    detail_access::bumpAllocCount(*blk);
    return hdr;
}

// ---------------------------------------------------------------------------
// Cross-block deep copy

namespace {

struct CopyCtx {
    AllocationBlock* dst;
    std::unordered_map<const ObjectHeader*, uint64_t> done;
    std::unordered_set<const ObjectHeader*> inProgress;
};

uint64_t copyRec(CopyCtx& ctx, const ObjectHeader* src) {
    if (auto it = ctx.done.find(src); it != ctx.done.end()) return it->second;
    if (ctx.inProgress.count(src)) throw CyclicGraph();
    ctx.inProgress.insert(src);

    ObjectHeader* nh = allocObject(src->typeCode, src->payloadSize, src->policy, false);
    nh->refCount = 0;  // bound by whoever requested the copy
    std::byte* newPayload = payloadOf(nh);
    const std::byte* srcPayload = payloadOf(src);
    std::memcpy(newPayload, srcPayload, src->payloadSize);

    if (!isSimpleType(src->typeCode)) {
        const BehaviorDescriptor& d = TypeRegistry::instance().resolve(src->typeCode);
        if (d.forEachChild) {
            d.forEachChild(newPayload, src->payloadSize, [&](StoredHandle& child) {
                const ptrdiff_t delta = reinterpret_cast<std::byte*>(&child) - newPayload;
                const auto* sc = reinterpret_cast<const StoredHandle*>(srcPayload + delta);
                auto* ct = reinterpret_cast<const ObjectHeader*>(storedTarget(*sc));
                if (!ct) {
                    child.offset = 0;
                    return;
                }
                uint64_t coff = copyRec(ctx, ct);
                ObjectHeader* cn = ctx.dst->objectAt(coff);
                bindStored(child, reinterpret_cast<std::byte*>(cn), sc->typeCode);
                if (cn->policy != ObjectPolicy::NoRefCount) ++cn->refCount;
            });
        }
    }
    counters().deepCopies++;
    ctx.inProgress.erase(src);
    uint64_t off = static_cast<uint64_t>(reinterpret_cast<std::byte*>(nh) - ctx.dst->base());
    ctx.done.emplace(src, off);
    return off;
}

}  // namespace

uint64_t deepCopyInto(AllocationBlock& active, const ObjectHeader* src) {
    CopyCtx ctx;
    ctx.dst = &active;
    return copyRec(ctx, src);
}

void assignStored(StoredHandle& dst, const StoredHandle* src) {
    std::byte* newT = src ? storedTarget(*src) : nullptr;
    const TypeCode tc = src ? src->typeCode : 0;
    BlockPtr dblk = blockOf(&dst);
    if (dblk && !dblk->managed()) throw FrozenBlockMutation();

    ObjectHeader* oldT = headerAt(storedTarget(dst));
    ObjectHeader* newHdr = headerAt(newT);
    if (oldT == newHdr) {
        dst.typeCode = tc;
        if (newHdr) bindStored(dst, newT, tc);
        return;
    }

    if (newHdr && dblk && !dblk->contains(newHdr)) {
        // Cross-block target for an in-block handle: deep copy into the
        // active block, or refuse (inter-block handles are never created).
        if (!dblk->mutableHere())
            throw PcError("cross-block handle assignment outside the active block");
        dst.offset = 0;
        uint64_t off;
        try {
            off = deepCopyInto(*dblk, newHdr);
        } catch (...) {
            releaseTarget(oldT);  // dst stays null
            throw;
        }
        ObjectHeader* copy = dblk->objectAt(off);
        if (copy->policy != ObjectPolicy::NoRefCount) ++copy->refCount;
        bindStored(dst, reinterpret_cast<std::byte*>(copy), tc);
        releaseTarget(oldT);
        return;
    }

    if (newHdr) retainTarget(newHdr);
    bindStored(dst, newT, tc);
    releaseTarget(oldT);
}

void scanHandles(const AllocationBlock& blk, const ObjectHeader* root,
                 const std::function<void(const StoredHandle&)>& fn) {
    (void)blk;
    std::unordered_set<const ObjectHeader*> seen;
    std::function<void(const ObjectHeader*)> rec = [&](const ObjectHeader* obj) {
        if (!obj || seen.count(obj)) return;
        seen.insert(obj);
        if (isSimpleType(obj->typeCode)) return;
        const BehaviorDescriptor& d = TypeRegistry::instance().resolve(obj->typeCode);
        if (!d.forEachChild) return;
        d.forEachChild(const_cast<std::byte*>(payloadOf(obj)), obj->payloadSize,
                       [&](StoredHandle& child) {
                           fn(child);
                           rec(reinterpret_cast<const ObjectHeader*>(storedTarget(child)));
                       });
    };
    rec(root);
}

}  // namespace detail

void scan_block_handles(const AllocationBlock& blk,
                        const std::function<void(const StoredHandle&)>& fn) {
    const BlockHeader& bh = blk.header();
    if (bh.rootOffset == 0) return;
    detail::scanHandles(blk, blk.objectAt(bh.rootOffset), fn);
}

// ---------------------------------------------------------------------------
// Export / import

std::vector<std::byte> export_block(const AllocationBlock& b) {
    std::vector<std::byte> out(kWireHeader + b.highWater());
    auto* p = out.data();
    std::memcpy(p, "PCB1", 4);
    uint32_t version = 1;
    std::memcpy(p + 4, &version, 4);
    uint8_t policy = static_cast<uint8_t>(b.policy());
    std::memcpy(p + 8, &policy, 1);
    std::memset(p + 9, 0, 3);
    uint64_t hw = b.highWater();
    std::memcpy(p + 12, &hw, 8);
    uint64_t cnt = b.activeObjectCount();
    std::memcpy(p + 20, &cnt, 8);
    std::memcpy(p + kWireHeader, b.base(), b.highWater());
    return out;
}

BlockPtr import_block(const std::byte* data, size_t len) {
    if (len < kWireHeader) throw CorruptBlock("truncated block: missing wire header");
    if (std::memcmp(data, "PCB1", 4) != 0) throw CorruptBlock("bad block magic");
    uint32_t version;
    std::memcpy(&version, data + 4, 4);
    if (version != 1) throw CorruptBlock("unsupported block format version");
    uint8_t policy;
    std::memcpy(&policy, data + 8, 1);
    if (policy > 2) throw CorruptBlock("bad allocator policy byte");
    uint64_t hw, cnt;
    std::memcpy(&hw, data + 12, 8);
    std::memcpy(&cnt, data + 20, 8);
    if (hw < sizeof(BlockHeader)) throw CorruptBlock("high water below header size");
    if (len != kWireHeader + hw) throw CorruptBlock("truncated block payload");

    auto* mem = new std::byte[hw];
    std::memcpy(mem, data + kWireHeader, hw);
    BlockPtr b;
    try {
        b = detail_access::create(mem, true, hw, static_cast<AllocPolicy>(policy),
                                  BlockState::InactiveUnmanaged, /*initHeader=*/false);
    } catch (...) {
        delete[] mem;
        throw;
    }
    detail_access::setHighWater(*b, hw);
    detail_access::setActiveCount(*b, cnt);
    BlockManager::instance().add(b);
    // No per-object fixups happen here; counters().importFixups stays 0 and
    // the acceptance suite asserts exactly that.
    return b;
}

}  // namespace pc
