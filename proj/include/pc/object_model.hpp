#ifndef PC_OBJECT_MODEL_HPP
#define PC_OBJECT_MODEL_HPP

// Region-based allocation blocks with relocatable offset-pointer handles.
//
// A block is simultaneously a private heap, a storage page, and a wire
// message: every object inside it is addressed by offsets, so the whole
// region can be byte-copied to any base address (or another process) and
// used immediately.

#include <array>
#include <cstddef>
#include <deque>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <thread>
#include <type_traits>
#include <unordered_map>
#include <variant>
#include <vector>

#include "pc/common.hpp"

namespace pc {

using TypeCode = uint32_t;

// Simple type codes carry the payload size in the low bits; complex codes
// resolve through the TypeRegistry.
inline constexpr TypeCode kSimpleBit = 0x8000'0000u;

constexpr bool isSimpleType(TypeCode tc) { return (tc & kSimpleBit) != 0; }
constexpr uint32_t simpleTypeSize(TypeCode tc) { return tc & ~kSimpleBit; }
constexpr TypeCode simpleTypeCode(uint32_t size) { return kSimpleBit | size; }

// The in-block representation of a handle: a self-relative byte offset to
// the target's ObjectHeader (0 = null) plus the target's type code.
struct StoredHandle {
    int64_t offset = 0;
    uint32_t typeCode = 0;
    uint32_t pad = 0;
};
static_assert(sizeof(StoredHandle) == 16);

enum class ObjectPolicy : uint8_t {
    FullRefCount = 0,
    NoRefCount = 1,
    UniqueOwnership = 2,
};

struct ObjectHeader {
    uint32_t refCount = 0;
    TypeCode typeCode = 0;
    uint32_t payloadSize = 0;
    uint16_t chunkExtra = 0;  // slack bytes absorbed from a recycled chunk
    ObjectPolicy policy = ObjectPolicy::FullRefCount;
    uint8_t pad = 0;
};
static_assert(sizeof(ObjectHeader) == 16);

inline std::byte* payloadOf(ObjectHeader* h) {
    return reinterpret_cast<std::byte*>(h) + sizeof(ObjectHeader);
}
inline const std::byte* payloadOf(const ObjectHeader* h) {
    return reinterpret_cast<const std::byte*>(h) + sizeof(ObjectHeader);
}

// ---------------------------------------------------------------------------
// Engine-facing accessor contract.  Registered complex types may expose
// member reads and method calls so that compiled pipeline stages can operate
// on them generically.

struct ObjRef {
    const std::byte* payload = nullptr;
    TypeCode typeCode = 0;
};

using ScalarValue =
    std::variant<std::monostate, int64_t, double, bool, uint64_t, std::string, ObjRef>;

enum class FieldTag : uint8_t { Int64, Int32, Double, Bool, UInt64, HandleField };

// A raw reference to a member's storage inside a pinned page; consuming
// kernels dereference lazily, so member access allocates nothing.
struct FieldRef {
    const std::byte* addr = nullptr;
    FieldTag tag = FieldTag::Int64;
};

// ---------------------------------------------------------------------------
// Type registry

using ChildVisitor = std::function<void(StoredHandle&)>;

struct BehaviorDescriptor {
    std::string name;
    uint32_t payloadSize = 0;  // fixed payload size in bytes; 0 when variableSize
    bool variableSize = false;
    // Visit every StoredHandle embedded in a payload of this type.
    void (*forEachChild)(std::byte* payload, uint32_t payloadSize, const ChildVisitor& visit) =
        nullptr;
    FieldRef (*getMember)(const std::byte* payload, std::string_view attName) = nullptr;
    ScalarValue (*callMethod)(const std::byte* payload, std::string_view methodName) = nullptr;
    // Accumulate src into dst (aggregation combine), both payloads of this type.
    void (*combine)(std::byte* dstPayload, const std::byte* srcPayload) = nullptr;
};

class TypeRegistry {
public:
    static TypeRegistry& instance();

    // Idempotent for identical (name, size, variability); conflicting
    // re-registration under the same name throws RegistrationConflict.
    TypeCode registerType(const BehaviorDescriptor& d);
    const BehaviorDescriptor& resolve(TypeCode tc) const;
    bool knows(TypeCode tc) const;
    size_t entryCount() const;

    // Manifest: one "code<TAB>name" line per complex type.
    std::string manifest() const;

private:
    TypeRegistry() = default;
    mutable std::mutex mu_;
    std::deque<BehaviorDescriptor> entries_;  // deque: resolved references stay stable
    std::unordered_map<std::string, TypeCode> byName_;
};

// ---------------------------------------------------------------------------
// Allocation blocks

enum class BlockState : uint8_t { Active, InactiveManaged, InactiveUnmanaged };
enum class AllocPolicy : uint8_t { LightweightReuse = 0, NoReuse = 1, Recycling = 2 };

struct BlockHeader {
    uint64_t rootOffset = 0;  // absolute offset of root ObjectHeader; 0 = none
    uint32_t rootType = 0;
    uint32_t reserved = 0;
};
static_assert(sizeof(BlockHeader) == 16);

class AllocationBlock {
public:
    ~AllocationBlock();

    std::byte* base() const { return base_; }
    size_t capacity() const { return capacity_; }
    uint64_t highWater() const { return highWater_; }
    uint64_t activeObjectCount() const { return activeObjectCount_; }
    BlockState state() const { return state_; }
    AllocPolicy policy() const { return policy_; }
    std::thread::id homeThread() const { return homeThread_; }

    bool managed() const { return state_ != BlockState::InactiveUnmanaged; }
    bool mutableHere() const {
        return state_ == BlockState::Active && homeThread_ == std::this_thread::get_id();
    }
    bool contains(const void* p) const {
        auto* b = static_cast<const std::byte*>(p);
        return b >= base_ && b < base_ + capacity_;
    }

    // Instrumentation.
    uint64_t allocCount() const { return allocCount_; }

    BlockHeader& header() { return *reinterpret_cast<BlockHeader*>(base_); }
    const BlockHeader& header() const { return *reinterpret_cast<const BlockHeader*>(base_); }

    ObjectHeader* objectAt(uint64_t offset) const {
        return reinterpret_cast<ObjectHeader*>(base_ + offset);
    }

private:
    friend class BlockManager;
    friend struct detail_access;

    AllocationBlock() = default;

    // Raw chunk allocation; returns offset of chunk start (the ObjectHeader
    // location).  chunkExtraOut reports absorbed slack.
    uint64_t allocChunk(uint64_t totalBytes, uint16_t& chunkExtraOut);
    void freeChunkAt(uint64_t offset, uint64_t totalBytes);
    bool popRecycled(TypeCode tc, uint64_t& offsetOut);
    void pushRecycled(TypeCode tc, uint64_t offset);

    std::byte* base_ = nullptr;
    size_t capacity_ = 0;
    uint64_t highWater_ = 0;
    uint64_t activeObjectCount_ = 0;
    BlockState state_ = BlockState::Active;
    AllocPolicy policy_ = AllocPolicy::LightweightReuse;
    std::thread::id homeThread_{};
    bool ownsMemory_ = false;

    struct FreeChunk {
        uint64_t offset;
        uint64_t size;
    };
    std::array<std::vector<FreeChunk>, 48> freeBuckets_{};
    std::unordered_map<TypeCode, std::vector<uint64_t>> recycleLists_;

    uint64_t allocCount_ = 0;

    // test hooks
    friend struct BlockInspector;
};

using BlockPtr = std::shared_ptr<AllocationBlock>;

// floor(log2(n)); n > 0.
inline unsigned bucketOf(uint64_t n) { return 63u - static_cast<unsigned>(__builtin_clzll(n)); }

// Creates a fresh block backed by newly allocated memory and makes it the
// calling thread's active block.  The previously active block becomes
// inactive-managed if it still holds reachable objects, else it is reclaimed.
BlockPtr make_block(size_t capacity, AllocPolicy policy = AllocPolicy::LightweightReuse);

// Same, but over caller-owned memory (e.g. a buffer-pool page).  `mem` must
// be 8-byte aligned and outlive the block.
BlockPtr make_block_on(void* mem, size_t capacity, AllocPolicy policy = AllocPolicy::LightweightReuse);

// Ends a block's mutable life: it becomes inactive-unmanaged (read-only,
// shareable across threads).  If it was the calling thread's active block,
// the thread is left with no active block.
void freeze_block(const BlockPtr& b);

// The calling thread's active block (null if none).
BlockPtr active_block();

// Drops the thread's active-block role without freezing; reclaim rules apply.
void detach_active_block();

// Unregisters a block from address resolution (e.g. when a buffer-pool page
// is recycled or an imported block is no longer needed).
void discard_block(const BlockPtr& b);

// Wire format: "PCB1" | version u32 | policy u8 | 3 reserved | highWater u64
// | activeObjectCount u64 | payload [0, highWater).  Little-endian.
std::vector<std::byte> export_block(const AllocationBlock& b);
BlockPtr import_block(const std::byte* data, size_t len);
inline BlockPtr import_block(const std::vector<std::byte>& bytes) {
    return import_block(bytes.data(), bytes.size());
}

// ---------------------------------------------------------------------------
// Handle machinery internals

namespace detail {

std::byte* storedTarget(const StoredHandle& sh);
void bindStored(StoredHandle& dst, std::byte* targetHeader, TypeCode tc);
BlockPtr blockOf(const void* addr);

// Full handle-assignment semantics: release old target, deep copy when the
// destination lives in the active block and the source targets another
// block, refcount adjustments on home-thread-managed blocks only.
void assignStored(StoredHandle& dst, const StoredHandle* src);
void copyConstructStored(StoredHandle& dst, const StoredHandle& src);
void releaseStored(StoredHandle& h);
void addRefStored(const StoredHandle& h);

// Allocate header+payload in the calling thread's active block.
ObjectHeader* allocObject(TypeCode tc, uint32_t payloadSize, ObjectPolicy pol,
                          bool tryRecycle);
void maybeReclaim(AllocationBlock& blk);

uint64_t deepCopyInto(AllocationBlock& active, const ObjectHeader* src);

void scanHandles(const AllocationBlock& blk, const ObjectHeader* root,
                 const std::function<void(const StoredHandle&)>& fn);

}  // namespace detail

// ---------------------------------------------------------------------------
// Type traits: specialize PcType<T> for every complex in-block type.
//
//   template <> struct PcType<DataPoint> {
//       static BehaviorDescriptor describe();
//   };

template <class T>
struct PcType;  // intentionally undefined for unregistered types

struct AnyObject;  // tag: a handle of erased target type

template <class T>
TypeCode typeCodeOf() {
    if constexpr (std::is_arithmetic_v<T>) {
        return simpleTypeCode(sizeof(T));
    } else {
        static const TypeCode tc = TypeRegistry::instance().registerType(PcType<T>::describe());
        return tc;
    }
}

// ---------------------------------------------------------------------------
// Handle / Member

template <class T>
class Member;

template <class T>
class Handle {
public:
    Handle() = default;
    Handle(std::nullptr_t) {}
    Handle(const Handle& o) { detail::copyConstructStored(sh_, o.sh_); }
    Handle(Handle&& o) noexcept {
        sh_.typeCode = o.sh_.typeCode;
        detail::bindStored(sh_, detail::storedTarget(o.sh_), o.sh_.typeCode);
        o.sh_.offset = 0;
    }
    explicit Handle(const StoredHandle& stored) { detail::copyConstructStored(sh_, stored); }
    Handle(const Member<T>& m);

    Handle& operator=(const Handle& o) {
        if (this != &o) detail::assignStored(sh_, &o.sh_);
        return *this;
    }
    Handle& operator=(std::nullptr_t) {
        detail::assignStored(sh_, nullptr);
        return *this;
    }
    ~Handle() { detail::releaseStored(sh_); }

    bool isNull() const { return sh_.offset == 0; }
    explicit operator bool() const { return !isNull(); }
    TypeCode typeCode() const { return sh_.typeCode; }

    ObjectHeader* headerPtr() const {
        return reinterpret_cast<ObjectHeader*>(detail::storedTarget(sh_));
    }

    auto* get() const {
        if constexpr (std::is_same_v<T, AnyObject>) {
            return isNull() ? static_cast<std::byte*>(nullptr) : payloadOf(headerPtr());
        } else {
            return isNull() ? static_cast<T*>(nullptr)
                            : reinterpret_cast<T*>(payloadOf(headerPtr()));
        }
    }
    auto* operator->() const { return get(); }
    T& operator*() const
        requires(!std::is_same_v<T, AnyObject>)
    {
        return *get();
    }

    const StoredHandle& stored() const { return sh_; }

private:
    StoredHandle sh_{};
};

// An in-block handle slot (a member field or container element).  No C++
// destructor: in-block destruction runs through the registry's child walk.
template <class T>
class Member {
public:
    Member() = default;
    Member(const Member&) = delete;  // in-block objects are never C++-copied

    Member& operator=(const Handle<T>& h) {
        detail::assignStored(sh_, &h.stored());
        return *this;
    }
    Member& operator=(const Member& o) {
        detail::assignStored(sh_, &o.sh_);
        return *this;
    }
    Member& operator=(std::nullptr_t) {
        detail::assignStored(sh_, nullptr);
        return *this;
    }

    bool isNull() const { return sh_.offset == 0; }
    explicit operator bool() const { return !isNull(); }
    TypeCode typeCode() const { return sh_.typeCode; }

    auto* get() const {
        if constexpr (std::is_same_v<T, AnyObject>) {
            return isNull() ? static_cast<std::byte*>(nullptr)
                            : payloadOf(reinterpret_cast<ObjectHeader*>(detail::storedTarget(sh_)));
        } else {
            return isNull() ? static_cast<T*>(nullptr)
                            : reinterpret_cast<T*>(payloadOf(
                                  reinterpret_cast<ObjectHeader*>(detail::storedTarget(sh_))));
        }
    }
    auto* operator->() const { return get(); }
    T& operator*() const
        requires(!std::is_same_v<T, AnyObject>)
    {
        return *get();
    }

    StoredHandle& raw() { return sh_; }
    const StoredHandle& raw() const { return sh_; }

private:
    StoredHandle sh_{};
};

template <class T>
Handle<T>::Handle(const Member<T>& m) {
    detail::copyConstructStored(sh_, m.raw());
}

// ---------------------------------------------------------------------------
// Object construction

namespace detail {
template <class T>
inline constexpr bool isZeroArgV = true;
}

template <class T, class... Args>
Handle<T> make_object_with_policy(ObjectPolicy pol, Args&&... args) {
    static_assert(!std::is_same_v<T, AnyObject>);
    const TypeCode tc = typeCodeOf<T>();
    uint32_t size;
    if constexpr (std::is_arithmetic_v<T>) {
        size = sizeof(T);
    } else {
        const auto& d = TypeRegistry::instance().resolve(tc);
        if (d.variableSize)
            throw PcError("make_object on variable-size type " + d.name +
                          "; use its construction helper");
        size = d.payloadSize;
    }
    ObjectHeader* hdr = detail::allocObject(tc, size, pol, sizeof...(Args) == 0);
    new (payloadOf(hdr)) T(std::forward<Args>(args)...);
    Handle<T> h;
    // bind without an extra addref: the fresh object starts at refCount 1
    const_cast<StoredHandle&>(h.stored()).typeCode = tc;
    detail::bindStored(const_cast<StoredHandle&>(h.stored()),
                       reinterpret_cast<std::byte*>(hdr), tc);
    return h;
}

template <class T, class... Args>
Handle<T> make_object(Args&&... args) {
    return make_object_with_policy<T>(ObjectPolicy::FullRefCount, std::forward<Args>(args)...);
}

// ---------------------------------------------------------------------------
// Block roots

template <class T>
void set_block_root(AllocationBlock& blk, const Handle<T>& h) {
    if (h.isNull()) {
        blk.header().rootOffset = 0;
        blk.header().rootType = 0;
        return;
    }
    auto* hdr = h.headerPtr();
    if (!blk.contains(hdr)) throw PcError("root handle targets a different block");
    detail::addRefStored(h.stored());
    blk.header().rootOffset =
        static_cast<uint64_t>(reinterpret_cast<std::byte*>(hdr) - blk.base());
    blk.header().rootType = h.typeCode();
}

template <class T>
Handle<T> get_block_root(const AllocationBlock& blk) {
    const BlockHeader& bh = blk.header();
    if (bh.rootOffset == 0) return {};
    Handle<T> h;
    detail::bindStored(const_cast<StoredHandle&>(h.stored()),
                       blk.base() + bh.rootOffset, bh.rootType);
    detail::addRefStored(h.stored());
    return h;
}

// Scan every stored Handle reachable from the block root; used by tests to
// check the relocation-closure invariant.
void scan_block_handles(const AllocationBlock& blk,
                        const std::function<void(const StoredHandle&)>& fn);

// ---------------------------------------------------------------------------
// Helpers for writing PcType<T>::describe() for plain structs whose handle
// members are Member<> fields.

template <class T, class... Ms>
void visitHandleMembers(std::byte* payload, const ChildVisitor& visit, Ms T::*... members) {
    T* obj = reinterpret_cast<T*>(payload);
    (visit((obj->*members).raw()), ...);
}

}  // namespace pc

#endif
