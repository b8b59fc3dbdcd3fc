#ifndef PC_CONTAINERS_HPP
#define PC_CONTAINERS_HPP

// Persistent Vector / Map / String living inside allocation blocks.  All
// element storage is reached through stored handles, so containers survive
// block relocation like any other object graph.

#include <cstring>
#include <string_view>
#include <type_traits>

#include "pc/object_model.hpp"

namespace pc {

// ---------------------------------------------------------------------------
// Variable-size backing arrays

namespace detail {

struct RawBytes {};    // opaque element bytes
struct HandleArray {}; // packed StoredHandle slots

template <class T>
struct IsHandle : std::false_type {};
template <class U>
struct IsHandle<Handle<U>> : std::true_type {
    using target = U;
};

template <class T>
struct StorageOf {
    using type = T;
};
template <class U>
struct StorageOf<Handle<U>> {
    using type = Member<U>;
};

template <class T>
std::string valueTypeName() {
    if constexpr (std::is_same_v<T, int64_t>) return "i64";
    else if constexpr (std::is_same_v<T, uint64_t>) return "u64";
    else if constexpr (std::is_same_v<T, int32_t>) return "i32";
    else if constexpr (std::is_same_v<T, uint32_t>) return "u32";
    else if constexpr (std::is_same_v<T, uint8_t>) return "u8";
    else if constexpr (std::is_same_v<T, double>) return "f64";
    else if constexpr (std::is_same_v<T, float>) return "f32";
    else if constexpr (IsHandle<T>::value) {
        using U = typename IsHandle<T>::target;
        if constexpr (std::is_same_v<U, AnyObject>)
            return "handle<any>";
        else
            return "handle<" + PcType<U>::describe().name + ">";
    } else
        return PcType<T>::describe().name;
}

// Fresh variable-size object in the active block.
template <class Tag>
Handle<Tag> alloc_variable(uint32_t payloadBytes, ObjectPolicy pol = ObjectPolicy::FullRefCount,
                           bool zeroFill = false) {
    const TypeCode tc = typeCodeOf<Tag>();
    ObjectHeader* hdr = allocObject(tc, payloadBytes, pol, false);
    if (zeroFill) std::memset(payloadOf(hdr), 0, payloadBytes);
    Handle<Tag> h;
    bindStored(const_cast<StoredHandle&>(h.stored()), reinterpret_cast<std::byte*>(hdr), tc);
    return h;
}

inline AllocationBlock& requireActiveHome(const void* self) {
    BlockPtr blk = blockOf(self);
    if (!blk) throw PcError("container is not inside any block");
    if (!blk->mutableHere()) throw FrozenBlockMutation("container growth outside the active block");
    BlockPtr act = active_block();
    if (act.get() != blk.get())
        throw PcError("container growth requires its block to be the active block");
    return *blk;
}

}  // namespace detail

template <>
struct PcType<detail::RawBytes> {
    static BehaviorDescriptor describe() {
        return {.name = "pc.RawBytes", .payloadSize = 0, .variableSize = true};
    }
};

template <>
struct PcType<detail::HandleArray> {
    static BehaviorDescriptor describe() {
        BehaviorDescriptor d;
        d.name = "pc.HandleArray";
        d.variableSize = true;
        d.forEachChild = [](std::byte* p, uint32_t n, const ChildVisitor& v) {
            auto* slots = reinterpret_cast<StoredHandle*>(p);
            for (uint32_t i = 0; i < n / sizeof(StoredHandle); ++i) v(slots[i]);
        };
        return d;
    }
};

// ---------------------------------------------------------------------------
// Deterministic hashing (FNV-1a, fixed seed — stable across runs and hosts).

inline uint64_t hash64(const void* data, size_t len, uint64_t seed = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

// ---------------------------------------------------------------------------
// PString: length + inline bytes; hashes are never cached.

struct PString {
    uint64_t length = 0;
    const char* chars() const { return reinterpret_cast<const char*>(this) + sizeof(uint64_t); }
    char* chars() { return reinterpret_cast<char*>(this) + sizeof(uint64_t); }
    std::string_view view() const { return {chars(), length}; }
    uint64_t hash() const { return hash64(chars(), length); }
};

template <>
struct PcType<PString> {
    static BehaviorDescriptor describe() {
        return {.name = "pc.String", .payloadSize = 0, .variableSize = true};
    }
};

inline Handle<PString> make_string(std::string_view s) {
    const TypeCode tc = typeCodeOf<PString>();
    ObjectHeader* hdr = detail::allocObject(
        tc, static_cast<uint32_t>(sizeof(uint64_t) + s.size()), ObjectPolicy::FullRefCount, false);
    auto* str = reinterpret_cast<PString*>(payloadOf(hdr));
    str->length = s.size();
    std::memcpy(str->chars(), s.data(), s.size());
    Handle<PString> out;
    detail::bindStored(const_cast<StoredHandle&>(out.stored()),
                       reinterpret_cast<std::byte*>(hdr), tc);
    return out;
}

inline bool operator==(const PString& a, const PString& b) { return a.view() == b.view(); }

// ---------------------------------------------------------------------------
// PVector<T>: T is a trivially copyable value type or Handle<U>.

template <class T>
struct PVector {
    static constexpr bool kHandleElems = detail::IsHandle<T>::value;
    using StorageTag = std::conditional_t<kHandleElems, detail::HandleArray, detail::RawBytes>;

    uint64_t count = 0;
    uint64_t cap = 0;
    Member<StorageTag> storage;

    uint64_t size() const { return count; }
    bool empty() const { return count == 0; }

    // -- value elements ----------------------------------------------------
    T* data()
        requires(!kHandleElems)
    {
        return reinterpret_cast<T*>(storage.get());
    }
    const T* data() const
        requires(!kHandleElems)
    {
        return reinterpret_cast<const T*>(storage.get());
    }
    T& operator[](uint64_t i)
        requires(!kHandleElems)
    {
        return data()[i];
    }
    const T& operator[](uint64_t i) const
        requires(!kHandleElems)
    {
        return data()[i];
    }
    void push_back(const T& v)
        requires(!kHandleElems)
    {
        ensure(count + 1);
        data()[count++] = v;
    }

    // -- handle elements ---------------------------------------------------
    StoredHandle* slots()
        requires(kHandleElems)
    {
        return reinterpret_cast<StoredHandle*>(storage.get());
    }
    const StoredHandle* slots() const
        requires(kHandleElems)
    {
        return reinterpret_cast<const StoredHandle*>(storage.get());
    }
    T get(uint64_t i) const
        requires(kHandleElems)
    {
        return T(slots()[i]);
    }
    auto* elemPayload(uint64_t i) const
        requires(kHandleElems)
    {
        using U = typename detail::IsHandle<T>::target;
        std::byte* t = detail::storedTarget(slots()[i]);
        if constexpr (std::is_same_v<U, AnyObject>) {
            return t ? payloadOf(reinterpret_cast<ObjectHeader*>(t)) : nullptr;
        } else {
            return t ? reinterpret_cast<U*>(payloadOf(reinterpret_cast<ObjectHeader*>(t)))
                     : static_cast<U*>(nullptr);
        }
    }
    void push_back(const T& h)
        requires(kHandleElems)
    {
        ensure(count + 1);
        detail::assignStored(slots()[count], &h.stored());
        ++count;
    }
    void set(uint64_t i, const T& h)
        requires(kHandleElems)
    {
        detail::assignStored(slots()[i], &h.stored());
    }

    void ensure(uint64_t need) {
        if (need <= cap) return;
        detail::requireActiveHome(this);
        uint64_t ncap = cap ? cap * 2 : 4;
        while (ncap < need) ncap *= 2;
        const uint32_t elemBytes = kHandleElems ? sizeof(StoredHandle) : sizeof(T);
        auto fresh = detail::alloc_variable<StorageTag>(
            static_cast<uint32_t>(ncap * elemBytes), ObjectPolicy::FullRefCount, kHandleElems);
        std::byte* np = reinterpret_cast<std::byte*>(fresh.get());
        if (count > 0) {
            if constexpr (kHandleElems) {
                // transfer slots without touching refcounts: rebind, then
                // null the old slot so releasing the old array frees nothing
                auto* ns = reinterpret_cast<StoredHandle*>(np);
                auto* os = slots();
                for (uint64_t i = 0; i < count; ++i) {
                    detail::bindStored(ns[i], detail::storedTarget(os[i]), os[i].typeCode);
                    os[i].offset = 0;
                }
            } else {
                std::memcpy(np, storage.get(), count * sizeof(T));
            }
        }
        storage = fresh;  // old array (children already detached) is released
        cap = ncap;
    }
};

template <class T>
struct PcType<PVector<T>> {
    static BehaviorDescriptor describe() {
        BehaviorDescriptor d;
        d.name = "pc.Vector<" + detail::valueTypeName<T>() + ">";
        d.payloadSize = sizeof(PVector<T>);
        d.forEachChild = [](std::byte* p, uint32_t, const ChildVisitor& v) {
            v(reinterpret_cast<PVector<T>*>(p)->storage.raw());
        };
        return d;
    }
};

// ---------------------------------------------------------------------------
// PMap<K,V>: chained buckets, power-of-two bucket counts, load factor 0.75.
// K is an inline trivially copyable key or Handle<PString>; V is an inline
// value or Handle<U>.

template <class K, class V>
struct PMapEntry {
    Member<PMapEntry> next;
    typename detail::StorageOf<K>::type key;
    typename detail::StorageOf<V>::type value;
};

namespace detail {

template <class K>
uint64_t hashOfKey(const K& k) {
    if constexpr (std::is_same_v<K, Handle<PString>>) {
        return k->hash();
    } else {
        static_assert(std::is_trivially_copyable_v<K>);
        return hash64(&k, sizeof(K));
    }
}

template <class K>
uint64_t hashOfStoredKey(const typename StorageOf<K>::type& s) {
    if constexpr (std::is_same_v<K, Handle<PString>>) {
        return s->hash();
    } else {
        return hash64(&s, sizeof(K));
    }
}

template <class K>
bool storedKeyEquals(const typename StorageOf<K>::type& s, const K& k) {
    if constexpr (std::is_same_v<K, Handle<PString>>) {
        return s->view() == k->view();
    } else {
        return std::memcmp(&s, &k, sizeof(K)) == 0;
    }
}

template <class K>
void assignKey(typename StorageOf<K>::type& s, const K& k) {
    if constexpr (std::is_same_v<K, Handle<PString>>) {
        s = k;  // may deep-copy the string into this block
    } else {
        std::memcpy(&s, &k, sizeof(K));
    }
}

}  // namespace detail

template <class K, class V>
struct PMap {
    using Entry = PMapEntry<K, V>;
    using ValueSlot = typename detail::StorageOf<V>::type;

    uint64_t entries = 0;
    uint64_t bucketCount = 0;
    Member<detail::HandleArray> buckets;

    uint64_t entryCount() const { return entries; }

    StoredHandle* bucketSlots() const {
        return reinterpret_cast<StoredHandle*>(
            const_cast<std::byte*>(reinterpret_cast<const std::byte*>(buckets.get())));
    }

    Entry* entryAt(const StoredHandle& s) const {
        std::byte* t = detail::storedTarget(s);
        return t ? reinterpret_cast<Entry*>(payloadOf(reinterpret_cast<ObjectHeader*>(t)))
                 : nullptr;
    }

    ValueSlot* find(const K& k) const {
        if (bucketCount == 0) return nullptr;
        uint64_t b = detail::hashOfKey(k) & (bucketCount - 1);
        for (Entry* e = entryAt(bucketSlots()[b]); e; e = entryAt(e->next.raw())) {
            if (detail::storedKeyEquals<K>(e->key, k)) return &e->value;
        }
        return nullptr;
    }

    bool contains(const K& k) const { return find(k) != nullptr; }

    // Returns the value slot for k, default-initialized when freshly inserted.
    ValueSlot& getOrInsert(const K& k, bool& inserted) {
        if (bucketCount == 0) initBuckets(8);
        if (entries + 1 > (bucketCount * 3) / 4) rehash(bucketCount * 2);
        uint64_t b = detail::hashOfKey(k) & (bucketCount - 1);
        for (Entry* e = entryAt(bucketSlots()[b]); e; e = entryAt(e->next.raw())) {
            if (detail::storedKeyEquals<K>(e->key, k)) {
                inserted = false;
                return e->value;
            }
        }
        detail::requireActiveHome(this);
        auto eh = make_object<Entry>();
        detail::assignKey<K>(eh->key, k);
        StoredHandle& head = bucketSlots()[b];
        detail::assignStored(eh->next.raw(), &head);  // chain old head
        detail::assignStored(head, &eh.stored());
        ++entries;
        inserted = true;
        return eh->value;
    }

    template <class Combine>
    void upsert(const K& k, const V& v, Combine&& combine) {
        bool inserted = false;
        ValueSlot& slot = getOrInsert(k, inserted);
        if constexpr (detail::IsHandle<V>::value) {
            if (inserted) {
                try {
                    slot = v;  // may deep-copy into this block
                } catch (...) {
                    // unlink the fresh head entry so the map stays consistent
                    // (its refcount is dropped; the space is not reclaimed)
                    uint64_t b = detail::hashOfKey(k) & (bucketCount - 1);
                    StoredHandle& head = bucketSlots()[b];
                    Entry* e = entryAt(head);
                    detail::assignStored(head, &e->next.raw());
                    --entries;
                    throw;
                }
            } else {
                combine(slot, v);
            }
        } else {
            slot = inserted ? v : combine(slot, v);
        }
    }

    // insert-or-replace
    void put(const K& k, const V& v) {
        bool inserted = false;
        ValueSlot& slot = getOrInsert(k, inserted);
        slot = v;
    }

    // Deterministic traversal: ascending bucket order, chain head to tail.
    template <class Fn>
    void forEach(Fn&& fn) const {
        for (uint64_t b = 0; b < bucketCount; ++b) {
            for (Entry* e = entryAt(bucketSlots()[b]); e; e = entryAt(e->next.raw())) {
                fn(e->key, e->value);
            }
        }
    }

    void initBuckets(uint64_t n) {
        detail::requireActiveHome(this);
        auto arr = detail::alloc_variable<detail::HandleArray>(
            static_cast<uint32_t>(n * sizeof(StoredHandle)), ObjectPolicy::FullRefCount, true);
        buckets = arr;
        bucketCount = n;
    }

    void rehash(uint64_t n) {
        detail::requireActiveHome(this);
        // allocate the new bucket array up front: an allocation failure must
        // leave the map untouched
        auto arr = detail::alloc_variable<detail::HandleArray>(
            static_cast<uint32_t>(n * sizeof(StoredHandle)), ObjectPolicy::FullRefCount, true);
        // collect entries, detach every stored reference without refcount
        // churn, then relink into the new bucket array
        std::vector<std::pair<std::byte*, TypeCode>> ents;
        ents.reserve(entries);
        StoredHandle* old = bucketSlots();
        for (uint64_t b = 0; b < bucketCount; ++b) {
            StoredHandle* s = &old[b];
            while (std::byte* t = detail::storedTarget(*s)) {
                ents.emplace_back(t, s->typeCode);
                Entry* e = reinterpret_cast<Entry*>(payloadOf(reinterpret_cast<ObjectHeader*>(t)));
                StoredHandle* nxt = &e->next.raw();
                s->offset = 0;
                s = nxt;
            }
        }
        // chains are fully detached now (each entry keeps refCount 1 without
        // a live stored reference, restored below)
        buckets = arr;
        bucketCount = n;
        StoredHandle* fresh = bucketSlots();
        for (auto it = ents.rbegin(); it != ents.rend(); ++it) {  // preserve chain order
            auto [t, tc] = *it;
            Entry* e = reinterpret_cast<Entry*>(payloadOf(reinterpret_cast<ObjectHeader*>(t)));
            uint64_t b = detail::hashOfStoredKey<K>(e->key) & (n - 1);
            detail::bindStored(e->next.raw(), detail::storedTarget(fresh[b]), fresh[b].typeCode);
            detail::bindStored(fresh[b], t, tc);
        }
    }
};

template <class K, class V>
struct PcType<PMapEntry<K, V>> {
    static BehaviorDescriptor describe() {
        BehaviorDescriptor d;
        d.name = "pc.MapEntry<" + detail::valueTypeName<K>() + "," + detail::valueTypeName<V>() +
                 ">";
        d.payloadSize = sizeof(PMapEntry<K, V>);
        d.forEachChild = [](std::byte* p, uint32_t, const ChildVisitor& v) {
            auto* e = reinterpret_cast<PMapEntry<K, V>*>(p);
            v(e->next.raw());
            if constexpr (detail::IsHandle<K>::value) v(e->key.raw());
            if constexpr (detail::IsHandle<V>::value) v(e->value.raw());
        };
        return d;
    }
};

template <class K, class V>
struct PcType<PMap<K, V>> {
    static BehaviorDescriptor describe() {
        BehaviorDescriptor d;
        d.name =
            "pc.Map<" + detail::valueTypeName<K>() + "," + detail::valueTypeName<V>() + ">";
        d.payloadSize = sizeof(PMap<K, V>);
        d.forEachChild = [](std::byte* p, uint32_t, const ChildVisitor& v) {
            v(reinterpret_cast<PMap<K, V>*>(p)->buckets.raw());
        };
        return d;
    }
};

// Repeated upsert of src's entries into dst; src unchanged.
template <class K, class V, class Combine>
void map_merge(PMap<K, V>& dst, const PMap<K, V>& src, Combine&& combine) {
    src.forEach([&](const auto& storedKey, const auto& storedVal) {
        if constexpr (std::is_same_v<K, Handle<PString>>) {
            // re-wrap the stored key as a handle for hashing/equality
            Handle<PString> k(storedKey.raw());
            if constexpr (detail::IsHandle<V>::value) {
                using U = typename detail::IsHandle<V>::target;
                dst.upsert(k, Handle<U>(storedVal.raw()), combine);
            } else {
                dst.upsert(k, storedVal, combine);
            }
        } else {
            if constexpr (detail::IsHandle<V>::value) {
                using U = typename detail::IsHandle<V>::target;
                dst.upsert(storedKey, Handle<U>(storedVal.raw()), combine);
            } else {
                dst.upsert(storedKey, storedVal, combine);
            }
        }
    });
}

}  // namespace pc

#endif
