#include <doctest.h>

#include <cstring>
#include <random>
#include <set>
#include <vector>

#include "pc/object_model.hpp"

using namespace pc;

namespace pc {
// Test-only window into allocator internals.
struct BlockInspector {
    static const auto& buckets(const AllocationBlock& b) { return b.freeBuckets_; }
    static const auto& recycleLists(const AllocationBlock& b) { return b.recycleLists_; }
};
}  // namespace pc

namespace {

struct Numbers {
    double vals[100];
};

struct DataPoint {
    Member<Numbers> data;
};

struct Wrapper {
    Member<DataPoint> pt;
    int64_t tag = 0;
};

struct Small {
    int64_t x = 0;
};

struct SmallToo {
    int64_t y = 0;
};

}  // namespace

template <>
struct pc::PcType<Numbers> {
    static BehaviorDescriptor describe() {
        return {.name = "test.Numbers", .payloadSize = sizeof(Numbers)};
    }
};

template <>
struct pc::PcType<DataPoint> {
    static BehaviorDescriptor describe() {
        BehaviorDescriptor d;
        d.name = "test.DataPoint";
        d.payloadSize = sizeof(DataPoint);
        d.forEachChild = [](std::byte* p, uint32_t, const ChildVisitor& v) {
            visitHandleMembers<DataPoint>(p, v, &DataPoint::data);
        };
        return d;
    }
};

template <>
struct pc::PcType<Wrapper> {
    static BehaviorDescriptor describe() {
        BehaviorDescriptor d;
        d.name = "test.Wrapper";
        d.payloadSize = sizeof(Wrapper);
        d.forEachChild = [](std::byte* p, uint32_t, const ChildVisitor& v) {
            visitHandleMembers<Wrapper>(p, v, &Wrapper::pt);
        };
        return d;
    }
};

template <>
struct pc::PcType<Small> {
    static BehaviorDescriptor describe() {
        return {.name = "test.Small", .payloadSize = sizeof(Small)};
    }
};

template <>
struct pc::PcType<SmallToo> {
    static BehaviorDescriptor describe() {
        return {.name = "test.SmallToo", .payloadSize = sizeof(SmallToo)};
    }
};

namespace {

Handle<DataPoint> buildDataPoint() {
    auto nums = make_object<Numbers>();
    for (int i = 0; i < 100; ++i) nums->vals[i] = 1.0 * i;
    auto dp = make_object<DataPoint>();
    dp->data = nums;
    return dp;
}

}  // namespace

TEST_CASE("simple type encoding") {
    TypeCode d = typeCodeOf<double>();
    CHECK(isSimpleType(d));
    CHECK(simpleTypeSize(d) == 8);
    CHECK(typeCodeOf<int32_t>() == simpleTypeCode(4));
}

TEST_CASE("registration is idempotent and conflicts are rejected") {
    TypeCode a = typeCodeOf<DataPoint>();
    TypeCode b = TypeRegistry::instance().registerType(PcType<DataPoint>::describe());
    CHECK(a == b);
    CHECK_FALSE(isSimpleType(a));
    CHECK(TypeRegistry::instance().knows(a));

    BehaviorDescriptor bad = PcType<DataPoint>::describe();
    bad.payloadSize += 8;
    CHECK_THROWS_AS(TypeRegistry::instance().registerType(bad), RegistrationConflict);
}

TEST_CASE("distinct complex types get distinct resolvable codes") {
    TypeCode a = typeCodeOf<Small>();
    TypeCode b = typeCodeOf<SmallToo>();
    CHECK(a != b);
    CHECK(TypeRegistry::instance().resolve(a).name == "test.Small");
    CHECK(TypeRegistry::instance().resolve(b).name == "test.SmallToo");
    // manifest: one "code<TAB>name" line per entry
    std::string m = TypeRegistry::instance().manifest();
    CHECK(m.find(std::to_string(a) + "\ttest.Small\n") != std::string::npos);
    CHECK(m.find(std::to_string(b) + "\ttest.SmallToo\n") != std::string::npos);
}

TEST_CASE("make_block basics") {
    auto b = make_block(1 << 20);
    CHECK(b->state() == BlockState::Active);
    CHECK(b->highWater() == sizeof(BlockHeader));
    CHECK(b->activeObjectCount() == 0);
    CHECK(active_block() == b);
    CHECK_THROWS_AS(make_block(sizeof(BlockHeader)), InvalidCapacity);
    CHECK(active_block() == b);  // failed creation does not disturb the active block

    SUBCASE("old block with a live object becomes inactive-managed") {
        auto h = make_object<Small>();
        auto b2 = make_block(1 << 16);
        CHECK(b->state() == BlockState::InactiveManaged);
        CHECK(active_block() == b2);
        h = nullptr;  // last handle: block reclaimed
        CHECK(b->activeObjectCount() == 0);
        detach_active_block();
    }
    SUBCASE("old empty block is reclaimed immediately") {
        auto b2 = make_block(1 << 16);
        CHECK(active_block() == b2);
        // b is out of the address index now: handles cannot resolve into it
        CHECK(detail::blockOf(b->base() + 64) == nullptr);
        detach_active_block();
    }
    detach_active_block();
}

TEST_CASE("object graph from a vector-of-datapoints style program") {
    auto blk = make_block(1 << 20);
    auto dp = buildDataPoint();
    CHECK(dp->data->vals[5] == 5.0);
    CHECK(blk->activeObjectCount() == 2);
    CHECK(dp.headerPtr()->refCount == 1);
    CHECK(dp->data.typeCode() == typeCodeOf<Numbers>());

    SUBCASE("nulling the root frees the whole graph") {
        uint64_t hw = blk->highWater();
        dp = nullptr;
        CHECK(blk->activeObjectCount() == 0);
        // lightweight reuse: freed chunks are available again
        auto dp2 = buildDataPoint();
        CHECK(blk->highWater() == hw);
        dp2 = nullptr;
    }
    detach_active_block();
}

TEST_CASE("exhaustion raises OutOfBlockMemory and leaves the block unchanged") {
    auto blk = make_block(sizeof(BlockHeader) + sizeof(ObjectHeader) + sizeof(Small) + 1);
    auto h = make_object<Small>();
    uint64_t hw = blk->highWater();
    uint64_t faults = counters().allocFaults;
    CHECK_THROWS_AS(make_object<Small>(), OutOfBlockMemory);
    CHECK(blk->highWater() == hw);
    CHECK(counters().allocFaults == faults + 1);
    h = nullptr;
    detach_active_block();
}

TEST_CASE("object policies") {
    auto blk = make_block(1 << 16);

    SUBCASE("no-refcount objects are never reclaimed") {
        auto h = make_object_with_policy<Small>(ObjectPolicy::NoRefCount);
        CHECK(h.headerPtr()->policy == ObjectPolicy::NoRefCount);
        CHECK(blk->activeObjectCount() == 0);  // not tracked
        auto* hdr = h.headerPtr();
        uint64_t hw = blk->highWater();
        h = nullptr;
        // space not returned: the next allocation bumps past it
        auto h2 = make_object<Small>();
        CHECK(h2.headerPtr() != hdr);
        CHECK(blk->highWater() > hw);
        h2 = nullptr;
    }

    SUBCASE("unique ownership: one handle, immediate deallocation") {
        auto h = make_object_with_policy<Small>(ObjectPolicy::UniqueOwnership);
        CHECK(blk->activeObjectCount() == 1);
        CHECK_THROWS_AS([&] { Handle<Small> copy(h); }(), PcError);
        auto* hdr = h.headerPtr();
        h = nullptr;
        CHECK(blk->activeObjectCount() == 0);
        auto h2 = make_object<Small>();  // freed slot comes right back
        CHECK(h2.headerPtr() == hdr);
        h2 = nullptr;
    }
    detach_active_block();
}

TEST_CASE("same-block handle assignment adjusts refcounts without copying") {
    auto blk = make_block(1 << 16);
    auto a = make_object<Small>();
    auto b = make_object<Small>();
    a->x = 1;
    b->x = 2;
    uint64_t copies = counters().deepCopies;
    Handle<Small> c = a;
    CHECK(a.headerPtr()->refCount == 2);
    c = b;
    CHECK(a.headerPtr()->refCount == 1);
    CHECK(b.headerPtr()->refCount == 2);
    CHECK(counters().deepCopies == copies);
    a = nullptr; b = nullptr; c = nullptr;
    detach_active_block();
}

TEST_CASE("cross-block assignment deep-copies the whole reachable graph") {
    auto blkA = make_block(1 << 20);
    auto dpA = buildDataPoint();
    auto blkB = make_block(1 << 20);
    CHECK(blkA->state() == BlockState::InactiveManaged);

    uint64_t copies = counters().deepCopies;
    auto w = make_object<Wrapper>();
    w->tag = 7;
    w->pt = dpA;  // triggers the deep copy into blkB
    CHECK(counters().deepCopies == copies + 2);  // DataPoint + Numbers
    CHECK(w->pt->data->vals[5] == 5.0);
    CHECK(blkB->contains(w->pt.get()));
    CHECK(blkB->contains(w->pt->data.get()));

    SUBCASE("relocation closure: every stored handle targets inside the block") {
        set_block_root(*blkB, w);
        size_t seen = 0;
        scan_block_handles(*blkB, [&](const StoredHandle& sh) {
            ++seen;
            if (sh.offset != 0) {
                const std::byte* t = detail::storedTarget(sh);
                CHECK(blkB->contains(t));
            }
        });
        CHECK(seen == 2);
    }

    SUBCASE("shared subgraphs are copied once") {
        auto w2 = make_object<Wrapper>();
        uint64_t before = counters().deepCopies;
        w2->pt = dpA;  // same source graph again: fresh assignment copies again
        CHECK(counters().deepCopies == before + 2);
        w2 = nullptr;
    }

    dpA = nullptr;
    w = nullptr;
    detach_active_block();
}

TEST_CASE("allocator policy: no-reuse offsets are strictly increasing") {
    auto blk = make_block(1 << 16, AllocPolicy::NoReuse);
    std::vector<uint64_t> offsets;
    for (int i = 0; i < 8; ++i) {
        auto h = make_object<Small>();
        offsets.push_back(
            static_cast<uint64_t>(reinterpret_cast<std::byte*>(h.headerPtr()) - blk->base()));
        h = nullptr;  // freed, but space must not come back
    }
    for (size_t i = 1; i < offsets.size(); ++i) CHECK(offsets[i] > offsets[i - 1]);
    detach_active_block();
}

TEST_CASE("allocator policy: lightweight reuse returns the freed chunk") {
    auto blk = make_block(1 << 16, AllocPolicy::LightweightReuse);
    auto a = make_object<Numbers>();
    auto* slot = a.headerPtr();
    auto keep = make_object<Small>();  // prevents trivial bump coincidence
    a = nullptr;
    auto b = make_object<Numbers>();
    CHECK(b.headerPtr() == slot);
    b = nullptr; keep = nullptr;
    detach_active_block();
}

TEST_CASE("allocator policy: recycling uses per-type slot lists") {
    auto blk = make_block(1 << 16, AllocPolicy::Recycling);
    auto a = make_object<Small>();
    auto* slot = a.headerPtr();
    a = nullptr;
    CHECK(BlockInspector::recycleLists(*blk).at(typeCodeOf<Small>()).size() == 1);

    SUBCASE("zero-arg construction of the same type reuses the identical slot") {
        auto b = make_object<Small>();
        CHECK(b.headerPtr() == slot);
        b = nullptr;
    }
    SUBCASE("a different same-size type does not see the recycled slot") {
        uint64_t hw = blk->highWater();
        auto b = make_object<SmallToo>();
        CHECK(b.headerPtr() != slot);
        CHECK(blk->highWater() > hw);
        b = nullptr;
    }
    detach_active_block();
}

TEST_CASE("bucket law on the free lists") {
    auto blk = make_block(1 << 16, AllocPolicy::LightweightReuse);
    auto a = make_object<Small>();
    auto b = make_object<Numbers>();
    auto c = make_object<DataPoint>();
    a = nullptr; b = nullptr; c = nullptr;
    const auto& buckets = BlockInspector::buckets(*blk);
    size_t chunks = 0;
    for (size_t i = 0; i < buckets.size(); ++i) {
        for (const auto& ch : buckets[i]) {
            ++chunks;
            CHECK(bucketOf(ch.size) == i);
        }
    }
    CHECK(chunks >= 2);  // Small and DataPoint may merge via reuse; Numbers is distinct
    detach_active_block();
}

TEST_CASE("export/import: zero-copy round trip") {
    auto blk = make_block(1 << 20);
    auto dp = buildDataPoint();
    set_block_root(*blk, dp);
    auto bytes = export_block(*blk);
    CHECK(bytes.size() == 28 + blk->highWater());
    CHECK(std::memcmp(bytes.data(), "PCB1", 4) == 0);

    counters().importFixups = 0;
    auto imp = import_block(bytes);
    CHECK(counters().importFixups == 0);
    CHECK(imp->state() == BlockState::InactiveUnmanaged);
    CHECK(imp->base() != blk->base());
    auto root = get_block_root<DataPoint>(*imp);
    CHECK(root->data->vals[5] == 5.0);
    for (int i = 0; i < 100; ++i) CHECK(root->data->vals[i] == 1.0 * i);

    SUBCASE("two imports land at different bases and agree") {
        auto imp2 = import_block(bytes);
        CHECK(imp2->base() != imp->base());
        auto r2 = get_block_root<DataPoint>(*imp2);
        CHECK(std::memcmp(r2->data.get(), root->data.get(), sizeof(Numbers)) == 0);
        discard_block(imp2);
    }

    SUBCASE("mutating an imported block is an error") {
        auto r = get_block_root<DataPoint>(*imp);
        CHECK_THROWS_AS(r->data = nullptr, FrozenBlockMutation);
    }

    discard_block(imp);
    dp = nullptr;
    root = nullptr;
    detach_active_block();
}

TEST_CASE("export/import: empty block and corruption") {
    auto blk = make_block(1 << 12);
    auto bytes = export_block(*blk);
    CHECK(bytes.size() == 28 + sizeof(BlockHeader));
    auto imp = import_block(bytes);
    CHECK(imp->highWater() == sizeof(BlockHeader));
    CHECK(imp->activeObjectCount() == 0);
    discard_block(imp);

    CHECK_THROWS_AS(import_block(bytes.data(), 10), CorruptBlock);
    CHECK_THROWS_AS(import_block(bytes.data(), bytes.size() - 1), CorruptBlock);
    auto garbled = bytes;
    garbled[0] = std::byte{'X'};
    CHECK_THROWS_AS(import_block(garbled), CorruptBlock);
    detach_active_block();
}

TEST_CASE("refcount conservation under random handle shuffling") {
    auto blk = make_block(1 << 18);
    std::mt19937 rng(1234);
    std::vector<Handle<Small>> handles;
    std::vector<Handle<Small>> owners;
    for (int i = 0; i < 10; ++i) {
        owners.push_back(make_object<Small>());
        owners.back()->x = i;
    }
    for (int step = 0; step < 500; ++step) {
        switch (rng() % 3) {
            case 0:
                handles.push_back(owners[rng() % owners.size()]);
                break;
            case 1:
                if (!handles.empty()) {
                    handles[rng() % handles.size()] = owners[rng() % owners.size()];
                }
                break;
            case 2:
                if (!handles.empty()) {
                    handles.erase(handles.begin() + static_cast<ptrdiff_t>(rng() % handles.size()));
                }
                break;
        }
    }
    // conservation: each object's refCount equals the number of live handles on it
    std::unordered_map<const ObjectHeader*, uint32_t> expect;
    for (auto& h : owners) expect[h.headerPtr()]++;
    for (auto& h : handles) expect[h.headerPtr()]++;
    for (auto& [hdr, n] : expect) CHECK(hdr->refCount == n);
    handles.clear();
    owners.clear();
    CHECK(blk->activeObjectCount() == 0);
    detach_active_block();
}

TEST_CASE("randomized relocation property: build, export, import, compare") {
    std::mt19937 rng(99);
    for (int round = 0; round < 20; ++round) {
        auto blk = make_block(1 << 18);
        auto w = make_object<Wrapper>();
        w->tag = static_cast<int64_t>(rng());
        auto dp = make_object<DataPoint>();
        auto nums = make_object<Numbers>();
        for (auto& v : nums->vals) v = std::uniform_real_distribution<>(-1, 1)(rng);
        dp->data = nums;
        w->pt = dp;
        set_block_root(*blk, w);
        Numbers before = *nums;
        int64_t tagBefore = w->tag;

        auto bytes = export_block(*blk);
        nums = nullptr; dp = nullptr; w = nullptr;
        detach_active_block();

        auto imp = import_block(bytes);
        auto r = get_block_root<Wrapper>(*imp);
        CHECK(r->tag == tagBefore);
        CHECK(std::memcmp(r->pt->data.get(), &before, sizeof(Numbers)) == 0);
        r = nullptr;
        discard_block(imp);
    }
}
