#ifndef PC_TESTS_ENGINE_FIXTURES_HPP
#define PC_TESTS_ENGINE_FIXTURES_HPP

// Shared in-block record types and dataset builders for engine-level tests.

#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "pc/containers.hpp"
#include "pc/engine.hpp"

namespace fixtures {

struct Emp {
    int64_t id = 0;
    double salary = 0;
    int64_t dept = 0;
    pc::Member<pc::PString> name;
};

// A 2-d accumulator with a registered combine (aggregation tests).
struct Vec2 {
    double x = 0;
    double y = 0;
    int64_t n = 0;
};

struct HostEmp {
    int64_t id;
    double salary;
    int64_t dept;
    std::string name;
};

}  // namespace fixtures

namespace pc {

template <>
struct PcType<fixtures::Emp> {
    static BehaviorDescriptor describe() {
        using fixtures::Emp;
        BehaviorDescriptor d;
        d.name = "test.Emp";
        d.payloadSize = sizeof(Emp);
        d.forEachChild = [](std::byte* p, uint32_t, const ChildVisitor& v) {
            v(reinterpret_cast<Emp*>(p)->name.raw());
        };
        d.getMember = [](const std::byte* p, std::string_view a) -> FieldRef {
            const auto* e = reinterpret_cast<const Emp*>(p);
            if (a == "id") return {reinterpret_cast<const std::byte*>(&e->id), FieldTag::Int64};
            if (a == "salary")
                return {reinterpret_cast<const std::byte*>(&e->salary), FieldTag::Double};
            if (a == "dept")
                return {reinterpret_cast<const std::byte*>(&e->dept), FieldTag::Int64};
            if (a == "name")
                return {reinterpret_cast<const std::byte*>(&e->name.raw()),
                        FieldTag::HandleField};
            return {};
        };
        d.callMethod = [](const std::byte* p, std::string_view m) -> ScalarValue {
            const auto* e = reinterpret_cast<const Emp*>(p);
            if (m == "getId") return e->id;
            if (m == "getSalary") return e->salary;
            if (m == "getDept") return e->dept;
            if (m == "getName")
                return e->name.isNull() ? ScalarValue(std::string())
                                        : ScalarValue(std::string(e->name->view()));
            return std::monostate{};
        };
        return d;
    }
};

template <>
struct PcType<fixtures::Vec2> {
    static BehaviorDescriptor describe() {
        using fixtures::Vec2;
        BehaviorDescriptor d;
        d.name = "test.Vec2";
        d.payloadSize = sizeof(Vec2);
        d.getMember = [](const std::byte* p, std::string_view a) -> FieldRef {
            const auto* v = reinterpret_cast<const Vec2*>(p);
            if (a == "x") return {reinterpret_cast<const std::byte*>(&v->x), FieldTag::Double};
            if (a == "y") return {reinterpret_cast<const std::byte*>(&v->y), FieldTag::Double};
            if (a == "n") return {reinterpret_cast<const std::byte*>(&v->n), FieldTag::Int64};
            return {};
        };
        d.callMethod = [](const std::byte* p, std::string_view m) -> ScalarValue {
            const auto* v = reinterpret_cast<const Vec2*>(p);
            if (m == "getX") return v->x;
            if (m == "getY") return v->y;
            if (m == "getN") return v->n;
            return std::monostate{};
        };
        d.combine = [](std::byte* dst, const std::byte* src) {
            auto* a = reinterpret_cast<Vec2*>(dst);
            const auto* b = reinterpret_cast<const Vec2*>(src);
            a->x += b->x;
            a->y += b->y;
            a->n += b->n;
        };
        return d;
    }
};

}  // namespace pc

namespace fixtures {

inline std::vector<HostEmp> hostEmps(size_t n, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> sal(1000.0, 200000.0);
    std::vector<HostEmp> out;
    out.reserve(n);
    for (size_t i = 0; i < n; ++i) {
        out.push_back({int64_t(i), sal(rng), int64_t(rng() % 8),
                       "n" + std::to_string(rng() % 50)});
    }
    return out;
}

inline pc::eng::MaterializedList empSet(const std::vector<HostEmp>& host, size_t pageSize,
                                        const std::string& column) {
    return pc::eng::build_object_set(
        host.size(), pageSize,
        [&](size_t i) {
            auto h = pc::make_object<Emp>();
            h->id = host[i].id;
            h->salary = host[i].salary;
            h->dept = host[i].dept;
            h->name = pc::make_string(host[i].name);
            return pc::eng::as_any(h);
        },
        column);
}

// Reads an Emp back out of a result cell.
inline HostEmp readEmp(const pc::ScalarValue& cell) {
    const auto& r = std::get<pc::ObjRef>(cell);
    if (r.typeCode != pc::typeCodeOf<Emp>()) throw std::runtime_error("not an Emp cell");
    const auto* e = reinterpret_cast<const Emp*>(r.payload);
    return {e->id, e->salary, e->dept,
            e->name.isNull() ? std::string() : std::string(e->name->view())};
}

inline pc::eng::MaterializedList vec2Set(size_t n, size_t pageSize, const std::string& column) {
    return pc::eng::build_object_set(
        n, pageSize,
        [&](size_t i) {
            auto h = pc::make_object<Vec2>();
            h->x = double(i % 10);
            h->y = 1.0;
            h->n = int64_t(i % 5);
            return pc::eng::as_any(h);
        },
        column);
}

}  // namespace fixtures

#endif
