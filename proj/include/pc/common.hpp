#ifndef PC_COMMON_HPP
#define PC_COMMON_HPP

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace pc {

class PcError : public std::runtime_error {
public:
    explicit PcError(const std::string& msg) : std::runtime_error(msg) {}
};

class OutOfBlockMemory : public PcError {
public:
    explicit OutOfBlockMemory(const std::string& msg = "out of block memory") : PcError(msg) {}
};

class InvalidCapacity : public PcError {
public:
    explicit InvalidCapacity(const std::string& msg) : PcError(msg) {}
};

class RegistrationConflict : public PcError {
public:
    explicit RegistrationConflict(const std::string& msg) : PcError(msg) {}
};

class CorruptBlock : public PcError {
public:
    explicit CorruptBlock(const std::string& msg) : PcError(msg) {}
};

class CyclicGraph : public PcError {
public:
    explicit CyclicGraph(const std::string& msg = "cyclic object graph in deep copy") : PcError(msg) {}
};

class FrozenBlockMutation : public PcError {
public:
    explicit FrozenBlockMutation(const std::string& msg = "mutation of frozen/unmanaged block")
        : PcError(msg) {}
};

class UnknownFunction : public PcError {
public:
    explicit UnknownFunction(const std::string& msg) : PcError(msg) {}
};

class TypeMismatch : public PcError {
public:
    explicit TypeMismatch(const std::string& msg) : PcError(msg) {}
};

// Process-wide instrumentation counters.  Tests and the acceptance suite read
// these to prove zero-copy movement (importFixups must stay 0) and to audit
// deep-copy traffic.
struct Counters {
    std::atomic<uint64_t> importFixups{0};    // per-object fixup work on block import
    std::atomic<uint64_t> deepCopies{0};      // objects copied by cross-block deep copy
    std::atomic<uint64_t> allocFaults{0};     // OutOfBlockMemory raised by allocators
    std::atomic<uint64_t> objectsMovedToSink{0};

    void reset() {
        importFixups = 0;
        deepCopies = 0;
        allocFaults = 0;
        objectsMovedToSink = 0;
    }
};

Counters& counters();

}  // namespace pc

#endif
