// pcbench: vectorized range filter over 10^7 values vs. the per-row
// virtual-dispatch baseline.  Exit 1 if the two disagree on the result.

#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "demo_support.hpp"

int main(int argc, char** argv) {
    CLI::App app{"vectorized filter bench"};
    size_t count = 10000000;
    uint64_t seed = 42;
    app.add_option("--count", count, "number of 8-byte values");
    app.add_option("--seed", seed, "data generation seed");
    CLI11_PARSE(app, argc, argv);

    auto values = demo::benchValues(count, seed);
    const int64_t lo = 250000, hi = 750000;

    auto base = demo::benchVirtualFilter(values, lo, hi);
    auto vec = demo::benchVectorizedFilter(values, lo, hi);

    std::cout << "count=" << count << "\nmatches=" << vec.matches << "\n";
    std::printf("baseline_seconds=%.6f\nvectorized_seconds=%.6f\nspeedup=%.2f\n",
                base.seconds, vec.seconds, base.seconds / vec.seconds);

    if (base.matches != vec.matches || base.checksum != vec.checksum) {
        std::cerr << "result mismatch between kernels\n";
        return 1;
    }
    return 0;
}
