#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <vector>

#include "prue/rng.hpp"

using namespace prue;

TEST_CASE("fnv1a64 matches reference vectors") {
    // Published FNV-1a test values.
    CHECK(fnv1a64("") == 0xcbf29ce484222325ull);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
    CHECK(fnv1a64("foobar") == 0x85944171f73967e8ull);
}

TEST_CASE("streams are deterministic and name-separated") {
    Rng a = derive(42, "init");
    Rng b = derive(42, "init");
    Rng c = derive(42, "shuffle");
    std::vector<std::uint64_t> va, vb, vc;
    for (int i = 0; i < 16; ++i) {
        va.push_back(a.next_u64());
        vb.push_back(b.next_u64());
        vc.push_back(c.next_u64());
    }
    CHECK(va == vb);
    CHECK(va != vc);
}

TEST_CASE("next_double stays in [0,1)") {
    Rng r(7);
    for (int i = 0; i < 10000; ++i) {
        double x = r.next_double();
        CHECK(x >= 0.0);
        CHECK(x < 1.0);
    }
}

TEST_CASE("below is in range and covers all residues") {
    Rng r(123);
    std::vector<int> seen(10, 0);
    for (int i = 0; i < 5000; ++i) {
        auto x = r.below(10);
        REQUIRE(x < 10);
        seen[static_cast<std::size_t>(x)]++;
    }
    for (int count : seen) CHECK(count > 300);
}

TEST_CASE("normal draws have sane first moments") {
    Rng r(99);
    double sum = 0, sum2 = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        double x = r.normal();
        sum += x;
        sum2 += x * x;
    }
    double mean = sum / n;
    double var = sum2 / n - mean * mean;
    CHECK(std::abs(mean) < 0.05);
    CHECK(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("shuffle is a seeded permutation") {
    std::vector<int> v1{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    std::vector<int> v2 = v1;
    Rng r1(5), r2(5);
    shuffle(v1, r1);
    shuffle(v2, r2);
    CHECK(v1 == v2);
    std::vector<int> sorted = v1;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});

    std::vector<int> v3{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    Rng r3(6);
    shuffle(v3, r3);
    CHECK(v3 != v1);
}
