#include <catch2/catch_amalgamated.hpp>

#include "arlab/rng.hpp"

#include <cmath>
#include <vector>

using arlab::RngStream;

TEST_CASE("same seed and name reproduce the stream") {
    RngStream a(42, "test");
    RngStream b(42, "test");
    for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
}

TEST_CASE("different names give unrelated streams") {
    RngStream a(42, "alpha");
    RngStream b(42, "beta");
    int same = 0;
    for (int i = 0; i < 64; ++i) same += a.next_u64() == b.next_u64();
    REQUIRE(same == 0);
}

TEST_CASE("child streams are independent of parent draw position") {
    RngStream a(7, "root");
    RngStream c1 = a.child("x");
    a.uniform();
    a.uniform();
    RngStream c2 = a.child("x");
    REQUIRE(c1.next_u64() == c2.next_u64());
}

TEST_CASE("uniform covers [0,1) with the right mean") {
    RngStream rng(123, "uniform");
    const int n = 100000;
    double sum = 0, mn = 1, mx = 0;
    for (int i = 0; i < n; ++i) {
        double u = rng.uniform();
        sum += u;
        mn = std::min(mn, u);
        mx = std::max(mx, u);
    }
    REQUIRE(sum / n == Catch::Approx(0.5).margin(0.01));
    REQUIRE(mn >= 0.0);
    REQUIRE(mx < 1.0);
}

TEST_CASE("normal has unit variance") {
    RngStream rng(123, "normal");
    const int n = 100000;
    double sum = 0, sq = 0;
    for (int i = 0; i < n; ++i) {
        double x = rng.normal();
        sum += x;
        sq += x * x;
    }
    double mean = sum / n;
    double var = sq / n - mean * mean;
    REQUIRE(mean == Catch::Approx(0.0).margin(0.02));
    REQUIRE(var == Catch::Approx(1.0).margin(0.03));
}
