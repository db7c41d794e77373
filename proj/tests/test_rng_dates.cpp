#include <doctest.h>

#include <cmath>
#include <set>

#include "ehrseq/dates.hpp"
#include "ehrseq/rng.hpp"

using namespace ehrseq;

TEST_CASE("splitmix64 reference sequence") {
    // Published test vector for the standard constants, state starting at 0.
    std::uint64_t s = 0;
    CHECK(rng::splitmix64_next(s) == 0xe220a8397b1dcdafULL);
    CHECK(rng::splitmix64_next(s) == 0x6e789e6aa1b965f4ULL);
    CHECK(rng::splitmix64_next(s) == 0x06c45d188009454fULL);
}

TEST_CASE("substreams are deterministic and distinct") {
    rng::Xoshiro256 a = rng::Xoshiro256::substream(7, 3);
    rng::Xoshiro256 b = rng::Xoshiro256::substream(7, 3);
    rng::Xoshiro256 c = rng::Xoshiro256::substream(7, 4);
    bool same = true, differ = false;
    for (int i = 0; i < 64; ++i) {
        std::uint64_t va = a.next(), vb = b.next(), vc = c.next();
        same = same && va == vb;
        differ = differ || va != vc;
    }
    CHECK(same);
    CHECK(differ);
}

TEST_CASE("uniform01 stays in the half-open unit interval") {
    rng::Xoshiro256 g = rng::Xoshiro256::substream(1, 0);
    for (int i = 0; i < 10000; ++i) {
        double u = g.uniform01();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
    }
}

TEST_CASE("below(n) is bounded and covers small ranges") {
    rng::Xoshiro256 g = rng::Xoshiro256::substream(2, 0);
    std::set<std::uint64_t> seen;
    for (int i = 0; i < 5000; ++i) {
        std::uint64_t v = g.below(7);
        REQUIRE(v < 7);
        seen.insert(v);
    }
    CHECK(seen.size() == 7);
    CHECK(g.below(1) == 0);
}

TEST_CASE("chance() honors degenerate probabilities") {
    rng::Xoshiro256 g = rng::Xoshiro256::substream(3, 0);
    for (int i = 0; i < 1000; ++i) {
        CHECK_FALSE(g.chance(0.0));
        CHECK(g.chance(1.0));
    }
}

TEST_CASE("geometric and negative binomial match their means") {
    rng::Xoshiro256 g = rng::Xoshiro256::substream(4, 0);
    const double p = 0.5;
    const int n = 20000;
    double sum = 0;
    for (int i = 0; i < n; ++i) sum += double(g.geometric(p));
    double mean = sum / n;  // expect (1-p)/p = 1.0
    CHECK(mean == doctest::Approx(1.0).epsilon(0.05));

    sum = 0;
    for (int i = 0; i < n; ++i) sum += double(g.negative_binomial(3, 0.4));
    mean = sum / n;  // expect r(1-p)/p = 4.5
    CHECK(mean == doctest::Approx(4.5).epsilon(0.05));
}

TEST_CASE("civil date conversions") {
    CHECK(dates::days_from_civil(1970, 1, 1) == 0);
    CHECK(dates::days_from_civil(1970, 1, 2) == 1);
    CHECK(dates::days_from_civil(1969, 12, 31) == -1);
    CHECK(dates::days_from_civil(2000, 3, 1) - dates::days_from_civil(2000, 2, 28) == 2);
    CHECK(dates::days_from_civil(1900, 3, 1) - dates::days_from_civil(1900, 2, 28) == 1);

    // round trip across several decades, including leap boundaries
    for (dates::Day d = dates::days_from_civil(1899, 12, 20);
         d <= dates::days_from_civil(2205, 1, 10); d += 97) {
        auto [y, m, day] = dates::civil_from_days(d);
        CHECK(dates::days_from_civil(y, m, day) == d);
    }
}

TEST_CASE("date parsing is strict") {
    CHECK(dates::parse_date("2001-02-28").has_value());
    CHECK(*dates::parse_date("1970-01-01") == 0);
    CHECK_FALSE(dates::parse_date("2001-02-29").has_value());  // not a leap year
    CHECK(dates::parse_date("2000-02-29").has_value());
    CHECK_FALSE(dates::parse_date("2001-13-01").has_value());
    CHECK_FALSE(dates::parse_date("2001-00-10").has_value());
    CHECK_FALSE(dates::parse_date("2001-1-01").has_value());
    CHECK_FALSE(dates::parse_date("20010101").has_value());
    CHECK_FALSE(dates::parse_date("2001-01-01x").has_value());
    CHECK_FALSE(dates::parse_date("").has_value());
    CHECK_THROWS(dates::date_or_throw("not-a-date"));
}

TEST_CASE("format_date round trips") {
    for (dates::Day d : {dates::days_from_civil(1995, 1, 1), dates::days_from_civil(2024, 2, 29),
                         dates::days_from_civil(1899, 12, 31)}) {
        CHECK(*dates::parse_date(dates::format_date(d)) == d);
    }
    CHECK(dates::format_date(0) == "1970-01-01");
}
