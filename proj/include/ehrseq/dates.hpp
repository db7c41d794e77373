#pragma once

// Calendar dates are ISO-8601 strings on disk and integer day numbers
// (days since 1970-01-01) in memory. Day arithmetic is plain integer
// arithmetic, which is all the windowing rules need.

#include <cstdint>
#include <cstdio>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace ehrseq::dates {

using Day = std::int32_t;

// Howard Hinnant's civil-date algorithms.
constexpr Day days_from_civil(int y, unsigned m, unsigned d) {
    y -= m <= 2;
    const int era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);             // [0, 399]
    const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;   // [0, 365]
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;            // [0, 146096]
    return era * 146097 + static_cast<int>(doe) - 719468;
}

struct Civil {
    int year;
    unsigned month;
    unsigned day;
};

constexpr Civil civil_from_days(Day z) {
    z += 719468;
    const int era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = static_cast<unsigned>(z - era * 146097);          // [0, 146096]
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    const int y = static_cast<int>(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);          // [0, 365]
    const unsigned mp = (5 * doy + 2) / 153;                               // [0, 11]
    const unsigned d = doy - (153 * mp + 2) / 5 + 1;                       // [1, 31]
    const unsigned m = mp + (mp < 10 ? 3 : -9);                            // [1, 12]
    return {y + (m <= 2), m, d};
}

constexpr bool is_leap(int y) {
    return y % 4 == 0 && (y % 100 != 0 || y % 400 == 0);
}

constexpr unsigned days_in_month(int y, unsigned m) {
    constexpr unsigned lengths[] = {31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
    if (m == 2 && is_leap(y)) return 29;
    return lengths[m - 1];
}

// Strict YYYY-MM-DD; rejects impossible calendar dates.
inline std::optional<Day> parse_date(std::string_view s) {
    if (s.size() != 10 || s[4] != '-' || s[7] != '-') return std::nullopt;
    auto digits = [](std::string_view t) -> std::optional<int> {
        int v = 0;
        for (char c : t) {
            if (c < '0' || c > '9') return std::nullopt;
            v = v * 10 + (c - '0');
        }
        return v;
    };
    auto y = digits(s.substr(0, 4));
    auto m = digits(s.substr(5, 2));
    auto d = digits(s.substr(8, 2));
    if (!y || !m || !d) return std::nullopt;
    if (*m < 1 || *m > 12) return std::nullopt;
    if (*d < 1 || static_cast<unsigned>(*d) > days_in_month(*y, static_cast<unsigned>(*m)))
        return std::nullopt;
    return days_from_civil(*y, static_cast<unsigned>(*m), static_cast<unsigned>(*d));
}

inline std::string format_date(Day day) {
    Civil c = civil_from_days(day);
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", c.year, c.month, c.day);
    return buf;
}

inline Day date_or_throw(std::string_view s) {
    auto d = parse_date(s);
    if (!d) throw std::runtime_error("invalid date '" + std::string(s) + "' (expected YYYY-MM-DD)");
    return *d;
}

}  // namespace ehrseq::dates
