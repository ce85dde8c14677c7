#include "malles/common.hpp"

#include <array>
#include <cstdio>

namespace malles {

namespace {

// Howard Hinnant's days-from-civil algorithm.
std::int64_t days_from_civil(int y, unsigned m, unsigned d) {
    y -= m <= 2;
    const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

struct Civil {
    int year;
    unsigned month;
    unsigned day;
};

Civil civil_from_days(std::int64_t z) {
    z += 719468;
    const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    const std::int64_t y = static_cast<std::int64_t>(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    const unsigned d = doy - (153 * mp + 2) / 5 + 1;
    const unsigned m = mp < 10 ? mp + 3 : mp - 9;
    return {static_cast<int>(y + (m <= 2)), m, d};
}

unsigned days_in_month(int y, unsigned m) {
    static constexpr std::array<unsigned, 12> kDays{31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
    const bool leap = (y % 4 == 0 && y % 100 != 0) || y % 400 == 0;
    return m == 2 && leap ? 29 : kDays[m - 1];
}

int parse_fixed_int(std::string_view text, std::size_t pos, std::size_t len, std::string_view whole) {
    if (pos + len > text.size()) throw DataError("malformed timestamp: " + std::string(whole));
    int out = 0;
    auto [ptr, ec] = std::from_chars(text.data() + pos, text.data() + pos + len, out);
    if (ec != std::errc() || ptr != text.data() + pos + len)
        throw DataError("malformed timestamp: " + std::string(whole));
    return out;
}

}  // namespace

Money Money::parse(std::string_view text) {
    const std::string s = trim(text);
    if (s.empty()) throw DataError("empty currency value");
    std::size_t i = 0;
    bool negative = false;
    if (s[0] == '-' || s[0] == '+') {
        negative = s[0] == '-';
        i = 1;
    }
    std::int64_t whole = 0;
    std::int64_t frac = 0;
    int frac_digits = 0;
    bool seen_digit = false;
    bool in_frac = false;
    for (; i < s.size(); ++i) {
        const char c = s[i];
        if (c == '.' && !in_frac) {
            in_frac = true;
            continue;
        }
        if (c < '0' || c > '9') throw DataError("malformed currency value: " + s);
        seen_digit = true;
        if (in_frac) {
            if (++frac_digits > 2) throw DataError("currency value has more than two decimals: " + s);
            frac = frac * 10 + (c - '0');
        } else {
            whole = whole * 10 + (c - '0');
        }
    }
    if (!seen_digit) throw DataError("malformed currency value: " + s);
    if (frac_digits == 1) frac *= 10;
    const std::int64_t cents = whole * 100 + frac;
    return Money(negative ? -cents : cents);
}

std::string Money::str() const {
    const std::int64_t a = cents_ < 0 ? -cents_ : cents_;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s%lld.%02lld", cents_ < 0 ? "-" : "", static_cast<long long>(a / 100),
                  static_cast<long long>(a % 100));
    return buf;
}

Timestamp make_timestamp(int year, int month, int day, int hour, int minute, int second) {
    return days_from_civil(year, static_cast<unsigned>(month), static_cast<unsigned>(day)) * 86400 + hour * 3600 +
           minute * 60 + second;
}

Timestamp parse_timestamp(std::string_view text) {
    const std::string s = trim(text);
    if (s.size() != 10 && s.size() != 19) throw DataError("malformed timestamp: " + s);
    if (s[4] != '-' || s[7] != '-') throw DataError("malformed timestamp: " + s);
    const int y = parse_fixed_int(s, 0, 4, s);
    const int mo = parse_fixed_int(s, 5, 2, s);
    const int d = parse_fixed_int(s, 8, 2, s);
    int hh = 0, mm = 0, ss = 0;
    if (s.size() == 19) {
        if ((s[10] != 'T' && s[10] != ' ') || s[13] != ':' || s[16] != ':')
            throw DataError("malformed timestamp: " + s);
        hh = parse_fixed_int(s, 11, 2, s);
        mm = parse_fixed_int(s, 14, 2, s);
        ss = parse_fixed_int(s, 17, 2, s);
    }
    if (mo < 1 || mo > 12 || d < 1 || d > static_cast<int>(days_in_month(y, static_cast<unsigned>(mo))) || hh > 23 ||
        mm > 59 || ss > 59)
        throw DataError("timestamp out of range: " + s);
    return make_timestamp(y, mo, d, hh, mm, ss);
}

std::string format_timestamp(Timestamp ts) {
    std::int64_t days = ts / 86400;
    std::int64_t secs = ts % 86400;
    if (secs < 0) {
        secs += 86400;
        --days;
    }
    const Civil c = civil_from_days(days);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02d:%02d:%02d", c.year, c.month, c.day,
                  static_cast<int>(secs / 3600), static_cast<int>(secs / 60 % 60), static_cast<int>(secs % 60));
    return buf;
}

MonthIndex month_of(Timestamp ts) {
    std::int64_t days = ts / 86400;
    if (ts % 86400 < 0) --days;
    const Civil c = civil_from_days(days);
    return c.year * 12 + static_cast<int>(c.month) - 1;
}

Timestamp month_start(MonthIndex month) { return make_timestamp(month / 12, month % 12 + 1, 1); }

MonthIndex parse_month(std::string_view text) {
    const std::string s = trim(text);
    if (s.size() != 7 || s[4] != '-') throw DataError("malformed month: " + s);
    const int y = parse_fixed_int(s, 0, 4, s);
    const int m = parse_fixed_int(s, 5, 2, s);
    if (m < 1 || m > 12) throw DataError("month out of range: " + s);
    return y * 12 + m - 1;
}

std::string format_month(MonthIndex month) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d-%02d", month / 12, month % 12 + 1);
    return buf;
}

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t value) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
    return buf;
}

std::string format_double(double value) {
    if (value == 0.0) return "0";  // folds -0
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value);
    if (ec != std::errc()) throw Error("cannot format number");
    return std::string(buf, ptr);
}

double parse_double(std::string_view text) {
    const std::string s = trim(text);
    double out = 0.0;
    const char* first = s.data();
    if (!s.empty() && s[0] == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), out);
    if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) throw DataError("malformed number: " + s);
    return out;
}

std::int64_t parse_int(std::string_view text) {
    const std::string s = trim(text);
    std::int64_t out = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) throw DataError("malformed integer: " + s);
    return out;
}

std::string trim(std::string_view text) {
    const auto b = text.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = text.find_last_not_of(" \t\r\n");
    return std::string(text.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view text, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = text.find(sep, start);
        out.emplace_back(text.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

}  // namespace malles
