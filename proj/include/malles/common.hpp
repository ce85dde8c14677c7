#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace malles {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Input data violates a schema or precondition.
class DataError : public Error {
public:
    using Error::Error;
};

/// Caller passed arguments outside an operation's contract.
class InvalidArgument : public Error {
public:
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Money: exact two-decimal currency amounts stored as integer cents.

class Money {
public:
    constexpr Money() = default;
    static constexpr Money from_cents(std::int64_t cents) { return Money(cents); }
    /// Rounds to the nearest cent.
    static Money from_double(double amount) { return Money(std::llround(amount * 100.0)); }
    /// Parses "12", "12.3" or "12.34". More than two decimals is rejected.
    static Money parse(std::string_view text);

    constexpr std::int64_t cents() const { return cents_; }
    double value() const { return static_cast<double>(cents_) / 100.0; }
    std::string str() const;

    /// unit price after a fractional discount, rounded to the cent.
    Money discounted(double discount) const {
        return Money(std::llround(static_cast<double>(cents_) * (1.0 - discount)));
    }

    friend constexpr auto operator<=>(Money, Money) = default;

private:
    constexpr explicit Money(std::int64_t cents) : cents_(cents) {}
    std::int64_t cents_ = 0;
};

// ---------------------------------------------------------------------------
// Calendar time. Timestamps are UTC seconds since the Unix epoch; months are
// counted as year * 12 + (month - 1).

using Timestamp = std::int64_t;
using MonthIndex = int;

Timestamp parse_timestamp(std::string_view text);   // "YYYY-MM-DDTHH:MM:SS" or "YYYY-MM-DD"
std::string format_timestamp(Timestamp ts);
MonthIndex month_of(Timestamp ts);
Timestamp month_start(MonthIndex month);
MonthIndex parse_month(std::string_view text);      // "YYYY-MM"
std::string format_month(MonthIndex month);
Timestamp make_timestamp(int year, int month, int day, int hour = 0, int minute = 0, int second = 0);

// ---------------------------------------------------------------------------
// Seed derivation. Every per-item seed is a counter-based hash of a parent seed
// and an index, so results do not depend on evaluation order.

constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t index) {
    return splitmix64(splitmix64(parent) ^ splitmix64(index + 0x632be59bd9b4e019ULL));
}

std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t value);

// ---------------------------------------------------------------------------
// Number formatting. Doubles use the shortest representation that round-trips.

std::string format_double(double value);
double parse_double(std::string_view text);
std::int64_t parse_int(std::string_view text);

std::string trim(std::string_view text);
std::vector<std::string> split(std::string_view text, char sep);

}  // namespace malles
