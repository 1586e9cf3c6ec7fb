#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <stdexcept>
#include <string>

namespace fuxio {

// 6-hour cadence, in seconds.
constexpr std::int64_t kStepSeconds = 21600;

// Error taxonomy. The CLI maps these onto exit codes:
// ConfigError (and subclasses) -> 2, IoError -> 3, NumericError -> 4.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public ConfigError {
public:
    using ConfigError::ConfigError;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DataGapError : public IoError {
public:
    using IoError::IoError;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline double gelu(double x) {
    return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475));
}

inline double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475));
    const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014327;
    return cdf + x * pdf;
}

// Truncated normal in [-2s, 2s] by rejection.
inline double trunc_normal(std::mt19937_64& rng, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (;;) {
        const double x = dist(rng);
        if (std::abs(x) <= 2.0 * stddev) return x;
    }
}

// ---- calendar helpers (civil-from-days, Howard Hinnant's algorithm) ----

struct CivilDate {
    int year;
    int month;
    int day;
};

inline CivilDate civil_from_days(std::int64_t z) {
    z += 719468;
    const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    const std::int64_t y = static_cast<std::int64_t>(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    const unsigned d = doy - (153 * mp + 2) / 5 + 1;
    const unsigned m = mp + (mp < 10 ? 3 : -9);
    return {static_cast<int>(y + (m <= 2)), static_cast<int>(m), static_cast<int>(d)};
}

inline std::int64_t days_from_civil(int y, unsigned m, unsigned d) {
    y -= m <= 2;
    const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

inline bool is_leap(int y) {
    return (y % 4 == 0 && y % 100 != 0) || y % 400 == 0;
}

// 1-based day of year for a unix timestamp.
inline int day_of_year(std::int64_t ts) {
    const std::int64_t days = (ts >= 0 ? ts : ts - 86399) / 86400;
    const CivilDate cd = civil_from_days(days);
    return static_cast<int>(days - days_from_civil(cd.year, 1, 1)) + 1;
}

// Time-of-day phase in {0,1,2,3} for a 6-hourly timestamp.
inline int phase_of_day(std::int64_t ts) {
    std::int64_t sod = ts % 86400;
    if (sod < 0) sod += 86400;
    return static_cast<int>(sod / kStepSeconds);
}

// ISO 8601 basic format, e.g. 20200101T060000Z (filesystem-safe).
inline std::string format_timestamp(std::int64_t ts) {
    const std::int64_t days = (ts >= 0 ? ts : ts - 86399) / 86400;
    std::int64_t sod = ts - days * 86400;
    const CivilDate cd = civil_from_days(days);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%04d%02d%02dT%02d%02d%02dZ", cd.year, cd.month, cd.day,
                  static_cast<int>(sod / 3600), static_cast<int>(sod / 60 % 60),
                  static_cast<int>(sod % 60));
    return buf;
}

inline std::int64_t parse_timestamp(const std::string& s) {
    int y, mo, d, h, mi, sec;
    char t, z;
    if (std::sscanf(s.c_str(), "%4d%2d%2d%c%2d%2d%2d%c", &y, &mo, &d, &t, &h, &mi, &sec, &z) != 8 ||
        t != 'T' || z != 'Z') {
        throw IoError("unparseable timestamp: " + s);
    }
    return days_from_civil(y, static_cast<unsigned>(mo), static_cast<unsigned>(d)) * 86400 +
           h * 3600 + mi * 60 + sec;
}

}  // namespace fuxio
