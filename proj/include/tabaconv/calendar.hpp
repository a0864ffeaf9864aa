#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string_view>

namespace tabaconv {

// Calendar breakdown of a UTC instant (proleptic Gregorian).
struct CalendarParts {
  int year = 1970;
  int month = 1;    // 1..12
  int day = 1;      // 1..31
  int weekday = 0;  // Monday = 0 .. Sunday = 6
  int iso_week = 1; // 1..53
  int hour = 0;
  int minute = 0;
  int second = 0;
  int day_of_year = 1;  // 1..366
};

inline constexpr std::int64_t kMinEpochSeconds = -62135596800LL;  // 0001-01-01T00:00:00Z
inline constexpr std::int64_t kMaxEpochSeconds = 253402300799LL;  // 9999-12-31T23:59:59Z

// Throws ValueError outside [kMinEpochSeconds, kMaxEpochSeconds].
CalendarParts calendar_parts(std::int64_t epoch_seconds);

// Order of the eight timestamp components everywhere in the project.
enum TimestampComponent : std::size_t {
  kYearOffset = 0, kMonth, kDay, kWeekday, kWeek, kHour, kMinute, kSecond, kNumTimestampComponents
};

/// (year − min_year clamped to [0, max_year − min_year], month, day, weekday,
/// ISO week, hour, minute, second).
std::array<std::int32_t, kNumTimestampComponents> decompose_timestamp(std::int64_t epoch_seconds,
                                                                      int min_year, int max_year);

inline constexpr std::size_t kNumTimeFloats = 4;

/// [fraction of day, fraction of week (Monday 00:00 = 0), fraction of year,
///  (ts − t_min)/(t_max − t_min) clamped to [0,1]].
std::array<double, kNumTimeFloats> time_floats(std::int64_t epoch_seconds, std::int64_t t_min,
                                               std::int64_t t_max);

// ISO-8601 date or date-time: YYYY-MM-DD[(T| )hh:mm[:ss[.fff]]][Z|±hh[:mm]].
std::optional<std::int64_t> parse_iso8601(std::string_view text);
std::optional<std::int64_t> parse_epoch_seconds(std::string_view text);

std::string format_iso8601(std::int64_t epoch_seconds);

}  // namespace tabaconv
