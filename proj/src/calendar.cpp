#include "tabaconv/calendar.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <string>

#include "tabaconv/error.hpp"

namespace tabaconv {

namespace chr = std::chrono;

namespace {

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

int monday_based(chr::sys_days d) { return static_cast<int>(chr::weekday(d).iso_encoding()) - 1; }

}  // namespace

CalendarParts calendar_parts(std::int64_t epoch_seconds) {
  if (epoch_seconds < kMinEpochSeconds || epoch_seconds > kMaxEpochSeconds) {
    throw ValueError("timestamp " + std::to_string(epoch_seconds) + " is outside years 1..9999");
  }
  const std::int64_t days = floor_div(epoch_seconds, 86400);
  const std::int64_t sod = epoch_seconds - days * 86400;
  const chr::sys_days date{chr::days{days}};
  const chr::year_month_day ymd{date};

  CalendarParts p;
  p.year = static_cast<int>(ymd.year());
  p.month = static_cast<int>(static_cast<unsigned>(ymd.month()));
  p.day = static_cast<int>(static_cast<unsigned>(ymd.day()));
  p.weekday = monday_based(date);
  p.hour = static_cast<int>(sod / 3600);
  p.minute = static_cast<int>((sod % 3600) / 60);
  p.second = static_cast<int>(sod % 60);
  p.day_of_year = static_cast<int>((date - chr::sys_days{ymd.year() / chr::January / 1}).count()) + 1;

  // ISO week: the week belongs to the year containing its Thursday.
  const chr::sys_days thursday = date - chr::days{p.weekday} + chr::days{3};
  const chr::year_month_day thu{thursday};
  const auto thu_doy = (thursday - chr::sys_days{thu.year() / chr::January / 1}).count();
  p.iso_week = static_cast<int>(thu_doy / 7) + 1;
  return p;
}

std::array<std::int32_t, kNumTimestampComponents> decompose_timestamp(std::int64_t epoch_seconds,
                                                                      int min_year, int max_year) {
  const CalendarParts p = calendar_parts(epoch_seconds);
  const int span = std::max(0, max_year - min_year);
  return {std::clamp(p.year - min_year, 0, span), p.month, p.day, p.weekday,
          p.iso_week, p.hour, p.minute, p.second};
}

std::array<double, kNumTimeFloats> time_floats(std::int64_t epoch_seconds, std::int64_t t_min,
                                               std::int64_t t_max) {
  const CalendarParts p = calendar_parts(epoch_seconds);
  const double sod = p.hour * 3600.0 + p.minute * 60.0 + p.second;
  const bool leap = chr::year{p.year}.is_leap();
  const double year_seconds = (leap ? 366.0 : 365.0) * 86400.0;
  double span = 0.0;
  if (t_max > t_min) {
    span = static_cast<double>(epoch_seconds - t_min) / static_cast<double>(t_max - t_min);
  }
  return {sod / 86400.0, (p.weekday * 86400.0 + sod) / (7.0 * 86400.0),
          ((p.day_of_year - 1) * 86400.0 + sod) / year_seconds, std::clamp(span, 0.0, 1.0)};
}

namespace {

bool read_int(std::string_view s, std::size_t pos, std::size_t len, int& out) {
  if (pos + len > s.size()) return false;
  for (std::size_t i = pos; i < pos + len; ++i)
    if (s[i] < '0' || s[i] > '9') return false;
  std::from_chars(s.data() + pos, s.data() + pos + len, out);
  return true;
}

}  // namespace

std::optional<std::int64_t> parse_iso8601(std::string_view s) {
  while (!s.empty() && (s.front() == ' ')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\r')) s.remove_suffix(1);
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, sec = 0;
  if (!read_int(s, 0, 4, y) || s.size() < 10 || s[4] != '-' || !read_int(s, 5, 2, mo) || s[7] != '-' ||
      !read_int(s, 8, 2, d)) {
    return std::nullopt;
  }
  const chr::year_month_day ymd{chr::year{y}, chr::month{static_cast<unsigned>(mo)},
                                chr::day{static_cast<unsigned>(d)}};
  if (!ymd.ok()) return std::nullopt;
  std::size_t pos = 10;
  std::int64_t offset = 0;
  if (pos < s.size()) {
    if (s[pos] != 'T' && s[pos] != 't' && s[pos] != ' ') return std::nullopt;
    ++pos;
    if (!read_int(s, pos, 2, h) || pos + 2 >= s.size() || s[pos + 2] != ':' || !read_int(s, pos + 3, 2, mi)) {
      return std::nullopt;
    }
    pos += 5;
    if (pos < s.size() && s[pos] == ':') {
      if (!read_int(s, pos + 1, 2, sec)) return std::nullopt;
      pos += 3;
      if (pos < s.size() && (s[pos] == '.' || s[pos] == ',')) {
        ++pos;
        while (pos < s.size() && s[pos] >= '0' && s[pos] <= '9') ++pos;  // fractional seconds dropped
      }
    }
    if (h > 23 || mi > 59 || sec > 60) return std::nullopt;
    if (pos < s.size()) {
      if (s[pos] == 'Z' || s[pos] == 'z') {
        ++pos;
      } else if (s[pos] == '+' || s[pos] == '-') {
        const int sign = s[pos] == '-' ? -1 : 1;
        int oh = 0, om = 0;
        if (!read_int(s, pos + 1, 2, oh)) return std::nullopt;
        pos += 3;
        if (pos < s.size() && s[pos] == ':') ++pos;
        if (pos < s.size()) {
          if (!read_int(s, pos, 2, om)) return std::nullopt;
          pos += 2;
        }
        offset = sign * (oh * 3600LL + om * 60LL);
      }
    }
    if (pos != s.size()) return std::nullopt;
  }
  const std::int64_t days = chr::sys_days{ymd}.time_since_epoch().count();
  return days * 86400 + h * 3600LL + mi * 60LL + sec - offset;
}

std::optional<std::int64_t> parse_epoch_seconds(std::string_view s) {
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\r')) s.remove_suffix(1);
  if (s.empty()) return std::nullopt;
  std::int64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

std::string format_iso8601(std::int64_t epoch_seconds) {
  const CalendarParts p = calendar_parts(epoch_seconds);
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02dZ", p.year, p.month, p.day, p.hour, p.minute,
                p.second);
  return buf;
}

}  // namespace tabaconv
