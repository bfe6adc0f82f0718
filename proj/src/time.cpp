#include "pilotgrid/time.hpp"

#include <ctime>
#include <iomanip>
#include <sstream>

namespace pilotgrid {

Timestamp now_utc() {
  return std::chrono::time_point_cast<std::chrono::microseconds>(std::chrono::system_clock::now());
}

Clock system_clock() { return &now_utc; }

std::string format_iso8601(Timestamp t) {
  const auto us = to_micros(t);
  auto secs = static_cast<std::time_t>(us / 1'000'000);
  auto frac = us % 1'000'000;
  if (frac < 0) {
    frac += 1'000'000;
    secs -= 1;
  }
  std::tm tm{};
  gmtime_r(&secs, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%S") << '.' << std::setw(6) << std::setfill('0')
     << frac << 'Z';
  return os.str();
}

}  // namespace pilotgrid
