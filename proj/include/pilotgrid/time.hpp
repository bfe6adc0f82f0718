#pragma once

#include <chrono>
#include <functional>
#include <mutex>
#include <string>

namespace pilotgrid {

using Timestamp = std::chrono::sys_time<std::chrono::microseconds>;
using Clock = std::function<Timestamp()>;

Timestamp now_utc();
Clock system_clock();

/// Microseconds since the epoch, the storage representation.
inline std::int64_t to_micros(Timestamp t) { return t.time_since_epoch().count(); }
inline Timestamp from_micros(std::int64_t us) {
  return Timestamp{std::chrono::microseconds{us}};
}

inline Timestamp plus_seconds(Timestamp t, double seconds) {
  return t + std::chrono::microseconds{static_cast<std::int64_t>(seconds * 1e6)};
}

inline double seconds_between(Timestamp a, Timestamp b) {
  return static_cast<double>((b - a).count()) / 1e6;
}

/// "2026-10-18T12:34:56.123456Z"
std::string format_iso8601(Timestamp t);

/// Test clock; advanced explicitly.
class ManualClock {
 public:
  explicit ManualClock(Timestamp start = from_micros(1'700'000'000'000'000)) : now_(start) {}

  Timestamp now() const {
    std::lock_guard lock(mu_);
    return now_;
  }
  void advance_seconds(double s) {
    std::lock_guard lock(mu_);
    now_ = plus_seconds(now_, s);
  }
  Clock clock() {
    return [this] { return now(); };
  }

 private:
  mutable std::mutex mu_;
  Timestamp now_;
};

}  // namespace pilotgrid
