#pragma once

#include <algorithm>
#include <compare>
#include <functional>
#include <optional>
#include <string>
#include <string_view>

#include <boost/uuid/uuid.hpp>

namespace pilotgrid {

/// Task and batch-job identity. Orders like its canonical lowercase string.
class Uuid {
 public:
  Uuid() = default;

  static Uuid random();
  static std::optional<Uuid> parse(std::string_view text);
  /// Throws Error(UnknownId) on malformed input.
  static Uuid from_string(std::string_view text);

  std::string str() const;
  /// First eight hex digits, used in work directory names.
  std::string short_str() const { return str().substr(0, 8); }
  bool is_nil() const { return value_.is_nil(); }
  std::size_t hash() const noexcept;

  friend bool operator==(const Uuid&, const Uuid&) = default;
  friend std::strong_ordering operator<=>(const Uuid& a, const Uuid& b) {
    return std::lexicographical_compare_three_way(a.value_.begin(), a.value_.end(),
                                                  b.value_.begin(), b.value_.end());
  }

 private:
  explicit Uuid(boost::uuids::uuid v) : value_(v) {}
  boost::uuids::uuid value_{};
};

}  // namespace pilotgrid

template <>
struct std::hash<pilotgrid::Uuid> {
  std::size_t operator()(const pilotgrid::Uuid& u) const noexcept {
    return u.hash();
  }
};
