#include "pilotgrid/uuid.hpp"

#include <cctype>

#include <boost/uuid/random_generator.hpp>
#include <boost/uuid/string_generator.hpp>
#include <boost/uuid/uuid_io.hpp>

#include "pilotgrid/error.hpp"

namespace pilotgrid {

Uuid Uuid::random() {
  // random_generator is not thread-safe; one per thread.
  thread_local boost::uuids::random_generator gen;
  return Uuid{gen()};
}

std::optional<Uuid> Uuid::parse(std::string_view text) {
  if (text.size() != 36) return std::nullopt;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    const bool dash = (i == 8 || i == 13 || i == 18 || i == 23);
    if (dash ? c != '-' : !std::isxdigit(static_cast<unsigned char>(c))) return std::nullopt;
  }
  try {
    return Uuid{boost::uuids::string_generator{}(std::string(text))};
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

Uuid Uuid::from_string(std::string_view text) {
  if (auto u = parse(text)) return *u;
  throw Error(ErrorCode::UnknownId, "malformed uuid '" + std::string(text) + "'",
              std::string(text));
}

std::string Uuid::str() const { return boost::uuids::to_string(value_); }

std::size_t Uuid::hash() const noexcept { return boost::uuids::hash_value(value_); }

}  // namespace pilotgrid
