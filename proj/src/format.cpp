#include "fktlab/format.hpp"

#include <array>
#include <charconv>

namespace fktlab {

std::string format_double(double v) {
  std::array<char, 32> buf{};
  const auto r = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), r.ptr);
}

}  // namespace fktlab
