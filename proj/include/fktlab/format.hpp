#pragma once

#include <string>

namespace fktlab {

// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

}  // namespace fktlab
