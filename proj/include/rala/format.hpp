#pragma once

#include <string>

namespace rala {

// Shortest decimal text that parses back to the same double ("nan", "inf", "-inf" for
// non-finite values).
std::string format_double(double v);

// Inverse of format_double; throws FormatError on malformed text.
double parse_double(const std::string& s);

}  // namespace rala
