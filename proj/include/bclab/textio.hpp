#pragma once

#include <string>
#include <string_view>

namespace bclab {

// Locale-independent number formatting; 17 significant digits round-trip
// every finite double.
std::string format_double(double v, int significant = 17);
double parse_double(std::string_view text);
long long parse_integer(std::string_view text);

std::string_view trim(std::string_view s);

}  // namespace bclab
