#include "echoqa/text.hpp"

#include <array>
#include <charconv>
#include <cmath>
#include <stdexcept>

namespace echoqa {

std::string format_fixed(double value, int precision) {
  if (!std::isfinite(value)) throw std::invalid_argument("cannot format a non-finite number");
  std::array<char, 64> buf;
  auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), value, std::chars_format::fixed, precision);
  if (ec != std::errc{}) throw std::runtime_error("number too large to format");
  std::string s(buf.data(), end);
  // Avoid "-0.000000" so that values rounding to zero print identically.
  if (s.front() == '-' && s.find_first_not_of("-0.") == std::string::npos) s.erase(0, 1);
  return s;
}

std::string format_shortest(double value) {
  if (!std::isfinite(value)) throw std::invalid_argument("cannot format a non-finite number");
  std::array<char, 64> buf;
  auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), value);
  if (ec != std::errc{}) throw std::runtime_error("number too large to format");
  return std::string(buf.data(), end);
}

std::string json_quote(std::string_view s) {
  std::string out = "\"";
  for (char c : s) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      case '\r': out += "\\r"; break;
      default:
        if (static_cast<unsigned char>(c) < 0x20) {
          static constexpr char hex[] = "0123456789abcdef";
          out += "\\u00";
          out += hex[(c >> 4) & 0xF];
          out += hex[c & 0xF];
        } else {
          out += c;
        }
    }
  }
  return out + "\"";
}

void JsonLine::key(std::string_view k) {
  if (body_.size() > 1) body_ += ",";
  body_ += json_quote(k);
  body_ += ":";
}

JsonLine& JsonLine::field(std::string_view k, std::string_view value) {
  key(k);
  body_ += json_quote(value);
  return *this;
}

JsonLine& JsonLine::field(std::string_view k, std::int64_t value) {
  key(k);
  body_ += std::to_string(value);
  return *this;
}

JsonLine& JsonLine::field(std::string_view k, bool value) {
  key(k);
  body_ += value ? "true" : "false";
  return *this;
}

JsonLine& JsonLine::fixed(std::string_view k, double value, int precision) {
  key(k);
  body_ += format_fixed(value, precision);
  return *this;
}

JsonLine& JsonLine::fixed(std::string_view k, std::span<const double> values, int precision) {
  key(k);
  body_ += "[";
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) body_ += ",";
    body_ += format_fixed(values[i], precision);
  }
  body_ += "]";
  return *this;
}

JsonLine& JsonLine::shortest(std::string_view k, double value) {
  key(k);
  body_ += format_shortest(value);
  return *this;
}

JsonLine& JsonLine::integers(std::string_view k, std::span<const int> values) {
  key(k);
  body_ += "[";
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) body_ += ",";
    body_ += std::to_string(values[i]);
  }
  body_ += "]";
  return *this;
}

JsonLine& JsonLine::strings(std::string_view k, std::span<const std::string> values) {
  key(k);
  body_ += "[";
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) body_ += ",";
    body_ += json_quote(values[i]);
  }
  body_ += "]";
  return *this;
}

JsonLine& JsonLine::raw(std::string_view k, std::string_view json) {
  key(k);
  body_ += json;
  return *this;
}

}  // namespace echoqa
