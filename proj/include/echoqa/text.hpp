#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace echoqa {

/// Fixed-point decimal with '.' separator regardless of locale.
std::string format_fixed(double value, int precision = 6);
/// Shortest decimal text that parses back to exactly `value`.
std::string format_shortest(double value);
std::string json_quote(std::string_view s);

/// Builds one JSON object on a single line with fields in insertion order.
class JsonLine {
 public:
  JsonLine& field(std::string_view key, std::string_view value);
  JsonLine& field(std::string_view key, const char* value) { return field(key, std::string_view(value)); }
  JsonLine& field(std::string_view key, std::int64_t value);
  JsonLine& field(std::string_view key, int value) { return field(key, static_cast<std::int64_t>(value)); }
  JsonLine& field(std::string_view key, std::size_t value) { return field(key, static_cast<std::int64_t>(value)); }
  JsonLine& field(std::string_view key, bool value);
  /// Fixed precision decimal.
  JsonLine& fixed(std::string_view key, double value, int precision = 6);
  JsonLine& fixed(std::string_view key, std::span<const double> values, int precision = 6);
  JsonLine& shortest(std::string_view key, double value);
  JsonLine& integers(std::string_view key, std::span<const int> values);
  JsonLine& strings(std::string_view key, std::span<const std::string> values);
  /// Inserts pre-rendered JSON text as the value.
  JsonLine& raw(std::string_view key, std::string_view json);

  std::string str() const { return body_ + "}"; }

 private:
  void key(std::string_view k);
  std::string body_ = "{";
};

}  // namespace echoqa
