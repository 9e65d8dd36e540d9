#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace milecf::csv {

struct Record {
  std::vector<std::string> fields;
  std::size_t line = 0;  // 1-based line where the record starts
};

/// RFC 4180 reader: comma separated, double-quote quoting with "" escapes,
/// CRLF or LF line endings, quoted fields may span lines.
std::vector<Record> read(std::string_view text);

/// Quotes a field only when it contains a comma, quote, or line break.
std::string escape(std::string_view field);

}  // namespace milecf::csv
