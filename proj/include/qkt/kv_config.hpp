#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>

namespace qkt {

// Line-based `key = value` configuration. '#' starts a comment line; keys are
// unique and kept sorted so serialisation is deterministic.
using KeyValues = std::map<std::string, std::string>;

KeyValues parse_key_values(std::istream& in);
KeyValues read_key_values(const std::filesystem::path& path);
void write_key_values(std::ostream& out, const KeyValues& values);

// Shortest text that parses back to the identical double.
std::string format_double(double value);

double get_double(const KeyValues& kv, const std::string& key);
std::uint64_t get_uint(const KeyValues& kv, const std::string& key);
bool get_bool(const KeyValues& kv, const std::string& key);
const std::string& get_string(const KeyValues& kv, const std::string& key);

}  // namespace qkt
