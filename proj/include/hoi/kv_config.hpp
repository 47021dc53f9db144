#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <string>

namespace hoi {

/// Flat `key = value` settings with dotted section prefixes (`world.h = 6`).
/// Lines starting with '#' are comments. Later layers override earlier ones.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::istream& in, const std::string& source = "<input>");
  static KeyValueConfig load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  void set_double(const std::string& key, double value);
  // Parses a `key=value` override as given on the command line.
  void set_override(const std::string& assignment);
  void merge(const KeyValueConfig& other);

  bool has(const std::string& key) const { return entries_.count(key) != 0; }
  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  long long get_int(const std::string& key, long long fallback) const;
  std::size_t get_size(const std::string& key, std::size_t fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  const std::map<std::string, std::string>& entries() const noexcept { return entries_; }
  std::string dump() const;
  void save(const std::filesystem::path& path) const;

 private:
  std::map<std::string, std::string> entries_;
};

// Shortest text that parses back to exactly `value`.
std::string format_double(double value);

}  // namespace hoi
