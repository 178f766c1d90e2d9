// Flat `key = value` configuration text: parsing, canonical form, digest,
// and a typed reader that collects every error before failing.
#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "rdd/errors.hpp"

namespace rdd {

using KvMap = std::map<std::string, std::string>;

// Parses `key = value` lines; '#' starts a comment; blank lines are skipped.
// Duplicate keys and malformed lines raise ConfigError naming the line.
KvMap parse_kv_text(const std::string& text);
KvMap load_kv_file(const std::string& path);

// Sorted `key = value` lines — the digest input, stable across formatting.
std::string canonical_kv_text(const KvMap& kv);

std::uint64_t fnv1a64(const std::string& bytes);

// Typed access over a KvMap. Parse failures are accumulated in `errors` so a
// caller can report every bad key at once; reads mark keys as consumed so
// unknown keys can be flagged afterwards.
class KvReader {
 public:
  explicit KvReader(const KvMap& kv) : kv_(kv) {}

  std::string get_string(const std::string& key, const std::string& fallback);
  int get_int(const std::string& key, int fallback);
  double get_double(const std::string& key, double fallback);
  bool get_bool(const std::string& key, bool fallback);

  std::vector<std::string> unknown_keys() const;
  const std::vector<std::string>& errors() const { return errors_; }
  // Throws ConfigError itemizing accumulated errors (and unknown keys if
  // strict) when anything went wrong.
  void finish(bool strict_keys);

 private:
  const std::string* raw(const std::string& key);
  const KvMap& kv_;
  std::set<std::string> used_;
  std::vector<std::string> errors_;
};

}  // namespace rdd
