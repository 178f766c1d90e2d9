#include "rdd/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

namespace rdd {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

}  // namespace

KvMap parse_kv_text(const std::string& text) {
  KvMap kv;
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  std::ostringstream problems;
  while (std::getline(is, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      problems << "  line " << line_no << ": expected `key = value`, got \"" << line << "\"\n";
      continue;
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      problems << "  line " << line_no << ": empty key\n";
      continue;
    }
    if (kv.count(key)) {
      problems << "  line " << line_no << ": duplicate key \"" << key << "\"\n";
      continue;
    }
    kv[key] = value;
  }
  const std::string all = problems.str();
  if (!all.empty()) throw ConfigError("configuration text is malformed:\n" + all);
  return kv;
}

KvMap load_kv_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config file " + path);
  std::stringstream buf;
  buf << is.rdbuf();
  try {
    return parse_kv_text(buf.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::string canonical_kv_text(const KvMap& kv) {
  std::ostringstream os;
  for (const auto& [k, v] : kv) os << k << " = " << v << "\n";
  return os.str();
}

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

const std::string* KvReader::raw(const std::string& key) {
  auto it = kv_.find(key);
  if (it == kv_.end()) return nullptr;
  used_.insert(key);
  return &it->second;
}

std::string KvReader::get_string(const std::string& key, const std::string& fallback) {
  const std::string* v = raw(key);
  return v ? *v : fallback;
}

int KvReader::get_int(const std::string& key, int fallback) {
  const std::string* v = raw(key);
  if (!v) return fallback;
  try {
    std::size_t pos = 0;
    const int parsed = std::stoi(*v, &pos);
    if (pos != v->size()) throw std::invalid_argument("trailing characters");
    return parsed;
  } catch (const std::exception&) {
    errors_.push_back(key + ": \"" + *v + "\" is not an integer");
    return fallback;
  }
}

double KvReader::get_double(const std::string& key, double fallback) {
  const std::string* v = raw(key);
  if (!v) return fallback;
  try {
    std::size_t pos = 0;
    const double parsed = std::stod(*v, &pos);
    if (pos != v->size()) throw std::invalid_argument("trailing characters");
    return parsed;
  } catch (const std::exception&) {
    errors_.push_back(key + ": \"" + *v + "\" is not a number");
    return fallback;
  }
}

bool KvReader::get_bool(const std::string& key, bool fallback) {
  const std::string* v = raw(key);
  if (!v) return fallback;
  std::string low = *v;
  std::transform(low.begin(), low.end(), low.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (low == "true" || low == "1" || low == "yes" || low == "on") return true;
  if (low == "false" || low == "0" || low == "no" || low == "off") return false;
  errors_.push_back(key + ": \"" + *v + "\" is not a boolean");
  return fallback;
}

std::vector<std::string> KvReader::unknown_keys() const {
  std::vector<std::string> unknown;
  for (const auto& [k, _] : kv_)
    if (!used_.count(k)) unknown.push_back(k);
  return unknown;
}

void KvReader::finish(bool strict_keys) {
  std::vector<std::string> all = errors_;
  if (strict_keys)
    for (const std::string& k : unknown_keys()) all.push_back(k + ": unknown key");
  if (all.empty()) return;
  std::ostringstream os;
  os << "invalid configuration:\n";
  for (const std::string& e : all) os << "  " << e << "\n";
  throw ConfigError(os.str());
}

}  // namespace rdd
